"""
Provides the deterministic synthetic person-search benchmark.

A scene is a textured background with rectangular "people". The pattern inside a person
box is the identity's signature: a hue, a stripe frequency and a stripe direction, drawn
relative to the box so it survives rescaling. Additive noise and the domain's colour cast
and hue shift make two domains with the same identities look different.

Usage:
    ```python
    from PersonSearch.Synth import gen_benchmark
    from PersonSearch.ValidationModels.Synth import BenchmarkSizes, DomainSpec

    splits = gen_benchmark(DomainSpec.reference_pair(), BenchmarkSizes(), seed=0, root="data")
    splits["domA"].test  # identity-labeled test manifest of domain domA
    ```
"""

import math
from pathlib import Path
from typing import Sequence

import numpy as np
import structlog
from PIL import Image

from PersonSearch.Dataset import iou, save_manifest
from PersonSearch.Exceptions.Synth import SynthException
from PersonSearch.ValidationModels.DataModel import (
    BoundingBox,
    DatasetManifest,
    PersonAnnotation,
    SceneRecord,
)
from PersonSearch.ValidationModels.Synth import (
    BenchmarkSizes,
    DomainSplits,
    DomainSpec,
    IdentitySignature,
    StripeOrientation,
)

logger = structlog.get_logger()

GOLDEN_RATIO_CONJUGATE: float = (math.sqrt(5.0) - 1.0) / 2.0
HUE_BINS: int = 12
STRIPE_FREQUENCIES: tuple[float, float] = (1.5, 3.0)
MAX_OVERLAP: float = 0.3
MAX_PLACEMENT_ATTEMPTS: int = 200
SEPARABILITY_CROP: tuple[int, int] = (16, 8)

SPLIT_NAMES: tuple[str, str, str] = ("detection", "reid", "test")


def identity_signature(spec: DomainSpec, index: int) -> IdentitySignature:
    """
    The signature of identity `index`. Hue bin, orientation and frequency are read off
    successive digits of the index, so the first 72 identities get distinct signatures.
    """
    orientations = tuple(StripeOrientation)
    hue_bin = index % HUE_BINS
    return IdentitySignature(
        hue=(spec.signature_seed * GOLDEN_RATIO_CONJUGATE / HUE_BINS + hue_bin * GOLDEN_RATIO_CONJUGATE) % 1.0,
        stripe_frequency=STRIPE_FREQUENCIES[(index // (HUE_BINS * len(orientations))) % len(STRIPE_FREQUENCIES)],
        orientation=orientations[(index // HUE_BINS) % len(orientations)],
    )


def _background(spec: DomainSpec) -> np.ndarray:
    ys, xs = np.mgrid[0 : spec.image_height, 0 : spec.image_width].astype(np.float64)
    texture = np.sin(2 * np.pi * spec.background_frequency * xs / spec.image_width) * np.cos(
        2 * np.pi * spec.background_frequency * ys / spec.image_height
    )
    gray = spec.background_level + spec.background_contrast * texture
    return np.repeat(gray[:, :, None], 3, axis=2)


def render_person(spec: DomainSpec, signature: IdentitySignature, width: int, height: int) -> np.ndarray:
    """
    Renders a `height x width` person patch as float RGB in [0, 1].
    """
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    u, v = (u + 0.5) / width, (v + 0.5) / height
    phase = {
        StripeOrientation.horizontal: v,
        StripeOrientation.vertical: u,
        StripeOrientation.diagonal: (u + v) / 2.0,
    }[signature.orientation]
    stripes = np.sin(2 * np.pi * signature.stripe_frequency * phase) > 0
    hue = (signature.hue + spec.hue_shift) % 1.0
    hsv = np.stack(
        [
            np.full((height, width), hue * 255.0),
            np.full((height, width), 0.8 * 255.0),
            np.where(stripes, 0.9, 0.4) * 255.0,
        ],
        axis=2,
    )
    rgb = Image.frombytes("HSV", (width, height), np.round(hsv).astype(np.uint8).tobytes()).convert("RGB")
    return np.asarray(rgb, dtype=np.float64) / 255.0


def _place(spec: DomainSpec, placed: list[BoundingBox], rng: np.random.Generator) -> BoundingBox:
    """
    Draws a box at the domain's scales overlapping every placed box by less than
    `MAX_OVERLAP`.

    Raises:
        PersonSearch.Exceptions.Synth.SynthException: If every attempt overlaps.
    """
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        height = int(round(rng.uniform(*spec.person_height)))
        width = max(int(round(height * rng.uniform(*spec.person_aspect))), 1)
        x1 = int(rng.integers(0, spec.image_width - width + 1))
        y1 = int(rng.integers(0, spec.image_height - height + 1))
        box = BoundingBox(x1=x1, y1=y1, x2=x1 + width, y2=y1 + height)
        if all(iou(box, other) < MAX_OVERLAP for other in placed):
            return box
    logger.error(f"Cannot place person {len(placed) + 1} in a {spec.name} scene after {MAX_PLACEMENT_ATTEMPTS} attempts.")
    raise SynthException(
        f"Cannot place person {len(placed) + 1} in a {spec.name} scene after {MAX_PLACEMENT_ATTEMPTS} attempts."
    )


def _render_scene(
    spec: DomainSpec,
    n_people: int,
    rng_seed: int | Sequence[int],
    identity_indices: Sequence[int] | None,
    image_ref: str,
) -> tuple[SceneRecord, np.ndarray, list[int | None]]:
    if n_people < 0:
        raise SynthException(f"People count must be non-negative, got {n_people}.")
    rng = np.random.default_rng(rng_seed)
    pool = list(identity_indices if identity_indices is not None else spec.train_identities)
    if n_people and not pool:
        raise SynthException("No identity to draw people from.")
    drawn = [pool[int(i)] for i in rng.choice(len(pool), size=n_people, replace=n_people > len(pool))] if n_people else []

    canvas = _background(spec)
    placed: list[BoundingBox] = []
    annotations: list[PersonAnnotation] = []
    indices: list[int | None] = []
    for index in drawn:
        box = _place(spec, placed, rng)
        placed.append(box)
        if rng.random() < spec.unlabeled_fraction:
            signature = IdentitySignature(
                hue=float(rng.random()),
                stripe_frequency=float(rng.uniform(1.0, 4.0)),
                orientation=tuple(StripeOrientation)[int(rng.integers(len(StripeOrientation)))],
            )
            label, identity_index = None, None
        else:
            signature = identity_signature(spec, index)
            label, identity_index = spec.identity_label(index), index
        x1, y1, x2, y2 = (int(value) for value in box.as_tuple())
        canvas[y1:y2, x1:x2] = render_person(spec, signature, x2 - x1, y2 - y1)
        annotations.append(PersonAnnotation(box=box, identity=label))
        indices.append(identity_index)

    canvas = canvas + np.asarray(spec.color_cast)[None, None, :]
    canvas = canvas + rng.normal(0.0, spec.noise, size=canvas.shape)
    pixels = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
    record = SceneRecord(
        image_ref=image_ref,
        width=spec.image_width,
        height=spec.image_height,
        annotations=tuple(annotations),
    )
    return record, pixels, indices


def gen_scene(
    spec: DomainSpec,
    n_people: int,
    rng_seed: int | Sequence[int],
    identity_indices: Sequence[int] | None = None,
    image_ref: str = "scene.png",
) -> tuple[SceneRecord, np.ndarray]:
    """
    Generates one scene.

    Args:
        spec (DomainSpec): The domain.
        n_people (int): People to place, at least 0.
        rng_seed (int | Sequence[int]): Seed; equal seeds give equal pixels and annotations.
        identity_indices (Sequence[int] | None): Identities to draw from; the domain's
            training pool by default. Distinct identities are drawn while the pool allows.
        image_ref (str): Reference recorded in the scene record.

    Returns:
        tuple[SceneRecord, np.ndarray]: The annotations and uint8 pixels (H, W, 3).

    Raises:
        PersonSearch.Exceptions.Synth.SynthException: If `n_people` is negative or the people
            cannot be placed.
    """
    record, pixels, _ = _render_scene(spec, n_people, rng_seed, identity_indices, image_ref)
    return record, pixels


def _scene_seed(seed: int, domain: int, split: int, scene: int) -> int:
    return int(np.random.SeedSequence([seed, domain, split, scene]).generate_state(1)[0])


def gen_benchmark(
    specs: Sequence[DomainSpec],
    sizes: BenchmarkSizes,
    seed: int,
    root: str | Path,
) -> dict[str, DomainSplits]:
    """
    Generates the training and test data of every domain under `root`.

    Each domain gets a detection-only training manifest, an identity-labeled training
    manifest and an identity-labeled test manifest drawn from held-out identities. Identity
    labels carry the domain name, so two domains never share one. Images are written as PNG
    under `<domain>/<split>/` and manifests as `<domain>-<split>.jsonl`. Every scene has its
    own derived seed.

    Raises:
        PersonSearch.Exceptions.Synth.SynthException: If no domain is given or names repeat.
    """
    if not specs:
        raise SynthException("At least one domain is required.")
    names = [spec.name for spec in specs]
    if len(set(names)) != len(names):
        raise SynthException(f"Domain names must be unique, got {names}.")

    root = Path(root)
    splits: dict[str, DomainSplits] = {}
    for domain_index, spec in enumerate(specs):
        manifests: dict[str, DatasetManifest] = {}
        for split_index, split in enumerate(SPLIT_NAMES):
            count = {"detection": sizes.detection_scenes, "reid": sizes.reid_scenes, "test": sizes.test_scenes}[split]
            pool = spec.test_identities if split == "test" else spec.train_identities
            (root / spec.name / split).mkdir(parents=True, exist_ok=True)
            records = []
            for scene in range(count):
                scene_seed = _scene_seed(seed, domain_index, split_index, scene)
                n_people = int(np.random.default_rng(scene_seed).integers(sizes.min_people, sizes.max_people + 1))
                image_ref = f"{spec.name}/{split}/{scene:05d}.png"
                record, pixels, _ = _render_scene(spec, n_people, [scene_seed, 1], pool, image_ref)
                Image.fromarray(pixels).save(root / image_ref)
                if split == "detection":
                    record = record.model_copy(
                        update={"annotations": tuple(PersonAnnotation(box=a.box) for a in record.annotations)}
                    )
                records.append(record)
            manifest = DatasetManifest(name=f"{spec.name}-{split}", records=tuple(records))
            save_manifest(manifest, root / f"{manifest.name}.jsonl")
            manifests[split] = manifest
        splits[spec.name] = DomainSplits(
            domain=spec.name,
            root=root,
            detection_train=manifests["detection"],
            reid_train=manifests["reid"],
            test=manifests["test"],
        )
        logger.info(f"Generated domain {spec.name}: {sum(len(m.records) for m in manifests.values())} scenes.")
    return splits


def _crop_vectors(spec: DomainSpec, scenes: int, seed: int, pool: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    height, width = SEPARABILITY_CROP
    vectors: list[np.ndarray] = []
    labels: list[int] = []
    for scene in range(scenes):
        record, pixels, indices = _render_scene(spec, 4, [seed, scene], pool, f"{scene:05d}.png")
        image = Image.fromarray(pixels)
        for annotation, index in zip(record.annotations, indices):
            if index is None:
                continue
            box = tuple(int(value) for value in annotation.box.as_tuple())
            crop = image.crop(box).resize((width, height), Image.Resampling.BILINEAR)
            vectors.append(np.asarray(crop, dtype=np.float64).ravel() / 255.0)
            labels.append(index)
    return np.stack(vectors), np.asarray(labels)


def signature_separability(
    fit_spec: DomainSpec,
    eval_spec: DomainSpec,
    scenes: int = 40,
    seed: int = 0,
) -> float:
    """
    Accuracy of a nearest-centroid classifier on raw resized crops, fitted on scenes of
    `fit_spec` and evaluated on fresh scenes of `eval_spec`, over the training identities
    of `fit_spec`.

    In-domain this checks that identities are learnable from pixels; across domains it
    measures how much the domain shift hurts.
    """
    pool = list(fit_spec.train_identities)
    fit_vectors, fit_labels = _crop_vectors(fit_spec, scenes, seed, pool)
    eval_vectors, eval_labels = _crop_vectors(eval_spec, scenes, seed + 1, pool)
    classes = np.unique(fit_labels)
    centroids = np.stack([fit_vectors[fit_labels == label].mean(axis=0) for label in classes])
    distances = ((eval_vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    predicted = classes[np.argmin(distances, axis=1)]
    return float(np.mean(predicted == eval_labels))
