"""
Provides the dataset plumbing of PersonSearch: box overlap, manifest loading, saving and
aggregation, and the image store that turns `image_ref`s into tensors.

Usage:
    ```python
    from PersonSearch.Dataset import ImageStore, load_manifest, merge_manifests
    from PersonSearch.ValidationModels.DataModel import MergeMode

    part_a = load_manifest("data/domA-detection.jsonl")
    part_b = load_manifest("data/domB-detection.jsonl")
    merged = merge_manifests([part_a, part_b], MergeMode.detection_only)

    store = ImageStore("data")
    image = store.load(merged.records[0].image_ref)  # float tensor (3, H, W) in [0, 1]
    ```
"""

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import orjson
import structlog
import torch
from cytoolz import concat, frequencies, valfilter
from PIL import Image
from pydantic import ValidationError

from PersonSearch.Exceptions.Geometry import GeometryException
from PersonSearch.Exceptions.Manifest import ManifestException
from PersonSearch.ValidationModels.DataModel import (
    MANIFEST_FORMAT,
    MANIFEST_VERSION,
    BoundingBox,
    DatasetManifest,
    ManifestHeader,
    MergeMode,
    PersonAnnotation,
    SceneLine,
    SceneRecord,
)

logger = structlog.get_logger()


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """
    Intersection over union of two boxes.

    Args:
        a (BoundingBox): First box.
        b (BoundingBox): Second box.

    Returns:
        float: The overlap ratio in [0, 1]; symmetric in its arguments.

    Raises:
        PersonSearch.Exceptions.Geometry.GeometryException: If either box has no area.
    """
    if a.area <= 0 or b.area <= 0:
        raise GeometryException(f"Degenerate box in IoU: {a.as_tuple()} vs {b.as_tuple()}.")
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def boxes_to_tensor(boxes: Iterable[BoundingBox]) -> torch.Tensor:
    """
    Stacks boxes into a float32 tensor of shape (N, 4).
    """
    rows = [box.as_tuple() for box in boxes]
    return torch.tensor(rows, dtype=torch.float32).reshape(len(rows), 4)


def load_manifest(path: str | Path) -> DatasetManifest:
    """
    Reads and validates a manifest file.

    The first line may be a header naming the manifest; without one the manifest is named
    after the file stem. Every other non-blank line is a scene record.

    Args:
        path (str | Path): The manifest file.

    Returns:
        DatasetManifest: The validated manifest.

    Raises:
        PersonSearch.Exceptions.Manifest.ManifestException: If the file is missing, a line is
            not JSON, a record is malformed, or a box is invalid or out of bounds.
    """
    path = Path(path)
    if not path.is_file():
        logger.error(f"Manifest not found: {path}")
        raise ManifestException(f"Manifest not found: {path}")

    name: str = path.stem
    records: list[SceneRecord] = []
    with path.open("rb") as handle:
        for line_number, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                payload = orjson.loads(raw)
            except orjson.JSONDecodeError as decode_error:
                logger.error(f"{path}:{line_number}: not a JSON object: {decode_error}")
                raise ManifestException(
                    f"{path}:{line_number}: not a JSON object: {decode_error}"
                ) from decode_error

            if line_number == 1 and isinstance(payload, dict) and "format" in payload:
                try:
                    header = ManifestHeader.model_validate(payload)
                except ValidationError as validation_error:
                    logger.error(f"{path}: invalid header: {validation_error}")
                    raise ManifestException(
                        f"{path}: invalid header: {validation_error}"
                    ) from validation_error
                if header.format != MANIFEST_FORMAT or header.version > MANIFEST_VERSION:
                    logger.error(f"{path}: unsupported manifest {header.format} v{header.version}")
                    raise ManifestException(
                        f"{path}: unsupported manifest {header.format} v{header.version}"
                    )
                name = header.name
                continue

            ref = payload.get("image_ref", "?") if isinstance(payload, dict) else "?"
            try:
                records.append(SceneLine.model_validate(payload).to_record())
            except ValidationError as validation_error:
                logger.error(f"{path}:{line_number}: invalid record {ref!r}: {validation_error}")
                raise ManifestException(
                    f"{path}:{line_number}: invalid record {ref!r}: {validation_error}"
                ) from validation_error

    try:
        manifest = DatasetManifest(name=name, records=tuple(records))
    except ValidationError as validation_error:
        logger.error(f"{path}: invalid manifest: {validation_error}")
        raise ManifestException(f"{path}: invalid manifest: {validation_error}") from validation_error

    logger.info(f"Loaded manifest {manifest.name!r} ({len(records)} records) from {path}.")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path, header: bool = True) -> Path:
    """
    Writes a manifest in the line format read by `load_manifest`.

    Args:
        manifest (DatasetManifest): The manifest to write.
        path (str | Path): Destination file; parent directories are created.
        header (bool): Whether to write the header line carrying the manifest name.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[bytes] = []
    if header:
        lines.append(
            orjson.dumps(
                ManifestHeader(format=MANIFEST_FORMAT, name=manifest.name).model_dump()
            )
        )
    for record in manifest.records:
        line = SceneLine.from_record(record).model_dump()
        line["boxes"] = [valfilter(lambda value: value is not None, box) for box in line["boxes"]]
        lines.append(orjson.dumps(line))
    path.write_bytes(b"\n".join(lines) + b"\n")
    logger.info(f"Saved manifest {manifest.name!r} ({len(manifest.records)} records) to {path}.")
    return path


def _relabel(record: SceneRecord, mode: MergeMode, prefix: str) -> SceneRecord:
    annotations = tuple(
        PersonAnnotation(
            box=annotation.box,
            identity=(
                None
                if mode is MergeMode.detection_only or annotation.identity is None
                else f"{prefix}/{annotation.identity}"
            ),
        )
        for annotation in record.annotations
    )
    return record.model_copy(update={"annotations": annotations})


def merge_manifests(
    parts: Sequence[DatasetManifest],
    mode: MergeMode,
    name: str | None = None,
) -> DatasetManifest:
    """
    Aggregates manifests into one.

    In `detection-only` mode every identity label is stripped and boxes are kept. In `full`
    mode identities are kept, prefixed with the name of the part they come from.

    Args:
        parts (Sequence[DatasetManifest]): The manifests to aggregate, in order.
        mode (MergeMode): The aggregation mode.
        name (str | None): Name of the result; defaults to the part names joined by `+`.

    Returns:
        DatasetManifest: The union of the parts' records, in part order.

    Raises:
        PersonSearch.Exceptions.Manifest.ManifestException: If no part is given or two parts
            share an `image_ref`.
    """
    if not parts:
        logger.error("Cannot merge an empty list of manifests.")
        raise ManifestException("Cannot merge an empty list of manifests.")

    counts = frequencies(concat((record.image_ref for record in part.records) for part in parts))
    duplicates = sorted(ref for ref, count in counts.items() if count > 1)
    if duplicates:
        logger.error(f"Duplicate image_refs across manifests: {duplicates[:5]}")
        raise ManifestException(f"Duplicate image_refs across manifests: {duplicates[:5]}")

    records = tuple(
        _relabel(record, mode, part.name) for part in parts for record in part.records
    )
    merged_name = name or "+".join(part.name for part in parts)
    logger.debug(f"Merged {len(parts)} manifests into {merged_name!r} ({mode}).")
    return DatasetManifest(name=merged_name, records=records)


class ImageStore:
    """
    Resolves image references against a directory and decodes them into tensors.

    Images can also be registered in memory, which is how tests and the benchmark feed
    synthetic scenes without touching the disk.

    Attributes:
        root (Path): Directory `image_ref`s are relative to.
    """

    root: Path

    def __init__(self, root: str | Path = ".") -> None:
        self.root = Path(root)
        self._memory: dict[str, torch.Tensor] = {}

    @classmethod
    def for_manifest(cls, manifest_path: str | Path) -> "ImageStore":
        """
        Returns a store rooted at the directory holding `manifest_path`.
        """
        return cls(Path(manifest_path).parent)

    def put(self, image_ref: str, image: torch.Tensor | np.ndarray) -> None:
        """
        Registers an in-memory image, either a float tensor (3, H, W) or uint8 pixels (H, W, 3).
        """
        self._memory[image_ref] = (
            image if isinstance(image, torch.Tensor) else pixels_to_tensor(image)
        )

    def load(self, image_ref: str) -> torch.Tensor:
        """
        Returns the image as a float32 tensor of shape (3, H, W) with values in [0, 1].

        Raises:
            PersonSearch.Exceptions.Manifest.ManifestException: If the image is neither in
                memory nor a readable file.
        """
        if image_ref in self._memory:
            return self._memory[image_ref]
        path = self.root / image_ref
        try:
            with Image.open(path) as image:
                pixels = np.asarray(image.convert("RGB"))
        except OSError as os_error:
            logger.error(f"Cannot read image {path}: {os_error}")
            raise ManifestException(f"Cannot read image {path}: {os_error}") from os_error
        return pixels_to_tensor(pixels)

    def __contains__(self, image_ref: str) -> bool:
        return image_ref in self._memory or (self.root / image_ref).is_file()


def pixels_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """
    Converts uint8 pixels (H, W, 3) into a float32 tensor (3, H, W) in [0, 1].
    """
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float().div(255.0)
