"""
Provides the two-step training of the joint model and the training of the standalone
extractor used by the disjoint baseline.

Step one trains the backbone and detection head on detection-only data with momentum SGD.
The shared maps of every identity-labeled box are then pooled once into a `FeatureCache`,
and step two trains the re-ID branch on that cache with Adam, first with the semi-hard and
then with the batch-hard triplet loss. The detection weights are frozen during step two and
their checksum is compared before and after.

Usage:
    ```python
    from PersonSearch.Training import build_feature_cache, train_detection, train_reid

    model, _ = train_detection([detection_manifest], split, config, store)
    cache = build_feature_cache(model, reid_manifest, split, store)
    model, history = train_reid(model, cache, split, config)
    ```
"""

import math
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Hashable, Iterator, Sequence

import numpy as np
import orjson
import structlog
import torch
from cytoolz import groupby, partition_all
from torch import nn

from PersonSearch.Dataset import ImageStore, merge_manifests
from PersonSearch.Exceptions.Training import StaleCacheException, TrainingException
from PersonSearch.Networks.Detection import detection_loss
from PersonSearch.Networks.Model import JointModel, StandaloneExtractor
from PersonSearch.Networks.Reid import (
    batch_hard_triplet,
    pk_sample_indices,
    roi_pool_boxes,
    semi_hard_triplet,
)
from PersonSearch.ValidationModels.Backbone import BackboneConfig, SplitConfig
from PersonSearch.ValidationModels.DataModel import DatasetManifest, MergeMode
from PersonSearch.ValidationModels.Detect import DetectConfig
from PersonSearch.ValidationModels.Pipeline import (
    EpochLog,
    FeatureCache,
    ScheduleConfig,
    TrainConfig,
    TrainingObjective,
    TripletPhase,
)
from PersonSearch.ValidationModels.Reid import ReidConfig, TripletConfig

logger = structlog.get_logger()

TripletLoss = Callable[[torch.Tensor, Sequence[Hashable], TripletConfig], torch.Tensor]

_TRIPLET_LOSSES: dict[TripletPhase, TripletLoss] = {
    TripletPhase.semi_hard: semi_hard_triplet,
    TripletPhase.batch_hard: batch_hard_triplet,
}


def lr_schedule(step: int, cfg: ScheduleConfig) -> float:
    """
    Linear warmup followed by linear-cosine decay.

    During warmup the rate grows linearly from 0 to `base_lr`. Afterwards it is
    `base_lr * (1 - p) * (1 + cos(pi * p)) / 2` with `p = (step - warmup) / (total - warmup)`,
    reaching 0 at `total_steps`.

    Raises:
        PersonSearch.Exceptions.Training.TrainingException: If `step` is outside [0, total].
    """
    if not 0 <= step <= cfg.total_steps:
        raise TrainingException(f"Step {step} is outside the schedule [0, {cfg.total_steps}].")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * (1.0 - progress) * 0.5 * (1.0 + math.cos(math.pi * progress))


def schedule_factor(cfg: ScheduleConfig) -> Callable[[int], float]:
    """
    The `LambdaLR` multiplier of `cfg`. The optimizer's `k`-th update uses schedule step
    `k + 1`, so the first update already moves the weights.
    """
    return lambda index: lr_schedule(min(index + 1, cfg.total_steps), cfg) / cfg.base_lr


def append_metrics(path: str | Path | None, log: EpochLog) -> None:
    """
    Appends one JSON line to the metrics log; no-op when `path` is None.
    """
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("ab") as handle:
        handle.write(orjson.dumps(log.model_dump(mode="json"), option=orjson.OPT_APPEND_NEWLINE))


@contextmanager
def pinned_threads(threads: int | None) -> Iterator[None]:
    """
    Pins torch's intra-op thread count for the duration of the block.
    """
    if threads is None:
        yield
        return
    previous = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def pad_to_canvas(image: torch.Tensor, size: int) -> torch.Tensor:
    """
    Places an image (3, H, W) at the top-left of a black `size x size` canvas.

    Raises:
        PersonSearch.Exceptions.Training.TrainingException: If the image exceeds the canvas.
    """
    _, height, width = image.shape
    if height > size or width > size:
        logger.error(f"Image {height}x{width} exceeds the {size}x{size} training canvas.")
        raise TrainingException(f"Image {height}x{width} exceeds the {size}x{size} training canvas.")
    canvas = image.new_zeros((3, size, size))
    canvas[:, :height, :width] = image
    return canvas


def _check_finite(loss: torch.Tensor, step_name: str, step: int) -> None:
    if not torch.isfinite(loss):
        logger.error(f"{step_name} loss diverged at step {step}: {loss.item()}")
        raise TrainingException(f"{step_name} loss diverged at step {step}: {loss.item()}")


def train_detection(
    manifests: Sequence[DatasetManifest],
    split: SplitConfig,
    cfg: TrainConfig,
    store: ImageStore,
    backbone: BackboneConfig = BackboneConfig(),
    detect: DetectConfig = DetectConfig(),
    reid: ReidConfig = ReidConfig(),
    metrics_path: str | Path | None = None,
) -> tuple[JointModel, list[EpochLog]]:
    """
    Step one: trains the backbone and the detection head on detection data only.

    The manifests are merged in detection-only mode, images are padded onto the training
    canvas and the detection loss is minimized by momentum SGD under the warmup/cosine
    schedule, for a fixed number of epochs. Data order and initialization derive from `cfg.seed`.

    Args:
        manifests (Sequence[DatasetManifest]): Detection training data; identities are ignored.
        split (SplitConfig): Split of the joint model being built.
        cfg (TrainConfig): Training configuration.
        store (ImageStore): Image source.
        backbone (BackboneConfig): Stage widths.
        detect (DetectConfig): Detection head configuration.
        reid (ReidConfig): Re-ID branch configuration, carried by the model.
        metrics_path (str | Path | None): Line-delimited metrics log to append to.

    Returns:
        tuple[JointModel, list[EpochLog]]: The trained model and its per-epoch losses.

    Raises:
        PersonSearch.Exceptions.Training.TrainingException: If the merged data is empty or the
            loss becomes NaN or infinite.
    """
    merged = merge_manifests(manifests, MergeMode.detection_only) if manifests else None
    if merged is None or not merged.records:
        logger.error("Detection training needs at least one scene.")
        raise TrainingException("Detection training needs at least one scene.")

    step_cfg = cfg.detection
    canvases = [pad_to_canvas(store.load(record.image_ref), cfg.image_size) for record in merged.records]
    targets = [record.boxes for record in merged.records]
    map_size = math.ceil(cfg.image_size / backbone.total_stride)

    with pinned_threads(cfg.threads):
        model = JointModel(split, backbone, detect, reid, seed=cfg.seed)
        anchors = model.anchors(map_size, map_size)
        steps_per_epoch = math.ceil(len(canvases) / step_cfg.batch_size)
        schedule = cfg.schedule(step_cfg.base_lr, step_cfg.epochs * steps_per_epoch)
        optimizer = torch.optim.SGD(
            model.detection_parameters(),
            lr=step_cfg.base_lr,
            momentum=step_cfg.momentum,
            weight_decay=step_cfg.weight_decay,
        )
        scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, schedule_factor(schedule))
        rng = np.random.default_rng(cfg.seed)
        history: list[EpochLog] = []
        step = 0
        model.train()
        for epoch in range(step_cfg.epochs):
            focal_sum, regression_sum, batches = 0.0, 0.0, 0
            for batch in partition_all(step_cfg.batch_size, rng.permutation(len(canvases)).tolist()):
                logits, deltas = model.detect_batch(torch.stack([canvases[index] for index in batch]))
                terms = [
                    detection_loss(logits[row], deltas[row], anchors, targets[index], detect)
                    for row, index in enumerate(batch)
                ]
                focal = torch.stack([term[0] for term in terms]).mean()
                regression = torch.stack([term[1] for term in terms]).mean()
                loss = focal + regression
                _check_finite(loss, "Detection", step)

                optimizer.zero_grad()
                loss.backward()
                if step_cfg.grad_clip is not None:
                    nn.utils.clip_grad_norm_(model.detection_parameters(), step_cfg.grad_clip)
                optimizer.step()
                scheduler.step()
                step += 1
                focal_sum += focal.item()
                regression_sum += regression.item()
                batches += 1

            log = EpochLog(
                step="detection",
                phase="detection",
                epoch=epoch,
                objective=TrainingObjective(focal=focal_sum / batches, regression=regression_sum / batches),
                lr=scheduler.get_last_lr()[0],
            )
            history.append(log)
            append_metrics(metrics_path, log)
            logger.info(
                f"detection epoch {epoch + 1}/{step_cfg.epochs}: "
                f"focal {log.objective.focal:.4f}, regression {log.objective.regression:.4f}"
            )
        model.eval()
    return model, history


def build_feature_cache(
    model: JointModel,
    manifest: DatasetManifest,
    split: SplitConfig,
    store: ImageStore,
) -> FeatureCache:
    """
    Pools the shared maps of every identity-labeled ground-truth box.

    Each image goes through `forward_shared` on its own, so an entry equals
    `roi_pool(forward_shared(image), box)` recomputed later, bit for bit.

    Raises:
        PersonSearch.Exceptions.Training.TrainingException: If the model was trained under
            another split or the manifest holds no identity-labeled box.
    """
    if model.split != split:
        logger.error(f"Checkpoint split {model.split.variant} does not match {split.variant}.")
        raise TrainingException(f"Checkpoint split {model.split.variant} does not match {split.variant}.")

    pool = (model.reid_config.pool_height, model.reid_config.pool_width)
    features: list[torch.Tensor] = []
    identities: list[str] = []
    image_refs: list[str] = []
    boxes = []
    with torch.no_grad():
        for record in manifest.records:
            labeled = [annotation for annotation in record.annotations if annotation.identity is not None]
            if not labeled:
                continue
            maps = model.backbone.forward_shared(store.load(record.image_ref), split)
            features.append(roi_pool_boxes(maps, [annotation.box for annotation in labeled], *pool))
            identities += [annotation.identity for annotation in labeled]
            image_refs += [record.image_ref] * len(labeled)
            boxes += [annotation.box for annotation in labeled]

    if not identities:
        logger.error(f"Manifest {manifest.name!r} holds no identity-labeled box.")
        raise TrainingException(f"Manifest {manifest.name!r} holds no identity-labeled box.")
    logger.info(f"Cached {len(identities)} pooled boxes of {len(set(identities))} identities.")
    return FeatureCache(
        features=torch.cat(features),
        identities=tuple(identities),
        image_refs=tuple(image_refs),
        boxes=tuple(boxes),
        split=split,
        shared_checksum=model.shared_checksum(),
    )


def _train_triplet_phases(
    module: nn.Module,
    inputs: torch.Tensor,
    identities: Sequence[str],
    cfg: TrainConfig,
    step_name: str,
    metrics_path: str | Path | None,
) -> list[EpochLog]:
    """
    Runs the re-ID loss phases on `module`, which maps `inputs` rows to unit embeddings.

    Every phase gets a fresh Adam state and its own schedule; batches are P x K draws.
    """
    step_cfg = cfg.reid
    groups = groupby(lambda index: identities[index], range(len(identities)))
    steps_per_epoch = max(1, len(identities) // step_cfg.pk.batch_size)
    history: list[EpochLog] = []
    step = 0
    module.train()
    for phase_index, (phase, epochs) in enumerate(step_cfg.phases()):
        rng = np.random.default_rng([cfg.seed, phase_index])
        schedule = cfg.schedule(step_cfg.base_lr, epochs * steps_per_epoch)
        optimizer = torch.optim.Adam(module.parameters(), lr=step_cfg.base_lr)
        scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, schedule_factor(schedule))
        loss_fn = _TRIPLET_LOSSES[phase]
        for epoch in range(epochs):
            loss_sum = 0.0
            for _ in range(steps_per_epoch):
                batch = pk_sample_indices(groups, step_cfg.pk, rng)
                embeddings = module(inputs[[index for index, _ in batch]])
                loss = loss_fn(embeddings, [identity for _, identity in batch], step_cfg.triplet)
                _check_finite(loss, f"{step_name} {phase}", step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()
                step += 1
                loss_sum += loss.item()

            log = EpochLog(
                step=step_name,
                phase=phase.value,
                epoch=epoch,
                objective=TrainingObjective(reid=loss_sum / steps_per_epoch),
                lr=scheduler.get_last_lr()[0],
            )
            history.append(log)
            append_metrics(metrics_path, log)
            logger.info(f"{step_name} {phase} epoch {epoch + 1}/{epochs}: triplet {log.objective.reid:.4f}")
    module.eval()
    return history


def train_reid(
    model: JointModel,
    cache: FeatureCache,
    split: SplitConfig,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
) -> tuple[JointModel, list[EpochLog]]:
    """
    Step two: trains the starred tail and the projection on cached pooled features.

    Only `model.reid` is handed to the optimizer and the detection parameters are frozen,
    so no gradient of the re-ID loss reaches the shared layers.

    Args:
        model (JointModel): The model trained by step one.
        cache (FeatureCache): Pooled features built from that model.
        split (SplitConfig): The split the caller trains.
        cfg (TrainConfig): Training configuration.
        metrics_path (str | Path | None): Line-delimited metrics log to append to.

    Returns:
        tuple[JointModel, list[EpochLog]]: The same model, re-ID branch trained, and its losses.

    Raises:
        PersonSearch.Exceptions.Training.TrainingException: If the splits disagree, a loss
            diverges or the detection weights changed.
        PersonSearch.Exceptions.Training.StaleCacheException: If the cache was built from
            other shared weights.
        PersonSearch.Exceptions.Reid.SamplingException: If the cache holds fewer than P identities.
    """
    if cache.split != split or model.split != split:
        logger.error(
            f"Cache built under {cache.split.variant}, model {model.split.variant}, training requested under {split.variant}."
        )
        raise TrainingException(
            f"Cache built under {cache.split.variant}, model {model.split.variant}, training requested under {split.variant}."
        )
    if cache.shared_checksum != model.shared_checksum():
        logger.error("The feature cache was built from other shared weights; rebuild it.")
        raise StaleCacheException("The feature cache was built from other shared weights; rebuild it.")

    detection_before = model.detection_checksum()
    frozen = model.detection_parameters()
    for parameter in frozen:
        parameter.requires_grad_(False)
    try:
        with pinned_threads(cfg.threads), torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            history = _train_triplet_phases(model.reid, cache.features, cache.identities, cfg, "reid", metrics_path)
    finally:
        for parameter in frozen:
            parameter.requires_grad_(True)

    if model.detection_checksum() != detection_before:
        logger.error("Detection weights changed during re-ID training.")
        raise TrainingException("Detection weights changed during re-ID training.")
    return model, history


def train_standalone_reid(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    store: ImageStore,
    backbone: BackboneConfig = BackboneConfig(),
    reid: ReidConfig = ReidConfig(),
    metrics_path: str | Path | None = None,
) -> tuple[StandaloneExtractor, list[EpochLog]]:
    """
    Trains the disjoint baseline's extractor on resized crops of the identity-labeled boxes,
    with the same loss phases, optimizer and batches as step two.

    Raises:
        PersonSearch.Exceptions.Training.TrainingException: If the manifest holds no
            identity-labeled box or a loss diverges.
    """
    extractor = StandaloneExtractor(backbone, reid, seed=cfg.seed)
    crops: list[torch.Tensor] = []
    identities: list[str] = []
    for record in manifest.records:
        labeled = [annotation for annotation in record.annotations if annotation.identity is not None]
        if not labeled:
            continue
        image = store.load(record.image_ref)
        crops.append(extractor.crops(image, [annotation.box for annotation in labeled]))
        identities += [annotation.identity for annotation in labeled]
    if not identities:
        logger.error(f"Manifest {manifest.name!r} holds no identity-labeled box.")
        raise TrainingException(f"Manifest {manifest.name!r} holds no identity-labeled box.")

    with pinned_threads(cfg.threads):
        history = _train_triplet_phases(extractor, torch.cat(crops), identities, cfg, "standalone", metrics_path)
    extractor.snippets = 0
    return extractor, history
