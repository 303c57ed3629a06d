"""
Saves and loads the artifacts of the two-step training: detection checkpoints, re-ID tail
checkpoints, standalone extractor checkpoints and feature caches.

Every file is a `torch.save` container holding a `CheckpointHeader` (format, version, kind,
split, configurations and SHA-256 weight checksums) and the tensors grouped by stage name.
Re-ID tail stages are stored under their starred names, so a detection stage and its re-ID
replica never share a key.

Usage:
    ```python
    from PersonSearch.Checkpoint import load_joint, save_detection_checkpoint

    save_detection_checkpoint(model, "runs/abc/checkpoints/detection.pt")
    model = load_joint("runs/abc/checkpoints/detection.pt", "runs/abc/checkpoints/reid.pt")
    ```
"""

import pickle
from pathlib import Path
from typing import Any

import structlog
import torch
from pydantic import ValidationError

from PersonSearch.Exceptions.Model import ModelException
from PersonSearch.Exceptions.Training import StaleCacheException
from PersonSearch.Networks.Model import JointModel, StandaloneExtractor
from PersonSearch.ValidationModels.Checkpoint import (
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    ArtifactKind,
    CheckpointHeader,
)
from PersonSearch.ValidationModels.DataModel import BoundingBox
from PersonSearch.ValidationModels.Pipeline import FeatureCache

logger = structlog.get_logger()


def _write(path: str | Path, header: CheckpointHeader, payload: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"header": header.model_dump(mode="json"), **payload}, path)
    logger.info(f"Saved {header.kind} artifact to {path}.")
    return path


def _read(path: str | Path, kind: ArtifactKind) -> tuple[CheckpointHeader, dict[str, Any]]:
    """
    Loads a container and validates its header.

    Raises:
        PersonSearch.Exceptions.Model.ModelException: If the file is missing, unreadable, of
            another format, of a newer version or of another kind.
    """
    path = Path(path)
    if not path.is_file():
        logger.error(f"Missing {kind} artifact: {path}")
        raise ModelException(f"Missing {kind} artifact: {path}")
    try:
        container = torch.load(path, map_location="cpu", weights_only=True)
        header = CheckpointHeader.model_validate(container["header"])
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError, KeyError, TypeError, ValidationError) as load_error:
        logger.error(f"Cannot read {kind} artifact {path}: {load_error}")
        raise ModelException(f"Cannot read {kind} artifact {path}: {load_error}") from load_error
    if header.format != CHECKPOINT_FORMAT or header.version > CHECKPOINT_VERSION:
        logger.error(f"{path}: unsupported container {header.format} v{header.version}")
        raise ModelException(f"{path}: unsupported container {header.format} v{header.version}")
    if header.kind != kind:
        logger.error(f"{path} holds a {header.kind} artifact, expected {kind}.")
        raise ModelException(f"{path} holds a {header.kind} artifact, expected {kind}.")
    return header, container


def _grouped(modules: dict[str, torch.nn.Module]) -> dict[str, dict[str, torch.Tensor]]:
    return {name: dict(module.state_dict()) for name, module in modules.items()}


def _detection_groups(model: JointModel) -> dict[str, torch.nn.Module]:
    return {**dict(model.backbone.stages.items()), "head": model.head}


def _reid_groups(model: JointModel) -> dict[str, torch.nn.Module]:
    return {**dict(model.reid.tail.stages.items()), "projection": model.reid.head}


def _load_groups(modules: dict[str, torch.nn.Module], state: dict[str, dict[str, torch.Tensor]], path: Path) -> None:
    missing = sorted(set(modules) - set(state))
    if missing:
        logger.error(f"{path} lacks weight groups {missing}.")
        raise ModelException(f"{path} lacks weight groups {missing}.")
    for name, module in modules.items():
        try:
            module.load_state_dict(state[name])
        except RuntimeError as shape_error:
            logger.error(f"{path}: group {name} does not fit the model: {shape_error}")
            raise ModelException(f"{path}: group {name} does not fit the model: {shape_error}") from shape_error


def save_detection_checkpoint(model: JointModel, path: str | Path) -> Path:
    """
    Writes the backbone stages C1..C5 and the detection head.
    """
    header = CheckpointHeader(
        kind=ArtifactKind.detection,
        split=model.split,
        backbone=model.backbone_config,
        detect=model.detect_config,
        reid=model.reid_config,
        seed=model.seed,
        checksums={"shared": model.shared_checksum(), "detection": model.detection_checksum()},
    )
    return _write(path, header, {"state": _grouped(_detection_groups(model))})


def load_detection_checkpoint(path: str | Path) -> JointModel:
    """
    Rebuilds a joint model from a detection checkpoint; its re-ID branch keeps its seeded
    initialization.

    Raises:
        PersonSearch.Exceptions.Model.ModelException: If the file is invalid or its weights
            do not match the recorded checksum.
    """
    header, container = _read(path, ArtifactKind.detection)
    model = JointModel(header.split, header.backbone, header.detect, header.reid, header.seed)
    _load_groups(_detection_groups(model), container["state"], Path(path))
    if model.detection_checksum() != header.checksums.get("detection"):
        logger.error(f"{path}: detection weights do not match their checksum.")
        raise ModelException(f"{path}: detection weights do not match their checksum.")
    logger.info(f"Loaded detection checkpoint {path} ({header.split.variant}).")
    return model


def save_reid_checkpoint(model: JointModel, path: str | Path) -> Path:
    """
    Writes the starred tail stages and the projection, recording the shared-weight checksum
    they were trained against.
    """
    header = CheckpointHeader(
        kind=ArtifactKind.reid,
        split=model.split,
        backbone=model.backbone_config,
        detect=model.detect_config,
        reid=model.reid_config,
        seed=model.seed,
        checksums={"shared": model.shared_checksum(), "reid": model.reid_checksum()},
    )
    return _write(path, header, {"state": _grouped(_reid_groups(model))})


def load_joint(detection_path: str | Path, reid_path: str | Path) -> JointModel:
    """
    Assembles a trained joint model from its two checkpoints.

    Raises:
        PersonSearch.Exceptions.Model.ModelException: If either file is invalid or the splits
            differ.
        PersonSearch.Exceptions.Training.StaleCacheException: If the re-ID weights were
            trained on another detection checkpoint's shared maps.
    """
    model = load_detection_checkpoint(detection_path)
    header, container = _read(reid_path, ArtifactKind.reid)
    if header.split != model.split:
        logger.error(f"Re-ID checkpoint split {header.split.variant} differs from {model.split.variant}.")
        raise ModelException(f"Re-ID checkpoint split {header.split.variant} differs from {model.split.variant}.")
    if header.checksums.get("shared") != model.shared_checksum():
        logger.error(f"{reid_path} was trained against other shared weights.")
        raise StaleCacheException(f"{reid_path} was trained against other shared weights.")
    _load_groups(_reid_groups(model), container["state"], Path(reid_path))
    return model


def save_standalone_checkpoint(extractor: StandaloneExtractor, path: str | Path) -> Path:
    header = CheckpointHeader(
        kind=ArtifactKind.standalone,
        backbone=extractor.backbone_config,
        reid=extractor.reid_config,
        seed=extractor.seed,
        checksums={"standalone": extractor.checksum()},
    )
    groups = {**dict(extractor.backbone.stages.items()), "projection": extractor.head}
    return _write(path, header, {"state": _grouped(groups)})


def load_standalone_checkpoint(path: str | Path) -> StandaloneExtractor:
    header, container = _read(path, ArtifactKind.standalone)
    extractor = StandaloneExtractor(header.backbone, header.reid, header.seed)
    groups = {**dict(extractor.backbone.stages.items()), "projection": extractor.head}
    _load_groups(groups, container["state"], Path(path))
    return extractor


def save_cache(cache: FeatureCache, path: str | Path) -> Path:
    header = CheckpointHeader(
        kind=ArtifactKind.cache,
        split=cache.split,
        checksums={"shared": cache.shared_checksum},
    )
    payload = {
        "features": cache.features,
        "identities": list(cache.identities),
        "image_refs": list(cache.image_refs),
        "boxes": [list(box.as_tuple()) for box in cache.boxes],
    }
    return _write(path, header, payload)


def load_cache(path: str | Path) -> FeatureCache:
    """
    Reads a feature cache.

    Raises:
        PersonSearch.Exceptions.Model.ModelException: If the file is missing or invalid.
    """
    header, container = _read(path, ArtifactKind.cache)
    try:
        return FeatureCache(
            features=container["features"],
            identities=tuple(container["identities"]),
            image_refs=tuple(container["image_refs"]),
            boxes=tuple(BoundingBox.from_sequence(box) for box in container["boxes"]),
            split=header.split,
            shared_checksum=header.checksums["shared"],
        )
    except (KeyError, ValidationError) as cache_error:
        logger.error(f"{path}: invalid cache: {cache_error}")
        raise ModelException(f"{path}: invalid cache: {cache_error}") from cache_error
