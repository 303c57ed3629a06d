"""
Defines the models of the person-search evaluation protocols: query cases, protocol reports
and boxes-per-image sweeps.
"""

from enum import StrEnum
from typing import Self

from pydantic import Field, model_validator

from PersonSearch.ValidationModels.BaseModels import FrozenModel, RecordModel
from PersonSearch.ValidationModels.DataModel import BoundingBox


class ProtocolKind(StrEnum):
    """
    Enumeration of the evaluation protocols.

    Attributes:
        gallery (str): Galleries of increasing size (CUHK-SYSU style).
        boxes_per_image (str): Fixed full gallery, detections capped per image (PRW style).
    """

    gallery = "gallery"
    boxes_per_image = "boxes-per-image"


class EvalMode(StrEnum):
    """
    Enumeration of the gallery box sources.
    """

    detected = "detected"
    gt_injected = "gt-injected"


class QueryCase(FrozenModel):
    """
    One probe and the gallery it is searched in.

    Attributes:
        probe_image_ref (str): Image holding the probe.
        probe_index (int): Annotation index of the probe box inside its image.
        probe_box (BoundingBox): The probe box.
        identity (str): Identity of the probe.
        gallery (tuple[str, ...]): Gallery image refs, in manifest order.
        targets (dict[str, tuple[BoundingBox, ...]]): Ground-truth boxes of the probe
            identity in each gallery image that contains it.
    """

    probe_image_ref: str
    probe_index: int = Field(ge=0)
    probe_box: BoundingBox
    identity: str
    gallery: tuple[str, ...]
    targets: dict[str, tuple[BoundingBox, ...]]

    @model_validator(mode="after")
    def validate_gallery(self) -> Self:
        if self.probe_image_ref in self.gallery:
            raise ValueError(f"Probe image {self.probe_image_ref!r} is in its own gallery.")
        if not set(self.targets) <= set(self.gallery):
            raise ValueError("Every target image must belong to the gallery.")
        if not self.targets:
            raise ValueError(f"Gallery holds no other occurrence of {self.identity!r}.")
        return self

    @property
    def positive_count(self) -> int:
        return sum(len(boxes) for boxes in self.targets.values())


class GalleryCases(FrozenModel):
    """
    Nested query cases for several gallery sizes.

    Attributes:
        cases (dict[int, tuple[QueryCase, ...]]): Query cases per gallery size; the i-th
            case of every size shares its probe.
        skipped_identities (int): Identities occurring in a single image, hence not queried.
    """

    cases: dict[int, tuple[QueryCase, ...]]
    skipped_identities: int = Field(default=0, ge=0)


class ProtocolReport(RecordModel):
    """
    Scores of one protocol at one parameter value.

    Attributes:
        protocol (ProtocolKind): The protocol.
        parameter (int | None): Gallery size, or boxes per image (None means uncapped).
        mAP (float): Mean average precision over queries.
        rank1 (float): Share of queries whose top-ranked box is a true match.
        detection_ap (float | None): Detection AP of the gallery boxes; None when GT-injected.
        num_queries (int): Number of scored queries.
        num_gallery_images (int): Largest gallery size actually used.
        mode (EvalMode): Source of the gallery boxes.
        dataset (str): Name of the evaluated manifest.
        model (str): Label of the evaluated model.
    """

    protocol: ProtocolKind
    parameter: int | None = None
    mAP: float = Field(ge=0.0, le=1.0)
    rank1: float = Field(ge=0.0, le=1.0)
    detection_ap: float | None = Field(default=None, ge=0.0, le=1.0)
    num_queries: int = Field(ge=0)
    num_gallery_images: int = Field(ge=0)
    mode: EvalMode = EvalMode.detected
    dataset: str = ""
    model: str = ""

    @property
    def parameter_label(self) -> str:
        return "all" if self.parameter is None else str(self.parameter)


class ProtocolSweep(FrozenModel):
    """
    A boxes-per-image sweep: one report per cap and the best one by mAP.
    """

    reports: tuple[ProtocolReport, ...]
    best: ProtocolReport
