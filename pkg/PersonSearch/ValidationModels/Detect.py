"""
Defines the models of the single-shot detection head: anchor sets, focal-loss and head
configuration, and scored detections.
"""

from typing import Self

import torch
from pydantic import Field, model_validator

from PersonSearch.ValidationModels.BaseModels import (
    ConfigModel,
    FrozenModel,
    TensorModel,
)
from PersonSearch.ValidationModels.DataModel import BoundingBox


class FocalConfig(ConfigModel):
    """
    Parameters of the focal loss.

    Attributes:
        alpha (float): Weight of every anchor, in (0, 1].
        gamma (float): Focusing exponent.
        class_balanced (bool): Weight positives by `alpha` and negatives by `1 - alpha`
            instead of every anchor by `alpha`.
    """

    alpha: float = Field(default=0.25, gt=0.0, le=1.0)
    gamma: float = Field(default=2.0, ge=0.0)
    class_balanced: bool = False


class DetectConfig(ConfigModel):
    """
    Configuration of the detection head, its anchors, its training targets and its decoder.

    Attributes:
        scales (tuple[float, ...]): Anchor sizes as multiples of the feature stride.
        ratios (tuple[float, ...]): Anchor aspect ratios (height / width).
        head_width (int): Channels of the classification and regression subnets.
        head_depth (int): Hidden convolutions per subnet.
        prior (float): Initial foreground probability of the classifier.
        pos_thresh (float): IoU at or above which an anchor is positive.
        neg_thresh (float): IoU below which an anchor is negative.
        focal (FocalConfig): Focal-loss parameters.
        score_thresh (float): Minimum score kept by the decoder.
        nms_iou (float): IoU above which NMS suppresses a lower-scored box.
        max_per_image (int | None): Cap on decoded detections; None keeps every survivor.
    """

    scales: tuple[float, ...] = (1.0, 1.26, 1.59)
    ratios: tuple[float, ...] = (2.0, 2.5, 3.0)
    head_width: int = Field(default=64, gt=0)
    head_depth: int = Field(default=2, ge=0)
    prior: float = Field(default=0.01, gt=0.0, lt=1.0)
    pos_thresh: float = Field(default=0.5, gt=0.0, le=1.0)
    neg_thresh: float = Field(default=0.4, ge=0.0, lt=1.0)
    focal: FocalConfig = FocalConfig()
    score_thresh: float = Field(default=0.05, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.5, gt=0.0, le=1.0)
    max_per_image: int | None = Field(default=100, gt=0)

    @model_validator(mode="after")
    def validate_thresholds(self) -> Self:
        if self.pos_thresh <= self.neg_thresh:
            raise ValueError(
                f"pos_thresh ({self.pos_thresh}) must exceed neg_thresh ({self.neg_thresh})."
            )
        if not self.scales or not self.ratios:
            raise ValueError("Anchor scales and ratios must be non-empty.")
        if any(value <= 0 for value in (*self.scales, *self.ratios)):
            raise ValueError("Anchor scales and ratios must be positive.")
        return self

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


class AnchorSet(TensorModel):
    """
    Anchors tiling a feature map.

    Attributes:
        boxes (torch.Tensor): Tensor of shape (map_h * map_w * len(scales) * len(ratios), 4),
            ordered row-major over cells, then by scale, then by ratio.
        map_h (int): Feature-map height.
        map_w (int): Feature-map width.
        stride (int): Feature-map stride in pixels.
        scales (tuple[float, ...]): Anchor scales.
        ratios (tuple[float, ...]): Anchor aspect ratios.
    """

    boxes: torch.Tensor
    map_h: int = Field(gt=0)
    map_w: int = Field(gt=0)
    stride: int = Field(gt=0)
    scales: tuple[float, ...]
    ratios: tuple[float, ...]

    @model_validator(mode="after")
    def validate_count(self) -> Self:
        expected = self.map_h * self.map_w * len(self.scales) * len(self.ratios)
        if tuple(self.boxes.shape) != (expected, 4):
            raise ValueError(
                f"Anchor tensor of shape {tuple(self.boxes.shape)} does not hold {expected} boxes."
            )
        return self

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


class Detection(FrozenModel):
    """
    A scored person box.

    Attributes:
        box (BoundingBox): The decoded box, in image pixels.
        score (float): Confidence in [0, 1].
        image_ref (str): The image the box was detected in.
    """

    box: BoundingBox
    score: float = Field(ge=0.0, le=1.0, allow_inf_nan=False)
    image_ref: str = ""
