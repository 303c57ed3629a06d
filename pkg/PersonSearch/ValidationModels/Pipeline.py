"""
Defines the models of the two-step training pipeline: learning-rate schedules, per-step
optimizer settings, the training configuration, the pooled-feature cache and the loss
bookkeeping records.

Defaults are the full-scale settings (640 px images, batches of 10, momentum
SGD at 1e-3 for 90 epochs, then Adam at 1e-4 for 350 semi-hard and 350 batch-hard epochs
over P=32 x K=4 batches). `TrainConfig.desk()` returns the scaled-down preset used by the
tests and the bundled `configs/desk.yaml`.
"""

from enum import StrEnum
from typing import Self

import torch
from pydantic import Field, computed_field, model_validator

from PersonSearch.ValidationModels.Backbone import SplitConfig
from PersonSearch.ValidationModels.BaseModels import (
    ConfigModel,
    FrozenModel,
    TensorModel,
)
from PersonSearch.ValidationModels.DataModel import BoundingBox
from PersonSearch.ValidationModels.Reid import PKConfig, TripletConfig


class OptimizerKind(StrEnum):
    """
    Enumeration of the optimizers used by the two training steps.
    """

    sgd = "sgd"
    adam = "adam"


class TripletPhase(StrEnum):
    """
    Enumeration of the re-ID loss phases, in training order.
    """

    semi_hard = "semi-hard"
    batch_hard = "batch-hard"


class ScheduleConfig(ConfigModel):
    """
    A linear-warmup, linear-cosine-decay schedule.

    Attributes:
        base_lr (float): Peak learning rate, reached at the end of warmup.
        warmup_steps (int): Steps of linear warmup from 0.
        total_steps (int): Step at which the rate reaches 0.
    """

    base_lr: float = Field(gt=0.0)
    warmup_steps: int = Field(ge=0)
    total_steps: int = Field(gt=0)

    @model_validator(mode="after")
    def validate_steps(self) -> Self:
        if self.warmup_steps >= self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})."
            )
        return self


class DetectionStepConfig(ConfigModel):
    """
    Settings of the first training step (detection branch).
    """

    epochs: int = Field(default=90, gt=0)
    batch_size: int = Field(default=10, gt=0)
    optimizer: OptimizerKind = OptimizerKind.sgd
    base_lr: float = Field(default=1e-3, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    grad_clip: float | None = Field(default=10.0, gt=0.0)


class ReidStepConfig(ConfigModel):
    """
    Settings of the second training step (re-ID branch on cached features).
    The same settings drive the standalone extractor of the disjoint baseline.
    """

    semi_hard_epochs: int = Field(default=350, ge=0)
    batch_hard_epochs: int = Field(default=350, ge=0)
    optimizer: OptimizerKind = OptimizerKind.adam
    base_lr: float = Field(default=1e-4, gt=0.0)
    pk: PKConfig = PKConfig()
    triplet: TripletConfig = TripletConfig()

    @model_validator(mode="after")
    def validate_epochs(self) -> Self:
        if self.semi_hard_epochs + self.batch_hard_epochs == 0:
            raise ValueError("At least one re-ID epoch is required.")
        return self

    def phases(self) -> list[tuple[TripletPhase, int]]:
        """
        Returns the non-empty loss phases with their epoch counts, in training order.
        """
        return [
            (phase, epochs)
            for phase, epochs in (
                (TripletPhase.semi_hard, self.semi_hard_epochs),
                (TripletPhase.batch_hard, self.batch_hard_epochs),
            )
            if epochs > 0
        ]


class TrainConfig(ConfigModel):
    """
    Complete configuration of the two-step training.

    Attributes:
        image_size (int): Side of the square canvas training images are padded onto.
        detection (DetectionStepConfig): Step-one settings.
        reid (ReidStepConfig): Step-two settings.
        warmup_fraction (float): Share of each schedule spent in linear warmup.
        seed (int): Seed of weight initialization and data order.
        threads (int | None): Intra-op thread count pinned during training; None keeps torch's.
    """

    image_size: int = Field(default=640, ge=32)
    detection: DetectionStepConfig = DetectionStepConfig()
    reid: ReidStepConfig = ReidStepConfig()
    warmup_fraction: float = Field(default=0.05, ge=0.0, lt=1.0)
    seed: int = 0
    threads: int | None = Field(default=1, gt=0)

    def schedule(self, base_lr: float, total_steps: int) -> ScheduleConfig:
        """
        Builds the schedule of a phase lasting `total_steps` optimizer steps.
        """
        warmup = min(int(round(self.warmup_fraction * total_steps)), total_steps - 1)
        return ScheduleConfig(
            base_lr=base_lr, warmup_steps=max(warmup, 0), total_steps=total_steps
        )

    @classmethod
    def desk(cls) -> "TrainConfig":
        """
        The desk-scale preset: 256 px scenes, tens of epochs, P=16 x K=4 batches.
        """
        return cls(
            image_size=256,
            detection=DetectionStepConfig(epochs=30, batch_size=8, base_lr=1e-2),
            reid=ReidStepConfig(
                semi_hard_epochs=40,
                batch_hard_epochs=40,
                base_lr=1e-3,
                pk=PKConfig(P=16, K=4),
            ),
        )


class FeatureCache(TensorModel):
    """
    Pooled features of every identity-labeled ground-truth box, computed from frozen
    shared maps. The input of the second training step.

    Attributes:
        features (torch.Tensor): Tensor of shape (N, channels, pool_h, pool_w).
        identities (tuple[str, ...]): Identity of each entry.
        image_refs (tuple[str, ...]): Source image of each entry.
        boxes (tuple[BoundingBox, ...]): Source box of each entry.
        split (SplitConfig): Split under which the maps were computed.
        shared_checksum (str): Checksum of the shared weights that produced the maps.
    """

    features: torch.Tensor
    identities: tuple[str, ...]
    image_refs: tuple[str, ...]
    boxes: tuple[BoundingBox, ...]
    split: SplitConfig
    shared_checksum: str

    @model_validator(mode="after")
    def validate_lengths(self) -> Self:
        count = int(self.features.shape[0]) if self.features.dim() == 4 else -1
        if count < 0 or not (
            count == len(self.identities) == len(self.image_refs) == len(self.boxes)
        ):
            raise ValueError(
                f"Cache columns disagree: features {tuple(self.features.shape)}, "
                f"{len(self.identities)} identities, {len(self.image_refs)} refs, {len(self.boxes)} boxes."
            )
        return self

    def __len__(self) -> int:
        return len(self.identities)


class TrainingObjective(FrozenModel):
    """
    Loss bookkeeping. L = L_det + L_reid is reported; the two terms are optimized in
    separate steps.
    """

    focal: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    regression: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    reid: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)

    @computed_field
    @property
    def detection(self) -> float:
        return self.focal + self.regression

    @computed_field
    @property
    def total(self) -> float:
        return self.detection + self.reid


class EpochLog(FrozenModel):
    """
    One line of the per-epoch metrics log.
    """

    step: str
    phase: str
    epoch: int = Field(ge=0)
    objective: TrainingObjective
    lr: float = Field(ge=0.0)
