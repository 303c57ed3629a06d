"""
Defines the stage topology of the staged feature extractor and the split configurations
that divide it between the shared trunk and the replicated re-ID tail.

The extractor has five stages, C1 (first convolution) to C5, each halving the spatial
resolution. A split variant names the last shared stage: J2 shares C1-C2, J3 shares C1-C3
and J4 shares C1-C4. The re-ID branch replicates the remaining stages under starred names
(`C3*`, `C4*`, `C5*`) so detection and re-ID weights never alias.
"""

import math
from enum import StrEnum
from typing import Self

import torch
from pydantic import Field, model_validator

from PersonSearch.ValidationModels.BaseModels import (
    ConfigModel,
    FrozenModel,
    TensorModel,
)


class StageName(StrEnum):
    """
    Enumeration of the backbone stages, in forward order.
    """

    C1 = "C1"
    C2 = "C2"
    C3 = "C3"
    C4 = "C4"
    C5 = "C5"


STAGE_ORDER: tuple[StageName, ...] = tuple(StageName)


class SplitVariant(StrEnum):
    """
    Enumeration of the joint-model variants, named after their last shared stage.
    """

    J2 = "J2"
    J3 = "J3"
    J4 = "J4"


def starred(stage: StageName) -> str:
    """
    Returns the name under which the re-ID replica of `stage` is stored.
    """
    return f"{stage.value}*"


class StageSpec(FrozenModel):
    """
    Static description of one stage.

    Attributes:
        name (StageName): The stage name.
        stride (int): Spatial stride of the stage output w.r.t. the input image.
        channels (int): Output channel width.
    """

    name: StageName
    stride: int = Field(gt=0)
    channels: int = Field(gt=0)

    @model_validator(mode="after")
    def validate_stride(self) -> Self:
        if self.stride & (self.stride - 1):
            raise ValueError(f"Stride {self.stride} of {self.name} is not a power of two.")
        return self


class SplitConfig(FrozenModel):
    """
    The partition of the stages between the shared trunk and the re-ID tail.

    Attributes:
        variant (SplitVariant): The variant name.
        shared_stages (tuple[StageName, ...]): Prefix of C1..C5 computed once per image.
        reid_tail_stages (tuple[str, ...]): Starred names of the replicated stages, through C5*.
    """

    variant: SplitVariant
    shared_stages: tuple[StageName, ...]
    reid_tail_stages: tuple[str, ...]

    @model_validator(mode="after")
    def validate_partition(self) -> Self:
        """
        Checks that the shared stages are a prefix of C1..C5 and that the tail replicates
        exactly the remaining stages, so C1..C5 is covered once on the re-ID path.
        """
        count = len(self.shared_stages)
        if count == 0 or self.shared_stages != STAGE_ORDER[:count]:
            raise ValueError(
                f"Shared stages {list(self.shared_stages)} are not a prefix of C1..C5."
            )
        expected = tuple(starred(stage) for stage in STAGE_ORDER[count:])
        if self.reid_tail_stages != expected:
            raise ValueError(
                f"Tail stages {list(self.reid_tail_stages)} must be {list(expected)}."
            )
        return self

    @property
    def last_shared(self) -> StageName:
        return self.shared_stages[-1]

    @property
    def tail_sources(self) -> tuple[StageName, ...]:
        """
        The detection-path stages replicated by the tail.
        """
        return STAGE_ORDER[len(self.shared_stages) :]


class BackboneConfig(ConfigModel):
    """
    Width and layer options of the desk-scale extractor.

    Attributes:
        widths (tuple[int, int, int, int, int]): Output channels of C1..C5.
        norm (bool): Whether stages use group normalization.
        bias (bool): Whether convolutions carry a bias.
        groups (int): Group count of the group normalization.
    """

    widths: tuple[int, int, int, int, int] = (8, 16, 32, 48, 64)
    norm: bool = True
    bias: bool = True
    groups: int = Field(default=4, gt=0)

    @model_validator(mode="after")
    def validate_widths(self) -> Self:
        if any(width <= 0 for width in self.widths):
            raise ValueError(f"Stage widths must be positive, got {self.widths}.")
        if self.norm and any(width % self.groups for width in self.widths):
            raise ValueError(
                f"Stage widths {self.widths} must be multiples of the {self.groups} norm groups."
            )
        return self

    def stage_specs(self) -> tuple[StageSpec, ...]:
        """
        Returns the stage table: stride doubles at every stage, starting at 2 for C1.
        """
        return tuple(
            StageSpec(name=name, stride=2 ** (index + 1), channels=width)
            for index, (name, width) in enumerate(zip(STAGE_ORDER, self.widths))
        )

    def spec(self, stage: StageName) -> StageSpec:
        return self.stage_specs()[STAGE_ORDER.index(stage)]

    @property
    def total_stride(self) -> int:
        return self.stage_specs()[-1].stride


class SharedMaps(TensorModel):
    """
    Feature maps of the last shared stage for one image.

    Attributes:
        features (torch.Tensor): Tensor of shape (channels, H', W').
        stage (StageName): The stage that produced the maps.
        stride (int): Stride of `stage` w.r.t. the image.
        image_height (int): Source image height.
        image_width (int): Source image width.
    """

    features: torch.Tensor
    stage: StageName
    stride: int = Field(gt=0)
    image_height: int = Field(gt=0)
    image_width: int = Field(gt=0)

    @model_validator(mode="after")
    def validate_shape(self) -> Self:
        expected = (
            math.ceil(self.image_height / self.stride),
            math.ceil(self.image_width / self.stride),
        )
        if self.features.dim() != 3 or tuple(self.features.shape[1:]) != expected:
            raise ValueError(
                f"Maps of shape {tuple(self.features.shape)} do not match the stride-{self.stride} "
                f"grid {expected} of a {self.image_height}x{self.image_width} image."
            )
        return self
