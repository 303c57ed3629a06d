"""
Provides the staged feature extractor and its replicated re-ID tail.

The detection path always runs C1..C5; a split only moves the point where the re-ID branch
departs. `Backbone.forward_shared` computes the shared prefix once per image and
`Backbone.forward_detection_tail` finishes the detection path from those maps, while a
`ReidTail` holds independent copies (`C3*`, `C4*`, `C5*`) of the stages after the split.

Usage:
    ```python
    from PersonSearch.Networks.Backbone import Backbone, ReidTail, split_config
    from PersonSearch.ValidationModels.Backbone import BackboneConfig, SplitVariant

    config = BackboneConfig()
    split = split_config(SplitVariant.J3)
    backbone = Backbone(config)
    maps = backbone.forward_shared(image, split)  # SharedMaps at stride 8
    tail = ReidTail(config, split)
    ```
"""

from typing import Iterable

import structlog
import torch
from torch import nn

from PersonSearch.Exceptions.Model import ModelException
from PersonSearch.ValidationModels.Backbone import (
    STAGE_ORDER,
    BackboneConfig,
    SharedMaps,
    SplitConfig,
    SplitVariant,
    StageName,
    starred,
)

logger = structlog.get_logger()

_SPLIT_DEPTH: dict[SplitVariant, int] = {
    SplitVariant.J2: 2,
    SplitVariant.J3: 3,
    SplitVariant.J4: 4,
}


def split_config(variant: SplitVariant | str) -> SplitConfig:
    """
    Returns the stage partition of a joint-model variant.

    Args:
        variant (SplitVariant | str): `J2`, `J3` or `J4`.

    Returns:
        SplitConfig: Shared prefix C1..Cn and starred tail C(n+1)*..C5*.

    Raises:
        PersonSearch.Exceptions.Model.ModelException: If the variant is unknown.
    """
    try:
        variant = SplitVariant(variant)
    except ValueError as value_error:
        logger.error(f"Unknown split variant: {variant!r}")
        raise ModelException(f"Unknown split variant: {variant!r}") from value_error
    depth = _SPLIT_DEPTH[variant]
    return SplitConfig(
        variant=variant,
        shared_stages=STAGE_ORDER[:depth],
        reid_tail_stages=tuple(starred(stage) for stage in STAGE_ORDER[depth:]),
    )


def _norm(channels: int, config: BackboneConfig) -> nn.Module:
    return nn.GroupNorm(config.groups, channels) if config.norm else nn.Identity()


class Stage(nn.Module):
    """
    One stride-2 stage.

    C1 is a single 3x3 convolution; later stages are residual blocks whose main path is two
    3x3 convolutions and whose shortcut is a strided 1x1 projection. Every stage maps an
    `H x W` input to `ceil(H / 2) x ceil(W / 2)`.
    """

    def __init__(self, in_channels: int, out_channels: int, config: BackboneConfig, residual: bool) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.residual = residual
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=config.bias)
        self.norm1 = _norm(out_channels, config)
        self.relu = nn.ReLU()
        if residual:
            self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=config.bias)
            self.norm2 = _norm(out_channels, config)
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=2, bias=config.bias),
                _norm(out_channels, config),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.norm1(self.conv1(x)))
        if not self.residual:
            return out
        out = self.norm2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def build_stage(stage: StageName, config: BackboneConfig) -> Stage:
    """
    Builds the stage `stage` of the extractor described by `config`.
    """
    index = STAGE_ORDER.index(stage)
    in_channels = 3 if index == 0 else config.widths[index - 1]
    return Stage(in_channels, config.widths[index], config, residual=index > 0)


def init_weights(module: nn.Module) -> None:
    """
    Fan-in scaled initialization: Kaiming-normal convolutions and linears, zero biases,
    unit group-norm scales.
    """
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(layer.weight, mode="fan_in", nonlinearity="relu")
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)
        elif isinstance(layer, nn.GroupNorm):
            nn.init.ones_(layer.weight)
            nn.init.zeros_(layer.bias)


class Backbone(nn.Module):
    """
    The detection-path extractor C1..C5.

    Attributes:
        config (BackboneConfig): Stage widths and layer options.
        stages (nn.ModuleDict): The five stages, keyed by name.
        shared_calls (int): Images pushed through `forward_shared` so far.
    """

    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        self.config = config
        self.stages = nn.ModuleDict({stage.value: build_stage(stage, config) for stage in STAGE_ORDER})
        self.shared_calls = 0
        init_weights(self)

    def run(self, x: torch.Tensor, stages: Iterable[StageName]) -> torch.Tensor:
        """
        Applies `stages` in order to a batch of shape (B, C, H, W).
        """
        for stage in stages:
            x = self.stages[stage.value](x)
        return x

    def _check_image(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ModelException(f"Expected images of shape (B, 3, H, W), got {tuple(images.shape)}.")
        height, width = images.shape[-2:]
        if height < self.config.total_stride or width < self.config.total_stride:
            logger.error(f"Image {height}x{width} is smaller than the total stride {self.config.total_stride}.")
            raise ModelException(
                f"Image {height}x{width} is smaller than the total stride {self.config.total_stride}."
            )

    def forward_shared_batch(self, images: torch.Tensor, split: SplitConfig) -> torch.Tensor:
        """
        Runs the shared stages on a batch of shape (B, 3, H, W) and returns the maps of the
        last shared stage, of shape (B, C, ceil(H / stride), ceil(W / stride)).

        Raises:
            PersonSearch.Exceptions.Model.ModelException: If the images are malformed or
                smaller than the total stride.
        """
        self._check_image(images)
        self.shared_calls += int(images.shape[0])
        return self.run(images, split.shared_stages)

    def forward_shared(self, image: torch.Tensor, split: SplitConfig) -> SharedMaps:
        """
        Runs the shared stages on one image of shape (3, H, W).

        Returns:
            SharedMaps: Maps of the last shared stage with their stride and source size.

        Raises:
            PersonSearch.Exceptions.Model.ModelException: If the image is smaller than the
                total stride.
        """
        if image.dim() != 3:
            raise ModelException(f"Expected an image of shape (3, H, W), got {tuple(image.shape)}.")
        features = self.forward_shared_batch(image.unsqueeze(0), split)[0]
        return SharedMaps(
            features=features,
            stage=split.last_shared,
            stride=self.config.spec(split.last_shared).stride,
            image_height=int(image.shape[1]),
            image_width=int(image.shape[2]),
        )

    def forward_detection_tail(self, shared: torch.Tensor, split: SplitConfig) -> torch.Tensor:
        """
        Finishes the detection path from shared maps of shape (B, C, h, w) or (C, h, w),
        returning the C5 maps.
        """
        batched = shared if shared.dim() == 4 else shared.unsqueeze(0)
        out = self.run(batched, split.tail_sources)
        return out if shared.dim() == 4 else out[0]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """
        Runs C1..C5 on a batch without touching the shared-pass counter.
        """
        self._check_image(images)
        return self.run(images, STAGE_ORDER)

    def stage_parameters(self, stages: Iterable[StageName]) -> list[nn.Parameter]:
        return [param for stage in stages for param in self.stages[stage.value].parameters()]


class ReidTail(nn.Module):
    """
    Replicas of the stages after the split point, stored under starred names.

    Attributes:
        split (SplitConfig): The split the tail belongs to.
        stages (nn.ModuleDict): Replicated stages keyed `C3*`, `C4*`, `C5*` as the split requires.
        in_channels (int): Channels expected from the pooled shared maps.
        out_channels (int): Channels of the C5* output.
    """

    def __init__(self, config: BackboneConfig, split: SplitConfig) -> None:
        super().__init__()
        self.split = split
        self.stages = nn.ModuleDict(
            {starred(stage): build_stage(stage, config) for stage in split.tail_sources}
        )
        self.in_channels = config.spec(split.last_shared).channels
        self.out_channels = config.widths[-1]
        init_weights(self)

    @property
    def stage_names(self) -> list[str]:
        return list(self.stages.keys())

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        """
        Applies every replicated stage, in order, to pooled features of shape (N, C, h, w).

        Raises:
            PersonSearch.Exceptions.Model.ModelException: If the channel count differs from
                the first tail stage's input.
        """
        if pooled.dim() != 4 or pooled.shape[1] != self.in_channels:
            logger.error(
                f"Tail {self.split.variant} expects {self.in_channels} channels, got shape {tuple(pooled.shape)}."
            )
            raise ModelException(
                f"Tail {self.split.variant} expects {self.in_channels} channels, got shape {tuple(pooled.shape)}."
            )
        x = pooled
        for stage in self.stages.values():
            x = stage(x)
        return x


def forward_reid_tail(pooled: torch.Tensor, split: SplitConfig, tail: ReidTail) -> torch.Tensor:
    """
    Runs the replicated stages of `split` on pooled features.

    Args:
        pooled (torch.Tensor): Pooled features, (C, h, w) or (N, C, h, w).
        split (SplitConfig): The split the caller expects.
        tail (ReidTail): The tail weights.

    Returns:
        torch.Tensor: The pre-embedding maps, batched like the input.

    Raises:
        PersonSearch.Exceptions.Model.ModelException: If the tail was built for another split
            or the channel count does not match.
    """
    if tail.split != split:
        logger.error(f"Tail built for {tail.split.variant} cannot serve {split.variant}.")
        raise ModelException(f"Tail built for {tail.split.variant} cannot serve {split.variant}.")
    if pooled.dim() == 3:
        return tail(pooled.unsqueeze(0))[0]
    return tail(pooled)
