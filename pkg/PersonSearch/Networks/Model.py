"""
Provides the joint person-search model and the standalone re-ID extractor of the disjoint
baseline, together with the weight checksums that guard the two-step training.

Both models are built under a forked RNG seeded with their `seed`, always in the same
order (backbone, detection head, re-ID branch), so two joint models of different variants
sharing a seed start from identical detection weights.
"""

import hashlib
import math
from typing import Iterable

import structlog
import torch
import torch.nn.functional as F
from torch import nn

from PersonSearch.Networks.Backbone import Backbone, init_weights
from PersonSearch.Networks.Detection import DetectionHead, generate_anchors
from PersonSearch.Networks.Reid import EmbeddingHead, ReidBranch
from PersonSearch.ValidationModels.Backbone import STAGE_ORDER, BackboneConfig, SplitConfig
from PersonSearch.ValidationModels.DataModel import BoundingBox
from PersonSearch.ValidationModels.Detect import AnchorSet, DetectConfig
from PersonSearch.ValidationModels.Reid import ReidConfig

logger = structlog.get_logger()


def state_checksum(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """
    SHA-256 over named tensors, visited in sorted name order; names, dtypes, shapes and raw
    bytes all enter the digest.
    """
    digest = hashlib.sha256()
    for name, tensor in sorted(named, key=lambda item: item[0]):
        data = tensor.detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(data.dtype).encode())
        digest.update(str(tuple(data.shape)).encode())
        digest.update(data.numpy().tobytes())
    return digest.hexdigest()


class JointModel(nn.Module):
    """
    Detection and re-ID through one backbone split at a configurable stage.

    Attributes:
        split (SplitConfig): Where the re-ID branch departs.
        backbone_config (BackboneConfig): Stage widths.
        detect_config (DetectConfig): Head, anchor and decoder options.
        reid_config (ReidConfig): Embedding and pooling options.
        seed (int): Initialization seed.
        backbone (Backbone): Detection path C1..C5.
        head (DetectionHead): Classification and regression subnets on C5.
        reid (ReidBranch): Starred tail and embedding head.
    """

    def __init__(
        self,
        split: SplitConfig,
        backbone: BackboneConfig = BackboneConfig(),
        detect: DetectConfig = DetectConfig(),
        reid: ReidConfig = ReidConfig(),
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.split = split
        self.backbone_config = backbone
        self.detect_config = detect
        self.reid_config = reid
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = Backbone(backbone)
            self.head = DetectionHead(backbone.widths[-1], detect)
            self.reid = ReidBranch(backbone, split, reid)
        self._anchors: dict[tuple[int, int], AnchorSet] = {}

    @property
    def stride(self) -> int:
        return self.backbone_config.total_stride

    def anchors(self, map_h: int, map_w: int) -> AnchorSet:
        """
        Anchors of a C5 map of size `map_h x map_w`, memoized.
        """
        key = (map_h, map_w)
        if key not in self._anchors:
            self._anchors[key] = generate_anchors(
                map_h, map_w, self.stride, self.detect_config.scales, self.detect_config.ratios
            )
        return self._anchors[key]

    def detection_parameters(self) -> list[nn.Parameter]:
        return [*self.backbone.parameters(), *self.head.parameters()]

    def shared_checksum(self) -> str:
        return state_checksum(
            (f"{stage.value}.{name}", tensor)
            for stage in self.split.shared_stages
            for name, tensor in self.backbone.stages[stage.value].state_dict().items()
        )

    def detection_checksum(self) -> str:
        return state_checksum(
            [
                *((f"backbone.{name}", tensor) for name, tensor in self.backbone.state_dict().items()),
                *((f"head.{name}", tensor) for name, tensor in self.head.state_dict().items()),
            ]
        )

    def reid_checksum(self) -> str:
        return state_checksum(self.reid.state_dict().items())

    def detect_batch(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Detection logits and deltas for a training batch (B, 3, H, W).
        """
        return self.head(self.backbone(images))


class StandaloneExtractor(nn.Module):
    """
    The re-ID network of the disjoint baseline: a full C1..C5 extractor and an embedding
    head run on person crops resized to a fixed size.

    Attributes:
        backbone (Backbone): Its own C1..C5, unrelated to any detector's.
        head (EmbeddingHead): Projection to the embedding space.
        crop_size (tuple[int, int]): Crop height and width.
        snippets (int): Crops embedded so far.
    """

    def __init__(
        self,
        backbone: BackboneConfig = BackboneConfig(),
        reid: ReidConfig = ReidConfig(),
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.backbone_config = backbone
        self.reid_config = reid
        self.seed = seed
        self.crop_size = (reid.crop_height, reid.crop_width)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = Backbone(backbone)
            self.head = EmbeddingHead(backbone.widths[-1], reid.embedding_dim, bias=backbone.bias)
            init_weights(self.head)
        self.snippets = 0

    def crop(self, image: torch.Tensor, box: BoundingBox) -> torch.Tensor:
        """
        Cuts `box` out of an image (3, H, W) and resizes it bilinearly to `crop_size`.
        """
        _, height, width = image.shape
        x0 = min(max(math.floor(box.x1), 0), width - 1)
        y0 = min(max(math.floor(box.y1), 0), height - 1)
        x1 = min(max(math.ceil(box.x2), x0 + 1), width)
        y1 = min(max(math.ceil(box.y2), y0 + 1), height)
        patch = image[:, y0:y1, x0:x1].unsqueeze(0)
        return F.interpolate(patch, size=self.crop_size, mode="bilinear", align_corners=False)[0]

    def crops(self, image: torch.Tensor, boxes: Iterable[BoundingBox]) -> torch.Tensor:
        patches = [self.crop(image, box) for box in boxes]
        if not patches:
            return image.new_zeros((0, 3, *self.crop_size))
        return torch.stack(patches)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        """
        Embeds crops (N, 3, crop_h, crop_w) into unit vectors (N, D).
        """
        self.snippets += int(crops.shape[0])
        return self.head(self.backbone.run(crops, STAGE_ORDER))

    def checksum(self) -> str:
        return state_checksum(self.state_dict().items())
