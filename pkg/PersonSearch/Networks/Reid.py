"""
Provides the re-ID branch: ROI max-pooling from shared maps, the embedding head, PK batch
sampling and the semi-hard and batch-hard triplet losses.

Distances are squared Euclidean on L2-normalized embeddings throughout.
"""

import math
from typing import Hashable, Mapping, Sequence

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from cytoolz import frequencies
from torch import nn

from PersonSearch.Exceptions.Geometry import GeometryException
from PersonSearch.Exceptions.Reid import SamplingException, TripletException
from PersonSearch.Networks.Backbone import ReidTail, forward_reid_tail, init_weights
from PersonSearch.ValidationModels.Backbone import BackboneConfig, SharedMaps, SplitConfig
from PersonSearch.ValidationModels.DataModel import AnnotationRef, BoundingBox, DatasetManifest
from PersonSearch.ValidationModels.Reid import Embedding, PKConfig, ReidConfig, TripletConfig

logger = structlog.get_logger()


def roi_window(box: BoundingBox, stride: int, map_h: int, map_w: int) -> tuple[int, int, int, int]:
    """
    Feature-map cells covered by `box`: `(y0, y1, x0, x1)` with exclusive ends.

    Box corners are divided by the stride, starts are floored and ends ceiled, then clipped
    to the map. A box collapsing below one cell keeps its nearest cell.
    """

    def span(low: float, high: float, size: int) -> tuple[int, int]:
        start = min(max(math.floor(low / stride), 0), size - 1)
        end = min(max(math.ceil(high / stride), start + 1), size)
        return start, end

    y0, y1 = span(box.y1, box.y2, map_h)
    x0, x1 = span(box.x1, box.x2, map_w)
    return y0, y1, x0, x1


def roi_pool(maps: SharedMaps, box: BoundingBox, out_h: int, out_w: int) -> torch.Tensor:
    """
    Max-pools the region of `box` into an `out_h x out_w` grid.

    The covered cells are split into bins with floored starts and ceiled ends, so a bin is
    never empty: when the region is smaller than the output, neighbouring bins reuse the
    nearest cell.

    Args:
        maps (SharedMaps): Shared maps of the image holding `box`.
        box (BoundingBox): Box in image pixels.
        out_h (int): Output height, at least 1.
        out_w (int): Output width, at least 1.

    Returns:
        torch.Tensor: Pooled features of shape (channels, out_h, out_w).

    Raises:
        PersonSearch.Exceptions.Geometry.GeometryException: If an output size is below 1.
    """
    if out_h < 1 or out_w < 1:
        raise GeometryException(f"ROI output size must be at least 1x1, got {out_h}x{out_w}.")
    _, map_h, map_w = maps.features.shape
    y0, y1, x0, x1 = roi_window(box, maps.stride, map_h, map_w)
    region = maps.features[:, y0:y1, x0:x1]
    return F.adaptive_max_pool2d(region, (out_h, out_w))


def roi_pool_boxes(maps: SharedMaps, boxes: Sequence[BoundingBox], out_h: int, out_w: int) -> torch.Tensor:
    """
    `roi_pool` for several boxes, stacked into (N, channels, out_h, out_w).
    """
    if not boxes:
        return maps.features.new_zeros((0, maps.features.shape[0], out_h, out_w))
    return torch.stack([roi_pool(maps, box, out_h, out_w) for box in boxes])


class EmbeddingHead(nn.Module):
    """
    Global average pooling, a linear projection to D dimensions and L2 normalization.
    """

    def __init__(self, in_channels: int, embedding_dim: int, bias: bool = True) -> None:
        super().__init__()
        self.projection = nn.Linear(in_channels, embedding_dim, bias=bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.projection(features.mean(dim=(2, 3))), dim=1)


class ReidBranch(nn.Module):
    """
    The trainable part of the re-ID branch: replicated tail stages and embedding head.

    Attributes:
        split (SplitConfig): The split the tail replicates.
        tail (ReidTail): Starred stages after the split point.
        head (EmbeddingHead): Projection to the embedding space.
    """

    def __init__(self, backbone: BackboneConfig, split: SplitConfig, reid: ReidConfig) -> None:
        super().__init__()
        self.split = split
        self.tail = ReidTail(backbone, split)
        self.head = EmbeddingHead(self.tail.out_channels, reid.embedding_dim, bias=backbone.bias)
        init_weights(self.head)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        """
        Maps pooled features (N, C, h, w) to unit embeddings (N, D).
        """
        return self.head(forward_reid_tail(pooled, self.split, self.tail))


def embed(pooled: torch.Tensor, split: SplitConfig, branch: ReidBranch) -> Embedding:
    """
    Embeds one pooled region of shape (C, h, w): tail, global average, projection, L2 norm.

    Raises:
        PersonSearch.Exceptions.Model.ModelException: If the branch belongs to another split
            or the channel count does not match.
    """
    vector = forward_reid_tail(pooled.unsqueeze(0), split, branch.tail)
    return Embedding.from_tensor(branch.head(vector)[0])


def pairwise_sq_distances(embs: torch.Tensor) -> torch.Tensor:
    """
    Squared Euclidean distances between the rows of `embs` (N, D): symmetric with a zero
    diagonal.
    """
    return (embs[:, None, :] - embs[None, :, :]).pow(2).sum(dim=-1)


def _label_masks(labels: Sequence[Hashable] | torch.Tensor, count: int) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Validates triplet labels and returns the (positive, negative) masks, anchor excluded
    from its own positives.

    Raises:
        PersonSearch.Exceptions.Reid.TripletException: If a label occurs once or fewer than
            two labels are present.
    """
    values = labels.tolist() if isinstance(labels, torch.Tensor) else list(labels)
    if len(values) != count:
        raise TripletException(f"{len(values)} labels for {count} embeddings.")
    counts = frequencies(values)
    for label, occurrences in counts.items():
        if occurrences < 2:
            logger.error(f"Label {label!r} occurs once; triplets need two shots per label.")
            raise TripletException(f"Label {label!r} occurs once; triplets need two shots per label.")
    if len(counts) < 2:
        logger.error(f"Only label {values[0]!r} in the batch; triplets need two labels.")
        raise TripletException(f"Only label {values[0]!r} in the batch; triplets need two labels.")

    codes = {label: code for code, label in enumerate(counts)}
    ids = torch.tensor([codes[value] for value in values])
    same = ids[:, None] == ids[None, :]
    positive = same & ~torch.eye(count, dtype=torch.bool)
    return positive, ~same


def batch_hard_triplet(
    embs: torch.Tensor, labels: Sequence[Hashable] | torch.Tensor, cfg: TripletConfig
) -> torch.Tensor:
    """
    Batch-hard triplet loss: mean over anchors of
    `[m + max_p d(a, p) - min_n d(a, n)]_+`.
    """
    positive, negative = _label_masks(labels, embs.shape[0])
    distances = pairwise_sq_distances(embs)
    hardest_positive = distances.masked_fill(~positive, float("-inf")).max(dim=1).values
    hardest_negative = distances.masked_fill(~negative, float("inf")).min(dim=1).values
    return F.relu(cfg.margin + hardest_positive - hardest_negative).mean()


def semi_hard_triplet(
    embs: torch.Tensor, labels: Sequence[Hashable] | torch.Tensor, cfg: TripletConfig
) -> torch.Tensor:
    """
    Semi-hard triplet loss: for every anchor-positive pair, the negative is the closest one
    farther than the positive, or the farthest negative when none is; the loss is the mean
    over pairs of `[m + d(a, p) - d(a, n)]_+`.
    """
    positive, negative = _label_masks(labels, embs.shape[0])
    distances = pairwise_sq_distances(embs)
    # [a, p, n]
    d_ap = distances[:, :, None]
    d_an = distances[:, None, :]
    semi_hard = negative[:, None, :] & (d_an > d_ap)
    closest = torch.where(semi_hard, d_an.expand_as(semi_hard), torch.full_like(d_an, float("inf"))).min(dim=2).values
    farthest = distances.masked_fill(~negative, float("-inf")).max(dim=1).values
    chosen = torch.where(semi_hard.any(dim=2), closest, farthest[:, None].expand_as(closest))
    return F.relu(cfg.margin + distances - chosen)[positive].mean()


def pk_sample_indices(
    groups: Mapping[Hashable, Sequence[int]],
    cfg: PKConfig,
    rng: np.random.Generator | int,
) -> list[tuple[int, Hashable]]:
    """
    Draws a P x K batch from items grouped by identity.

    P identities are drawn without replacement, then K items per identity, without
    replacement when the identity has at least K items and with replacement otherwise.

    Args:
        groups (Mapping[Hashable, Sequence[int]]): Item indices per identity, in a stable order.
        cfg (PKConfig): Batch shape.
        rng (np.random.Generator | int): Generator or seed.

    Returns:
        list[tuple[int, Hashable]]: `(item, identity)` pairs, identity-major.

    Raises:
        PersonSearch.Exceptions.Reid.SamplingException: If fewer than P identities have items.
    """
    rng = np.random.default_rng(rng)
    identities = [identity for identity, items in groups.items() if len(items) > 0]
    if len(identities) < cfg.P:
        logger.error(f"PK sampling needs {cfg.P} identities, found {len(identities)}.")
        raise SamplingException(f"PK sampling needs {cfg.P} identities, found {len(identities)}.")
    batch: list[tuple[int, Hashable]] = []
    for position in rng.choice(len(identities), size=cfg.P, replace=False):
        identity = identities[int(position)]
        items = groups[identity]
        shots = rng.choice(len(items), size=cfg.K, replace=len(items) < cfg.K)
        batch.extend((items[int(shot)], identity) for shot in shots)
    return batch


def pk_sample(
    manifest: DatasetManifest, cfg: PKConfig, rng_seed: int
) -> list[tuple[AnnotationRef, str]]:
    """
    Draws a P x K batch of identity-labeled annotations from a manifest; unlabeled boxes are
    never drawn.
    """
    refs = manifest.identities()
    groups = {identity: list(range(len(items))) for identity, items in refs.items()}
    return [
        (refs[identity][index], identity)
        for index, identity in pk_sample_indices(groups, cfg, rng_seed)
    ]
