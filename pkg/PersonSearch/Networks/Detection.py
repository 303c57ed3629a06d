"""
Provides the single-level detection head and everything around it: anchor generation,
two-threshold anchor matching, the focal and smooth-L1 losses, box delta coding, greedy
NMS, decoding into scored detections and detection AP.

Anchor assignments use the codes below; non-negative values are ground-truth indices.
"""

import math
from typing import Mapping, Sequence

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import box_iou

from PersonSearch.Dataset import boxes_to_tensor
from PersonSearch.Exceptions.Model import DetectionException
from PersonSearch.ValidationModels.DataModel import BoundingBox
from PersonSearch.ValidationModels.Detect import (
    AnchorSet,
    DetectConfig,
    Detection,
    FocalConfig,
)

logger = structlog.get_logger()

NEGATIVE: int = -1
IGNORE: int = -2
PROB_EPS: float = 1e-7
DELTA_CLAMP: float = math.log(1000.0 / 16)


def generate_anchors(
    map_h: int,
    map_w: int,
    stride: int,
    scales: Sequence[float],
    ratios: Sequence[float],
) -> AnchorSet:
    """
    Tiles a feature map with anchors.

    The anchor of scale `s` and ratio `r` (height over width) has area `(s * stride)^2` and is
    centred on its cell, at `((col + 0.5) * stride, (row + 0.5) * stride)`. Anchors are ordered
    row-major over cells, then by scale, then by ratio.

    Raises:
        PersonSearch.Exceptions.Model.DetectionException: On non-positive sizes or empty
            scale/ratio lists.
    """
    if map_h <= 0 or map_w <= 0 or stride <= 0:
        raise DetectionException(f"Invalid anchor grid {map_h}x{map_w} at stride {stride}.")
    if not scales or not ratios or min(*scales, *ratios) <= 0:
        raise DetectionException(f"Invalid anchor scales {scales} or ratios {ratios}.")

    sizes = torch.tensor(scales, dtype=torch.float64) * stride
    sqrt_ratios = torch.tensor(ratios, dtype=torch.float64).sqrt()
    heights = (sizes[:, None] * sqrt_ratios[None, :]).reshape(-1)
    widths = (sizes[:, None] / sqrt_ratios[None, :]).reshape(-1)
    shapes = torch.stack([-widths, -heights, widths, heights], dim=1) / 2

    rows = (torch.arange(map_h, dtype=torch.float64) + 0.5) * stride
    cols = (torch.arange(map_w, dtype=torch.float64) + 0.5) * stride
    cy, cx = torch.meshgrid(rows, cols, indexing="ij")
    centres = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)

    boxes = (centres + shapes[None]).reshape(-1, 4).float()
    return AnchorSet(
        boxes=boxes,
        map_h=map_h,
        map_w=map_w,
        stride=stride,
        scales=tuple(scales),
        ratios=tuple(ratios),
    )


def _first_argmax(values: torch.Tensor, dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Maximum along `dim` and the lowest index reaching it.
    """
    best = values.max(dim=dim, keepdim=True).values
    positions = torch.arange(values.shape[dim]).reshape([-1 if d == dim else 1 for d in range(values.dim())])
    index = torch.where(values == best, positions, values.shape[dim]).min(dim=dim).values
    return best.squeeze(dim), index


def match_anchors(
    anchors: AnchorSet,
    gts: Sequence[BoundingBox] | torch.Tensor,
    pos_thresh: float,
    neg_thresh: float,
) -> torch.Tensor:
    """
    Assigns every anchor to a ground-truth box, to the background or to neither.

    An anchor is positive iff its best IoU reaches `pos_thresh` (ties go to the lowest
    ground-truth index) and negative iff it stays below `neg_thresh`; the rest are ignored.
    Every ground truth then claims its own best anchor, so no box goes unmatched.

    Returns:
        torch.Tensor: Long tensor of shape (A,): a ground-truth index, `NEGATIVE` or `IGNORE`.

    Raises:
        PersonSearch.Exceptions.Model.DetectionException: If `pos_thresh <= neg_thresh`.
    """
    if pos_thresh <= neg_thresh:
        raise DetectionException(f"pos_thresh ({pos_thresh}) must exceed neg_thresh ({neg_thresh}).")
    gt_boxes = gts if isinstance(gts, torch.Tensor) else boxes_to_tensor(gts)
    labels = torch.full((len(anchors),), NEGATIVE, dtype=torch.long)
    if gt_boxes.shape[0] == 0:
        return labels

    overlaps = box_iou(anchors.boxes, gt_boxes.to(anchors.boxes.dtype))
    best_iou, best_gt = _first_argmax(overlaps, dim=1)
    labels[best_iou >= neg_thresh] = IGNORE
    positive = best_iou >= pos_thresh
    labels[positive] = best_gt[positive]

    gt_best_iou, gt_best_anchor = _first_argmax(overlaps, dim=0)
    for gt_index in reversed(range(gt_boxes.shape[0])):
        if gt_best_iou[gt_index] > 0:
            labels[gt_best_anchor[gt_index]] = gt_index
    return labels


def focal_loss(
    pred_prob: torch.Tensor,
    target: torch.Tensor,
    cfg: FocalConfig,
    normalizer: float | torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Binary focal loss `-alpha_t (1 - p_t)^gamma log(p_t)` summed over anchors.

    `p_t` is the probability of the true class. `alpha_t` is `alpha` for every anchor, or,
    with `cfg.class_balanced`, `alpha` for positive targets and `1 - alpha` for negative ones.
    Probabilities are clamped to `[1e-7, 1 - 1e-7]`.

    Args:
        pred_prob (torch.Tensor): Foreground probabilities.
        target (torch.Tensor): Targets in {0, 1}, same shape.
        cfg (FocalConfig): `alpha` and `gamma`.
        normalizer (float | torch.Tensor | None): Divisor of the sum; defaults to the
            positive count clamped at 1.

    Returns:
        torch.Tensor: The scalar loss.

    Raises:
        PersonSearch.Exceptions.Model.DetectionException: If a probability is NaN.
    """
    if torch.isnan(pred_prob).any():
        logger.error("NaN probability in focal loss.")
        raise DetectionException("NaN probability in focal loss.")
    target = target.to(pred_prob.dtype)
    prob = pred_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_t = torch.where(target > 0.5, prob, 1.0 - prob)
    if cfg.class_balanced:
        alpha_t = torch.where(
            target > 0.5, torch.full_like(prob, cfg.alpha), torch.full_like(prob, 1.0 - cfg.alpha)
        )
    else:
        alpha_t = torch.full_like(prob, cfg.alpha)
    loss = -alpha_t * (1.0 - p_t).pow(cfg.gamma) * torch.log(p_t)
    if normalizer is None:
        normalizer = target.sum().clamp(min=1.0)
    return loss.sum() / normalizer


def smooth_l1(residual: torch.Tensor, normalizer: float | torch.Tensor = 1.0) -> torch.Tensor:
    """
    Smooth-L1 (beta 1) of regression residuals: `0.5 x^2` below 1 in magnitude, `|x| - 0.5`
    above, summed over every coordinate and divided by `normalizer`.
    """
    return F.smooth_l1_loss(residual, torch.zeros_like(residual), reduction="sum", beta=1.0) / normalizer


def encode_deltas(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """
    Regression targets `(dx, dy, dw, dh)` of `boxes` relative to `anchors`, both (N, 4).
    """
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    return torch.stack([(bx - ax) / aw, (by - ay) / ah, torch.log(bw / aw), torch.log(bh / ah)], dim=1)


def decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """
    Inverse of `encode_deltas`; width and height deltas are clamped at `log(1000 / 16)`.
    """
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(max=DELTA_CLAMP))
    h = ah * torch.exp(deltas[:, 3].clamp(max=DELTA_CLAMP))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_thresh: float) -> torch.Tensor:
    """
    Greedy non-maximum suppression.

    Boxes are visited by descending score, equal scores in index order; a box is dropped
    when its IoU with an already kept box exceeds `iou_thresh`.

    Returns:
        torch.Tensor: Indices of the kept boxes, in visiting order.
    """
    if boxes.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.argsort(scores, descending=True, stable=True)
    overlaps = box_iou(boxes, boxes)
    suppressed = torch.zeros(boxes.shape[0], dtype=torch.bool)
    keep: list[int] = []
    for index in order.tolist():
        if suppressed[index]:
            continue
        keep.append(index)
        suppressed |= overlaps[index] > iou_thresh
    return torch.tensor(keep, dtype=torch.long)


def decode_detections(
    scores: torch.Tensor,
    deltas: torch.Tensor,
    anchors: AnchorSet,
    score_thresh: float,
    nms_iou: float,
    max_per_image: int | None,
    image_size: tuple[int, int] | None = None,
    image_ref: str = "",
) -> list[Detection]:
    """
    Turns per-anchor scores and deltas into scored boxes.

    Anchors scoring above `score_thresh` are decoded, clipped to `image_size` (height,
    width) when given, stripped of empty boxes and passed through NMS. At most
    `max_per_image` survivors are returned, by descending score with ties broken by anchor
    index; None keeps every survivor.

    Raises:
        PersonSearch.Exceptions.Model.DetectionException: If the score or delta shapes do not
            match the anchor count.
    """
    if scores.shape != (len(anchors),) or deltas.shape != (len(anchors), 4):
        raise DetectionException(
            f"Scores {tuple(scores.shape)} / deltas {tuple(deltas.shape)} do not match {len(anchors)} anchors."
        )
    scores = scores.detach()
    candidates = torch.nonzero(scores > score_thresh).flatten()
    boxes = decode_deltas(anchors.boxes[candidates], deltas.detach()[candidates])
    if image_size is not None:
        height, width = image_size
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, width)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, height)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    candidates, boxes = candidates[valid], boxes[valid]

    keep = nms(boxes, scores[candidates], nms_iou)
    if max_per_image is not None:
        keep = keep[:max_per_image]
    return [
        Detection(
            box=BoundingBox.from_sequence(boxes[index].tolist()),
            score=float(scores[candidates[index]]),
            image_ref=image_ref,
        )
        for index in keep.tolist()
    ]


def average_precision(hits: Sequence[bool], num_positives: int) -> float:
    """
    All-point interpolated area under the precision-recall curve of a ranked list.

    Args:
        hits (Sequence[bool]): Whether each ranked item is a true positive.
        num_positives (int): Number of positives to retrieve; unretrieved ones lower recall.

    Returns:
        float: AP in [0, 1].

    Raises:
        PersonSearch.Exceptions.Model.DetectionException: If `num_positives` is not positive.
    """
    if num_positives <= 0:
        raise DetectionException("Average precision is undefined without positives.")
    if len(hits) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(hits, dtype=np.float64))
    recall = np.concatenate([[0.0], tp / num_positives, [1.0]])
    precision = np.concatenate([[0.0], tp / np.arange(1, len(hits) + 1), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def detection_ap(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[BoundingBox]],
    iou_thresh: float = 0.5,
) -> float:
    """
    Detection AP over a set of images.

    Detections are visited by descending score (stable); each is a true positive iff the
    ground truth it overlaps most in its image has IoU above `iou_thresh` and is not yet
    matched.

    Args:
        dets (Sequence[Detection]): Detections of every image, tagged with `image_ref`.
        gts (Mapping[str, Sequence[BoundingBox]]): Ground-truth boxes per image.
        iou_thresh (float): Match threshold.

    Returns:
        float: All-point interpolated AP.

    Raises:
        PersonSearch.Exceptions.Model.DetectionException: If there is no ground truth.
    """
    total = sum(len(boxes) for boxes in gts.values())
    if total == 0:
        logger.error("Detection AP is undefined without ground-truth boxes.")
        raise DetectionException("Detection AP is undefined without ground-truth boxes.")

    gt_tensors = {ref: boxes_to_tensor(boxes) for ref, boxes in gts.items()}
    matched = {ref: torch.zeros(len(boxes), dtype=torch.bool) for ref, boxes in gts.items()}
    order = sorted(range(len(dets)), key=lambda index: -dets[index].score)
    hits: list[bool] = []
    for index in order:
        det = dets[index]
        image_gts = gt_tensors.get(det.image_ref)
        if image_gts is None or image_gts.shape[0] == 0:
            hits.append(False)
            continue
        overlaps = box_iou(boxes_to_tensor([det.box]), image_gts)[0]
        best_iou, best_gt = _first_argmax(overlaps, dim=0)
        gt_index = int(best_gt)
        if float(best_iou) > iou_thresh and not matched[det.image_ref][gt_index]:
            matched[det.image_ref][gt_index] = True
            hits.append(True)
        else:
            hits.append(False)
    return average_precision(hits, total)


class DetectionHead(nn.Module):
    """
    RetinaNet-style classification and box-regression subnets on one feature level.

    Attributes:
        config (DetectConfig): Head and anchor configuration.
        anchors_per_cell (int): Anchors per feature-map cell.
    """

    def __init__(self, in_channels: int, config: DetectConfig) -> None:
        super().__init__()
        self.config = config
        self.anchors_per_cell = config.anchors_per_cell
        self.cls_subnet = self._subnet(in_channels, self.anchors_per_cell)
        self.reg_subnet = self._subnet(in_channels, self.anchors_per_cell * 4)
        for layer in self.modules():
            if isinstance(layer, nn.Conv2d):
                nn.init.normal_(layer.weight, std=0.01)
                nn.init.zeros_(layer.bias)
        nn.init.constant_(self.cls_subnet[-1].bias, -math.log((1 - config.prior) / config.prior))

    def _subnet(self, in_channels: int, out_channels: int) -> nn.Sequential:
        layers: list[nn.Module] = []
        channels = in_channels
        for _ in range(self.config.head_depth):
            layers += [nn.Conv2d(channels, self.config.head_width, 3, padding=1), nn.ReLU()]
            channels = self.config.head_width
        layers.append(nn.Conv2d(channels, out_channels, 3, padding=1))
        return nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            features (torch.Tensor): C5 maps of shape (B, C, h, w).

        Returns:
            tuple[torch.Tensor, torch.Tensor]: Logits (B, h*w*A) and deltas (B, h*w*A, 4), in
            anchor order.
        """
        batch, _, height, width = features.shape
        logits = self.cls_subnet(features).permute(0, 2, 3, 1).reshape(batch, -1)
        deltas = (
            self.reg_subnet(features)
            .reshape(batch, self.anchors_per_cell, 4, height, width)
            .permute(0, 3, 4, 1, 2)
            .reshape(batch, -1, 4)
        )
        return logits, deltas


def detection_loss(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    anchors: AnchorSet,
    gts: Sequence[BoundingBox],
    cfg: DetectConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Detection loss of one image: focal loss over non-ignored anchors plus smooth-L1 over
    positive anchors, both divided by the positive count clamped at 1.

    Returns:
        tuple[torch.Tensor, torch.Tensor]: The focal and regression terms.
    """
    labels = match_anchors(anchors, gts, cfg.pos_thresh, cfg.neg_thresh)
    positive = labels >= 0
    valid = labels != IGNORE
    normalizer = positive.sum().clamp(min=1).to(logits.dtype)

    focal = focal_loss(torch.sigmoid(logits[valid]), positive[valid], cfg.focal, normalizer)
    if not positive.any():
        return focal, deltas.sum() * 0.0
    gt_boxes = boxes_to_tensor(gts)[labels[positive]]
    targets = encode_deltas(anchors.boxes[positive], gt_boxes)
    regression = smooth_l1(deltas[positive] - targets, normalizer)
    return focal, regression
