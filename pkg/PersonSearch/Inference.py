"""
Provides the person-search forward passes: the joint pipeline, which embeds every detection
from the shared maps already computed for detection, and the disjoint baseline, which crops
every detection out of the image and runs a standalone extractor on it.

Both searchers share the detection path, so given the same detection checkpoint they return
the same boxes. They differ only in how a box becomes an embedding.

Usage:
    ```python
    from PersonSearch.Checkpoint import load_joint
    from PersonSearch.Inference import JointSearcher

    searcher = JointSearcher(load_joint(detection_path, reid_path), max_per_image=5)
    for detection, embedding in searcher.search(image, image_ref="domA/test/00001.png"):
        ...
    ```
"""

from typing import Generic, Sequence, TypeVar

import structlog
import torch
from torch import nn

from PersonSearch.Networks.Detection import decode_detections
from PersonSearch.Networks.Model import JointModel, StandaloneExtractor
from PersonSearch.Networks.Reid import roi_pool_boxes
from PersonSearch.ValidationModels.Backbone import SharedMaps
from PersonSearch.ValidationModels.DataModel import BoundingBox
from PersonSearch.ValidationModels.Detect import Detection, DetectConfig
from PersonSearch.ValidationModels.Reid import Embedding

logger = structlog.get_logger()

ReidModel = TypeVar("ReidModel", bound=nn.Module)

SearchResult = list[tuple[Detection, Embedding]]


class Searcher(Generic[ReidModel]):
    """
    Base class of the two pipelines: runs the detection path and pairs each box with its
    embedding.

    Detection always runs. When boxes are supplied (ground-truth injection, benchmarks)
    they replace the decoded detections with score 1.0.

    Attributes:
        detector (JointModel): Owner of the backbone, the detection head and the split.
        reid_model (ReidModel): The network turning boxes into embeddings.
        max_per_image (int | None): Cap on decoded detections; None keeps every survivor.
    """

    def __init__(
        self,
        detector: JointModel,
        reid_model: ReidModel,
        max_per_image: int | None = DetectConfig().max_per_image,
    ) -> None:
        self.detector = detector
        self.reid_model = reid_model
        self.max_per_image = max_per_image

    def _decode(self, shared: torch.Tensor, image_size: tuple[int, int], image_ref: str) -> list[Detection]:
        """
        Finishes the detection path from one image's shared maps (C, h, w).
        """
        split = self.detector.split
        config = self.detector.detect_config
        c5 = self.detector.backbone.forward_detection_tail(shared, split)
        logits, deltas = self.detector.head(c5.unsqueeze(0))
        anchors = self.detector.anchors(int(c5.shape[-2]), int(c5.shape[-1]))
        return decode_detections(
            torch.sigmoid(logits[0]),
            deltas[0],
            anchors,
            config.score_thresh,
            config.nms_iou,
            self.max_per_image,
            image_size=image_size,
            image_ref=image_ref,
        )

    def _embed(
        self,
        images: torch.Tensor,
        maps: list[SharedMaps],
        boxes: list[list[BoundingBox]],
    ) -> list[list[Embedding]]:
        raise NotImplementedError

    def _run(
        self,
        images: torch.Tensor,
        maps: list[SharedMaps],
        image_refs: Sequence[str],
        boxes: Sequence[Sequence[BoundingBox]] | None,
    ) -> list[SearchResult]:
        height, width = int(images.shape[-2]), int(images.shape[-1])
        detections = [
            self._decode(image_maps.features, (height, width), image_ref)
            for image_maps, image_ref in zip(maps, image_refs)
        ]
        if boxes is not None:
            detections = [
                [Detection(box=box, score=1.0, image_ref=image_ref) for box in image_boxes]
                for image_boxes, image_ref in zip(boxes, image_refs)
            ]
        embeddings = self._embed(images, maps, [[detection.box for detection in row] for row in detections])
        return [list(zip(row, embedded)) for row, embedded in zip(detections, embeddings)]

    def search(
        self,
        image: torch.Tensor,
        image_ref: str = "",
        boxes: Sequence[BoundingBox] | None = None,
    ) -> SearchResult:
        """
        Detects and embeds the people of one image (3, H, W).

        Args:
            image (torch.Tensor): The scene, float in [0, 1].
            image_ref (str): Reference attached to the detections.
            boxes (Sequence[BoundingBox] | None): Boxes to embed instead of the detections.

        Returns:
            SearchResult: `(Detection, Embedding)` pairs by descending detection score.
        """
        with torch.no_grad():
            maps = self.detector.backbone.forward_shared(image, self.detector.split)
            return self._run(image.unsqueeze(0), [maps], [image_ref], None if boxes is None else [boxes])[0]

    def search_batch(
        self,
        images: torch.Tensor,
        image_refs: Sequence[str] | None = None,
        boxes: Sequence[Sequence[BoundingBox]] | None = None,
    ) -> list[SearchResult]:
        """
        `search` over a batch (B, 3, H, W) with one shared pass for the whole batch.
        """
        refs = list(image_refs) if image_refs is not None else [""] * int(images.shape[0])
        split = self.detector.split
        stride = self.detector.backbone_config.spec(split.last_shared).stride
        with torch.no_grad():
            shared = self.detector.backbone.forward_shared_batch(images, split)
            maps = [
                SharedMaps(
                    features=features,
                    stage=split.last_shared,
                    stride=stride,
                    image_height=int(images.shape[-2]),
                    image_width=int(images.shape[-1]),
                )
                for features in shared
            ]
            return self._run(images, maps, refs, boxes)


class JointSearcher(Searcher[JointModel]):
    """
    The joint pipeline: ROI-pools every box from the shared maps and runs the re-ID tail.
    """

    def __init__(self, model: JointModel, max_per_image: int | None = DetectConfig().max_per_image) -> None:
        super().__init__(model, model, max_per_image)

    def _embed(
        self,
        images: torch.Tensor,
        maps: list[SharedMaps],
        boxes: list[list[BoundingBox]],
    ) -> list[list[Embedding]]:
        config = self.detector.reid_config
        pooled = [
            roi_pool_boxes(image_maps, image_boxes, config.pool_height, config.pool_width)
            for image_maps, image_boxes in zip(maps, boxes)
        ]
        counts = [len(image_boxes) for image_boxes in boxes]
        if sum(counts) == 0:
            return [[] for _ in boxes]
        vectors = self.reid_model.reid(torch.cat(pooled))
        return [
            [Embedding.from_tensor(vector) for vector in chunk]
            for chunk in torch.split(vectors, counts)
        ]


class DisjointSearcher(Searcher[StandaloneExtractor]):
    """
    The disjoint baseline: crops every box out of the decoded image and runs the full
    standalone extractor on the crops. The extractor never runs on an empty batch.
    """

    def __init__(
        self,
        detector: JointModel,
        extractor: StandaloneExtractor,
        max_per_image: int | None = DetectConfig().max_per_image,
    ) -> None:
        super().__init__(detector, extractor, max_per_image)

    def _embed(
        self,
        images: torch.Tensor,
        maps: list[SharedMaps],
        boxes: list[list[BoundingBox]],
    ) -> list[list[Embedding]]:
        counts = [len(image_boxes) for image_boxes in boxes]
        if sum(counts) == 0:
            return [[] for _ in boxes]
        crops = torch.cat([self.reid_model.crops(image, image_boxes) for image, image_boxes in zip(images, boxes)])
        vectors = self.reid_model(crops)
        return [
            [Embedding.from_tensor(vector) for vector in chunk]
            for chunk in torch.split(vectors, counts)
        ]


def person_search_forward(
    model: JointModel,
    image: torch.Tensor,
    max_per_image: int | None,
    image_ref: str = "",
) -> SearchResult:
    """
    Detects and embeds the people of one image with the joint model; the shared stages run
    exactly once.
    """
    return JointSearcher(model, max_per_image).search(image, image_ref)


def disjoint_forward(
    detector: JointModel,
    extractor: StandaloneExtractor,
    image: torch.Tensor,
    max_per_image: int | None,
    image_ref: str = "",
) -> SearchResult:
    """
    Detects the people of one image with `detector` and embeds each crop with `extractor`.
    """
    return DisjointSearcher(detector, extractor, max_per_image).search(image, image_ref)
