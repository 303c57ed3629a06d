"""
Provides the person-search evaluation protocols and their report files.

Three protocols are offered, all scored by `search_map_rank1`:

- `gallery_protocol_eval`: seeded, nested galleries of increasing size, detected boxes.
- `boxes_per_image_sweep`: one fixed gallery of every test image, detections capped at k
  boxes per image for every k of a list.
- `gt_injection_eval`: the gallery protocol with ground-truth boxes in place of detections,
  isolating embedding quality from detector errors.

Cross-dataset evaluation is any of these calls applied to another domain's test manifest.

Usage:
    ```python
    from PersonSearch.Evaluation import gallery_protocol_eval, write_reports

    reports = gallery_protocol_eval(searcher, manifest, store, gallery_sizes=[50, 200])
    write_reports(reports, "runs/abc/reports", "gallery-detected")
    ```
"""

import copy
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import orjson
import structlog
from pydantic import TypeAdapter, ValidationError
from rich.table import Table

from PersonSearch.Dataset import ImageStore, iou
from PersonSearch.Exceptions.Evaluation import EvaluationException, ReportException
from PersonSearch.Inference import Searcher, SearchResult
from PersonSearch.Networks.Detection import average_precision, detection_ap
from PersonSearch.ValidationModels.DataModel import BoundingBox, DatasetManifest
from PersonSearch.ValidationModels.Evaluation import (
    EvalMode,
    GalleryCases,
    ProtocolKind,
    ProtocolReport,
    ProtocolSweep,
    QueryCase,
)
from PersonSearch.ValidationModels.Reid import Embedding

logger = structlog.get_logger()

ProbeKey = tuple[str, int]
GalleryBoxes = Mapping[str, Sequence[tuple[BoundingBox, Embedding]]]

_REPORT_LIST = TypeAdapter(list[ProtocolReport])

TSV_COLUMNS: tuple[str, ...] = (
    "protocol",
    "parameter",
    "mode",
    "mAP",
    "rank1",
    "detection_ap",
    "num_queries",
    "num_gallery_images",
    "dataset",
    "model",
)


def build_gallery_cases(
    manifest: DatasetManifest,
    gallery_sizes: Sequence[int],
    rng_seed: int,
) -> GalleryCases:
    """
    Builds one query per identity seen in at least two images, with nested galleries.

    The probe is a seeded pick among the identity's boxes. Every gallery holds all other
    images of the identity; the remaining slots are filled from one seeded ordering of the
    distractor images, so the gallery of a smaller size is a subset of every larger one.
    Galleries larger than the manifest allows are capped.

    Args:
        manifest (DatasetManifest): Identity-labeled test scenes.
        gallery_sizes (Sequence[int]): Requested gallery sizes.
        rng_seed (int): Seed of the probe and distractor picks.

    Returns:
        GalleryCases: Cases per size and the count of skipped single-image identities.

    Raises:
        PersonSearch.Exceptions.Evaluation.EvaluationException: If the manifest carries no
            identity or a size is not positive.
    """
    if not manifest.has_identities:
        logger.error(f"Manifest {manifest.name!r} carries no identity; it cannot hold queries.")
        raise EvaluationException(f"Manifest {manifest.name!r} carries no identity; it cannot hold queries.")
    if not gallery_sizes or any(size <= 0 for size in gallery_sizes):
        raise EvaluationException(f"Gallery sizes must be positive, got {list(gallery_sizes)}.")

    rng = np.random.default_rng(rng_seed)
    position = {record.image_ref: index for index, record in enumerate(manifest.records)}
    cases: dict[int, list[QueryCase]] = {size: [] for size in gallery_sizes}
    skipped = 0
    for identity, refs in manifest.identities().items():
        images = list(dict.fromkeys(ref.image_ref for ref in refs))
        if len(images) < 2:
            skipped += 1
            continue
        probe = refs[int(rng.integers(len(refs)))]
        positives = [image_ref for image_ref in images if image_ref != probe.image_ref]
        distractors = [
            record.image_ref
            for record in manifest.records
            if record.image_ref not in images
        ]
        distractors = [distractors[int(index)] for index in rng.permutation(len(distractors))]
        targets = {
            image_ref: tuple(
                annotation.box
                for annotation in manifest.record(image_ref).annotations
                if annotation.identity == identity
            )
            for image_ref in positives
        }
        probe_box = manifest.record(probe.image_ref).annotations[probe.index].box
        for size in gallery_sizes:
            chosen = positives + distractors[: max(size - len(positives), 0)]
            cases[size].append(
                QueryCase(
                    probe_image_ref=probe.image_ref,
                    probe_index=probe.index,
                    probe_box=probe_box,
                    identity=identity,
                    gallery=tuple(sorted(chosen, key=position.__getitem__)),
                    targets=targets,
                )
            )

    if skipped:
        logger.warning(f"Skipped {skipped} identities seen in a single image of {manifest.name!r}.")
    available = len(manifest.records) - 1
    for size in gallery_sizes:
        if size > available:
            logger.warning(f"Gallery size {size} exceeds the {available} images available; galleries are capped.")
    return GalleryCases(
        cases={size: tuple(size_cases) for size, size_cases in cases.items()},
        skipped_identities=skipped,
    )


def _rank_hits(
    case: QueryCase,
    probe: Embedding,
    gallery_boxes: GalleryBoxes,
    iou_thresh: float,
) -> list[bool]:
    """
    Ranks the gallery boxes of one query by ascending squared distance to the probe (ties
    by gallery order) and marks the true matches, each ground truth credited once.
    """
    candidates: list[tuple[str, BoundingBox, Embedding]] = []
    for image_ref in case.gallery:
        if image_ref not in gallery_boxes:
            logger.error(f"No box list for gallery image {image_ref!r}.")
            raise EvaluationException(f"No box list for gallery image {image_ref!r}.")
        candidates += [(image_ref, box, embedding) for box, embedding in gallery_boxes[image_ref]]
    if not candidates:
        return []

    vectors = np.stack([embedding.as_array() for _, _, embedding in candidates])
    distances = ((vectors - probe.as_array()) ** 2).sum(axis=1)
    matched = {image_ref: [False] * len(boxes) for image_ref, boxes in case.targets.items()}
    hits: list[bool] = []
    for index in np.argsort(distances, kind="stable").tolist():
        image_ref, box, _ = candidates[index]
        targets = case.targets.get(image_ref, ())
        if not targets:
            hits.append(False)
            continue
        overlaps = [iou(box, target) for target in targets]
        best = int(np.argmax(overlaps))
        if overlaps[best] > iou_thresh and not matched[image_ref][best]:
            matched[image_ref][best] = True
            hits.append(True)
        else:
            hits.append(False)
    return hits


def search_map_rank1(
    cases: Sequence[QueryCase],
    probe_embeddings: Mapping[ProbeKey, Embedding],
    gallery_boxes: GalleryBoxes,
    iou_thresh: float = 0.5,
) -> tuple[float, float]:
    """
    Scores a set of queries.

    Per query, the boxes of its gallery are ranked by ascending distance to the probe
    embedding. A box is a true match iff its best-overlapping ground truth of the query
    identity has IoU above `iou_thresh` and was not claimed by a higher-ranked box. AP counts
    every ground truth of the identity in the gallery, so missed people lower recall.

    Args:
        cases (Sequence[QueryCase]): The queries.
        probe_embeddings (Mapping[ProbeKey, Embedding]): Embedding of each probe, keyed by
            `(probe_image_ref, probe_index)`.
        gallery_boxes (GalleryBoxes): Boxes and embeddings of every gallery image.
        iou_thresh (float): Overlap threshold.

    Returns:
        tuple[float, float]: mAP and Rank-1.

    Raises:
        PersonSearch.Exceptions.Evaluation.EvaluationException: If there is no query, a probe
            embedding is missing or a gallery image has no box list.
    """
    if not cases:
        raise EvaluationException("No query to score.")
    average_precisions: list[float] = []
    top_hits: list[bool] = []
    for case in cases:
        key = (case.probe_image_ref, case.probe_index)
        if key not in probe_embeddings:
            logger.error(f"Missing probe embedding for {key}.")
            raise EvaluationException(f"Missing probe embedding for {key}.")
        hits = _rank_hits(case, probe_embeddings[key], gallery_boxes, iou_thresh)
        average_precisions.append(average_precision(hits, case.positive_count))
        top_hits.append(bool(hits) and hits[0])
    return float(np.mean(average_precisions)), float(np.mean(top_hits))


def _collect(
    searcher: Searcher,
    manifest: DatasetManifest,
    image_refs: Sequence[str],
    store: ImageStore,
    mode: EvalMode,
) -> dict[str, SearchResult]:
    results: dict[str, SearchResult] = {}
    for image_ref in image_refs:
        boxes = manifest.record(image_ref).boxes if mode is EvalMode.gt_injected else None
        results[image_ref] = searcher.search(store.load(image_ref), image_ref, boxes)
    return results


def embed_probes(
    searcher: Searcher,
    cases: Sequence[QueryCase],
    store: ImageStore,
) -> dict[ProbeKey, Embedding]:
    """
    Embeds every probe box, one pass per probe image.
    """
    probes: dict[str, dict[int, BoundingBox]] = {}
    for case in cases:
        probes.setdefault(case.probe_image_ref, {})[case.probe_index] = case.probe_box
    embeddings: dict[ProbeKey, Embedding] = {}
    for image_ref, boxes in probes.items():
        pairs = searcher.search(store.load(image_ref), image_ref, list(boxes.values()))
        for index, (_, embedding) in zip(boxes, pairs):
            embeddings[(image_ref, index)] = embedding
    return embeddings


def _gallery_boxes(results: Mapping[str, SearchResult], cap: int | None = None) -> dict[str, list[tuple[BoundingBox, Embedding]]]:
    return {
        image_ref: [(detection.box, embedding) for detection, embedding in pairs[:cap]]
        for image_ref, pairs in results.items()
    }


def _detection_ap(
    manifest: DatasetManifest,
    results: Mapping[str, SearchResult],
    iou_thresh: float,
    cap: int | None = None,
) -> float | None:
    gts = {image_ref: manifest.record(image_ref).boxes for image_ref in results}
    if not any(gts.values()):
        return None
    detections = [detection for pairs in results.values() for detection, _ in pairs[:cap]]
    return detection_ap(detections, gts, iou_thresh)


def gallery_protocol_eval(
    searcher: Searcher,
    manifest: DatasetManifest,
    store: ImageStore,
    gallery_sizes: Sequence[int],
    iou_thresh: float = 0.5,
    seed: int = 0,
    mode: EvalMode = EvalMode.detected,
    model_label: str = "",
) -> list[ProtocolReport]:
    """
    Runs the gallery-size protocol: one report per gallery size.

    Every image of the largest galleries is searched once; smaller galleries reuse those
    results. Detection AP is measured over the same images in detected mode.

    Raises:
        PersonSearch.Exceptions.Evaluation.EvaluationException: If no identity occurs in two
            images.
    """
    gallery_cases = build_gallery_cases(manifest, gallery_sizes, seed)
    largest = max(gallery_sizes)
    if not gallery_cases.cases[largest]:
        logger.error(f"No identity of {manifest.name!r} occurs in two images.")
        raise EvaluationException(f"No identity of {manifest.name!r} occurs in two images.")

    needed = dict.fromkeys(image_ref for case in gallery_cases.cases[largest] for image_ref in case.gallery)
    results = _collect(searcher, manifest, list(needed), store, mode)
    probes = embed_probes(searcher, gallery_cases.cases[largest], store)
    boxes = _gallery_boxes(results)
    ap = _detection_ap(manifest, results, iou_thresh) if mode is EvalMode.detected else None

    reports = []
    for size in gallery_sizes:
        cases = gallery_cases.cases[size]
        mean_ap, rank1 = search_map_rank1(cases, probes, boxes, iou_thresh)
        reports.append(
            ProtocolReport(
                protocol=ProtocolKind.gallery,
                parameter=size,
                mAP=mean_ap,
                rank1=rank1,
                detection_ap=ap,
                num_queries=len(cases),
                num_gallery_images=max(len(case.gallery) for case in cases),
                mode=mode,
                dataset=manifest.name,
                model=model_label,
            )
        )
        logger.info(f"gallery {size} ({mode}): mAP {mean_ap:.4f}, rank-1 {rank1:.4f}")
    return reports


def gt_injection_eval(
    searcher: Searcher,
    manifest: DatasetManifest,
    store: ImageStore,
    gallery_sizes: Sequence[int],
    iou_thresh: float = 0.5,
    seed: int = 0,
    model_label: str = "",
) -> list[ProtocolReport]:
    """
    The gallery protocol with every ground-truth box of the gallery embedded in place of the
    detections.
    """
    return gallery_protocol_eval(
        searcher, manifest, store, gallery_sizes, iou_thresh, seed, EvalMode.gt_injected, model_label
    )


def boxes_per_image_sweep(
    searcher: Searcher,
    manifest: DatasetManifest,
    store: ImageStore,
    k_values: Sequence[int | None],
    iou_thresh: float = 0.5,
    seed: int = 0,
    model_label: str = "",
) -> ProtocolSweep:
    """
    Runs the boxes-per-image protocol on one fixed gallery of every test image.

    Detections are decoded once without a cap; capping at k keeps the k best-scored of them,
    which is what decoding with `max_per_image=k` returns. A k of None keeps every detection.

    Returns:
        ProtocolSweep: One report per k and the best report by mAP (first on ties).

    Raises:
        PersonSearch.Exceptions.Evaluation.EvaluationException: If a k is not positive or no
            identity occurs in two images.
    """
    if not k_values or any(k is not None and k <= 0 for k in k_values):
        logger.error(f"Boxes-per-image caps must be positive, got {list(k_values)}.")
        raise EvaluationException(f"Boxes-per-image caps must be positive, got {list(k_values)}.")
    size = len(manifest.records)
    cases = build_gallery_cases(manifest, [size], seed).cases[size]
    if not cases:
        logger.error(f"No identity of {manifest.name!r} occurs in two images.")
        raise EvaluationException(f"No identity of {manifest.name!r} occurs in two images.")

    uncapped = copy.copy(searcher)
    uncapped.max_per_image = None
    results = _collect(uncapped, manifest, [record.image_ref for record in manifest.records], store, EvalMode.detected)
    probes = embed_probes(uncapped, cases, store)

    reports = []
    for k in k_values:
        mean_ap, rank1 = search_map_rank1(cases, probes, _gallery_boxes(results, k), iou_thresh)
        reports.append(
            ProtocolReport(
                protocol=ProtocolKind.boxes_per_image,
                parameter=k,
                mAP=mean_ap,
                rank1=rank1,
                detection_ap=_detection_ap(manifest, results, iou_thresh, k),
                num_queries=len(cases),
                num_gallery_images=max(len(case.gallery) for case in cases),
                dataset=manifest.name,
                model=model_label,
            )
        )
        logger.info(f"{k} boxes per image: mAP {mean_ap:.4f}, rank-1 {rank1:.4f}")
    best = max(reports, key=lambda report: report.mAP)
    return ProtocolSweep(reports=tuple(reports), best=best)


def write_reports(reports: Sequence[ProtocolReport], directory: str | Path, stem: str) -> tuple[Path, Path]:
    """
    Writes reports as `<stem>.json` (machine-readable) and `<stem>.tsv` (one row per
    protocol parameter).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / f"{stem}.json"
    tsv_path = directory / f"{stem}.tsv"
    rows = [report.model_dump(mode="json") for report in reports]
    json_path.write_bytes(orjson.dumps(rows, option=orjson.OPT_INDENT_2))
    lines = ["\t".join(TSV_COLUMNS)]
    for report, row in zip(reports, rows):
        row["parameter"] = report.parameter_label
        lines.append("\t".join("" if row[column] is None else str(row[column]) for column in TSV_COLUMNS))
    tsv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(rows)} reports to {json_path}.")
    return json_path, tsv_path


def read_reports(path: str | Path) -> list[ProtocolReport]:
    """
    Reads a JSON report file.

    Raises:
        PersonSearch.Exceptions.Evaluation.ReportException: If the file is missing or invalid.
    """
    path = Path(path)
    try:
        return _REPORT_LIST.validate_python(orjson.loads(path.read_bytes()))
    except (OSError, orjson.JSONDecodeError, ValidationError) as read_error:
        logger.error(f"Cannot read reports {path}: {read_error}")
        raise ReportException(f"Cannot read reports {path}: {read_error}") from read_error


def reports_table(reports: Sequence[ProtocolReport], title: str = "Person search") -> Table:
    table = Table(title=title)
    for column in ("protocol", "parameter", "mode", "mAP (%)", "rank-1 (%)", "det. AP (%)", "queries"):
        table.add_column(column, justify="right" if column != "protocol" else "left")
    for report in reports:
        table.add_row(
            report.protocol.value,
            report.parameter_label,
            report.mode.value,
            f"{100 * report.mAP:.1f}",
            f"{100 * report.rank1:.1f}",
            "-" if report.detection_ap is None else f"{100 * report.detection_ap:.1f}",
            str(report.num_queries),
        )
    return table
