"""
Provides the runtime benchmark of the joint pipelines against the disjoint baseline, and
the analytic multiply-add count it is checked against.

Every pipeline runs its full detection path on fixture scenes holding an exact number of
people and embeds exactly those people's ground-truth boxes, so per-person times compare
like with like. The joint pipelines pay the shared stages once per image and a small tail
per person; the disjoint baseline pays a full extractor per person.

Usage:
    ```python
    from PersonSearch.Bench import run_grid, speedup_table
    from PersonSearch.ValidationModels.Config import BenchConfig, ModelConfig

    report = run_grid(BenchConfig(), ModelConfig(), lock_path="runs/.bench.lock")
    console.print(speedup_table(report))
    ```
"""

import math
import platform
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np
import orjson
import structlog
import torch
from cytoolz import groupby
from rich.table import Table

from PersonSearch.Dataset import pixels_to_tensor
from PersonSearch.Exceptions.Bench import BenchException, GridMismatchException
from PersonSearch.Inference import DisjointSearcher, JointSearcher, Searcher
from PersonSearch.Lock import file_lock
from PersonSearch.Networks.Backbone import split_config
from PersonSearch.Networks.Model import JointModel, StandaloneExtractor
from PersonSearch.Synth import gen_scene
from PersonSearch.Training import pinned_threads
from PersonSearch.ValidationModels.Backbone import (
    STAGE_ORDER,
    BackboneConfig,
    SplitVariant,
    StageName,
)
from PersonSearch.ValidationModels.Bench import (
    MIN_REPETITIONS,
    BenchPoint,
    EnvironmentManifest,
    PipelineId,
    SpeedupRatio,
    SpeedupReport,
)
from PersonSearch.ValidationModels.Config import BenchConfig, ModelConfig
from PersonSearch.ValidationModels.DataModel import BoundingBox
from PersonSearch.ValidationModels.Detect import DetectConfig
from PersonSearch.ValidationModels.Reid import ReidConfig
from PersonSearch.ValidationModels.Synth import DomainSpec

logger = structlog.get_logger()

# A timed run must last this many timer ticks.
MIN_TIMER_TICKS: int = 1000


def _conv_macs(out_h: int, out_w: int, in_channels: int, out_channels: int, kernel: int) -> int:
    return out_h * out_w * out_channels * in_channels * kernel * kernel


def stage_macs(stage: StageName, config: BackboneConfig, height: int, width: int) -> tuple[int, int, int]:
    """
    Multiply-adds of one stage on a `height x width` input.

    Returns:
        tuple[int, int, int]: The count and the output height and width.
    """
    index = STAGE_ORDER.index(stage)
    in_channels = 3 if index == 0 else config.widths[index - 1]
    out_channels = config.widths[index]
    out_h, out_w = math.ceil(height / 2), math.ceil(width / 2)
    macs = _conv_macs(out_h, out_w, in_channels, out_channels, 3)
    if index > 0:
        macs += _conv_macs(out_h, out_w, out_channels, out_channels, 3)
        macs += _conv_macs(out_h, out_w, in_channels, out_channels, 1)
    return macs, out_h, out_w


def _stages_macs(stages: Sequence[StageName], config: BackboneConfig, height: int, width: int) -> tuple[int, int, int]:
    total = 0
    for stage in stages:
        macs, height, width = stage_macs(stage, config, height, width)
        total += macs
    return total, height, width


def head_macs(detect: DetectConfig, in_channels: int, height: int, width: int) -> int:
    """
    Multiply-adds of the classification and regression subnets on a C5 map.
    """
    total = 0
    for out_channels in (detect.anchors_per_cell, detect.anchors_per_cell * 4):
        channels = in_channels
        for _ in range(detect.head_depth):
            total += _conv_macs(height, width, channels, detect.head_width, 3)
            channels = detect.head_width
        total += _conv_macs(height, width, channels, out_channels, 3)
    return total


def count_flops(
    pipeline: PipelineId,
    people_per_image: int,
    image_size: tuple[int, int] = (512, 512),
    backbone: BackboneConfig = BackboneConfig(),
    detect: DetectConfig = DetectConfig(),
    reid: ReidConfig = ReidConfig(),
) -> float:
    """
    Analytic multiply-adds per person of one pipeline.

    The detection path (C1..C5 and the head) is counted once per image and shared among its
    people. Each person then costs the re-ID tail on a pooled region for the joint variants,
    or a full C1..C5 extractor on a resized crop for the disjoint baseline, plus the
    projection.

    Raises:
        PersonSearch.Exceptions.Bench.BenchException: If `people_per_image` is not positive.
    """
    if people_per_image < 1:
        raise BenchException(f"People per image must be positive, got {people_per_image}.")
    height, width = image_size
    detection, c5_h, c5_w = _stages_macs(STAGE_ORDER, backbone, height, width)
    detection += head_macs(detect, backbone.widths[-1], c5_h, c5_w)

    if pipeline.is_joint:
        split = split_config(SplitVariant(pipeline.value))
        person, _, _ = _stages_macs(split.tail_sources, backbone, reid.pool_height, reid.pool_width)
    else:
        person, _, _ = _stages_macs(STAGE_ORDER, backbone, reid.crop_height, reid.crop_width)
    person += backbone.widths[-1] * reid.embedding_dim
    return detection / people_per_image + person


def bench_fixtures(
    people_per_image: int,
    count: int,
    image_size: int,
    seed: int,
) -> tuple[torch.Tensor, list[list[BoundingBox]]]:
    """
    Square synthetic scenes holding exactly `people_per_image` people each.

    Returns:
        tuple[torch.Tensor, list[list[BoundingBox]]]: Images (count, 3, S, S) and their boxes.
    """
    spec = DomainSpec(
        name="bench",
        image_width=image_size,
        image_height=image_size,
        person_height=(0.12 * image_size, 0.24 * image_size),
    )
    images, boxes = [], []
    for index in range(count):
        record, pixels = gen_scene(spec, people_per_image, [seed, people_per_image, index])
        images.append(pixels_to_tensor(pixels))
        boxes.append(record.boxes)
    return torch.stack(images), boxes


def bench_searchers(cfg: ModelConfig, seed: int) -> dict[PipelineId, Searcher]:
    """
    Seeded untrained models for every pipeline. Timing does not depend on the weights and
    every variant starts from the same detection weights.
    """
    searchers: dict[PipelineId, Searcher] = {}
    for variant in SplitVariant:
        model = JointModel(split_config(variant), cfg.backbone, cfg.detect, cfg.reid, seed=seed).eval()
        searchers[PipelineId(variant.value)] = JointSearcher(model)
    detector = JointModel(split_config(SplitVariant.J4), cfg.backbone, cfg.detect, cfg.reid, seed=seed).eval()
    extractor = StandaloneExtractor(cfg.backbone, cfg.reid, seed=seed).eval()
    searchers[PipelineId.Disj] = DisjointSearcher(detector, extractor)
    return searchers


def time_pipeline(
    pipeline: PipelineId,
    searcher: Searcher,
    images: torch.Tensor,
    boxes: Sequence[Sequence[BoundingBox]],
    batch_size: int,
    people_per_image: int,
    repetitions: int = MIN_REPETITIONS,
    warmup: int = 5,
    flops_per_person: float = 0.0,
) -> BenchPoint:
    """
    Times one pipeline on the first `batch_size` fixture images.

    `warmup` runs are discarded, then every repetition times one batch with the
    performance counter; times are divided by the people in the batch.

    Raises:
        PersonSearch.Exceptions.Bench.BenchException: If the fixtures do not hold exactly
            `people_per_image` people, there are fewer than `batch_size` images, fewer than
            the minimum repetitions are asked, or the run is too short for the timer.
    """
    if repetitions < MIN_REPETITIONS:
        raise BenchException(f"At least {MIN_REPETITIONS} repetitions are required, got {repetitions}.")
    if int(images.shape[0]) < batch_size:
        raise BenchException(f"{images.shape[0]} fixture images cannot fill a batch of {batch_size}.")
    batch_boxes = [list(image_boxes) for image_boxes in boxes[:batch_size]]
    if any(len(image_boxes) != people_per_image for image_boxes in batch_boxes):
        logger.error(f"Fixture scenes must hold exactly {people_per_image} people each.")
        raise BenchException(f"Fixture scenes must hold exactly {people_per_image} people each.")

    batch = images[:batch_size].contiguous()
    for _ in range(warmup):
        searcher.search_batch(batch, boxes=batch_boxes)
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        searcher.search_batch(batch, boxes=batch_boxes)
        samples.append(time.perf_counter_ns() - start)

    resolution_ns = time.get_clock_info("perf_counter").resolution * 1e9
    if min(samples) <= 0 or sum(samples) < MIN_TIMER_TICKS * resolution_ns:
        logger.error(f"{pipeline} runs too fast for the timer; increase repetitions or people per image.")
        raise BenchException(f"{pipeline} runs too fast for the timer; increase repetitions or people per image.")

    per_person_ms = np.asarray(samples, dtype=np.float64) / 1e6 / (batch_size * people_per_image)
    point = BenchPoint(
        pipeline=pipeline,
        batch_size=batch_size,
        people_per_image=people_per_image,
        mean_ms=float(per_person_ms.mean()),
        median_ms=float(np.median(per_person_ms)),
        std_ms=float(per_person_ms.std()),
        repetitions=repetitions,
        flops_per_person=flops_per_person,
    )
    logger.debug(f"{pipeline} batch {batch_size}, {people_per_image} people: {point.median_ms:.3f} ms/person")
    return point


def speedup_report(points: Sequence[BenchPoint]) -> SpeedupReport:
    """
    Pairs every joint point with the disjoint point of the same grid cell.

    Ratios are disjoint over joint median per-person time; above 1 the joint pipeline is
    faster.

    Raises:
        PersonSearch.Exceptions.Bench.GridMismatchException: If `Disj` is missing, a cell is
            repeated or the pipelines cover different grids.
    """
    by_pipeline = groupby(lambda point: point.pipeline, points)
    if PipelineId.Disj not in by_pipeline:
        logger.error("The disjoint baseline is missing from the benchmark points.")
        raise GridMismatchException("The disjoint baseline is missing from the benchmark points.")
    grids = {}
    for pipeline, pipeline_points in by_pipeline.items():
        cells = [point.cell for point in pipeline_points]
        if len(set(cells)) != len(cells):
            raise GridMismatchException(f"{pipeline} repeats a (batch, people) cell.")
        grids[pipeline] = {point.cell: point for point in pipeline_points}
    reference = set(grids[PipelineId.Disj])
    for pipeline, grid in grids.items():
        if set(grid) != reference:
            logger.error(f"{pipeline} covers {sorted(grid)}, the baseline covers {sorted(reference)}.")
            raise GridMismatchException(f"{pipeline} covers {sorted(grid)}, the baseline covers {sorted(reference)}.")

    ratios = [
        SpeedupRatio(
            pipeline=pipeline,
            batch_size=cell[0],
            people_per_image=cell[1],
            ratio=grids[PipelineId.Disj][cell].median_ms / grids[pipeline][cell].median_ms,
        )
        for pipeline in PipelineId
        if pipeline.is_joint and pipeline in grids
        for cell in sorted(reference)
    ]
    ordered = [grids[pipeline][cell] for pipeline in PipelineId if pipeline in grids for cell in sorted(reference)]
    return SpeedupReport(points=tuple(ordered), ratios=tuple(ratios))


def run_grid(
    cfg: BenchConfig,
    model: ModelConfig = ModelConfig(),
    lock_path: str | Path | None = None,
    threads: int | None = 1,
) -> SpeedupReport:
    """
    Times every pipeline over the (batch size, people per image) grid of `cfg`.

    The harness holds `lock_path` while running, so benchmarks never overlap.
    """
    lock = file_lock(lock_path) if lock_path is not None else nullcontext()
    with lock, pinned_threads(threads), torch.no_grad():
        searchers = bench_searchers(model, cfg.seed)
        points = []
        for people in cfg.people_counts:
            images, boxes = bench_fixtures(people, max(cfg.batch_sizes), cfg.image_size, cfg.seed)
            for pipeline, searcher in searchers.items():
                flops = count_flops(
                    pipeline, people, (cfg.image_size, cfg.image_size), model.backbone, model.detect, model.reid
                )
                for batch_size in cfg.batch_sizes:
                    points.append(
                        time_pipeline(
                            pipeline, searcher, images, boxes, batch_size, people, cfg.repetitions, cfg.warmup, flops
                        )
                    )
            logger.info(f"Timed {len(searchers)} pipelines at {people} people per image.")
    return speedup_report(points)


def environment_manifest() -> EnvironmentManifest:
    return EnvironmentManifest(
        python=platform.python_version(),
        platform=platform.platform(),
        torch=torch.__version__,
        numpy=np.__version__,
        device="cpu",
        threads=torch.get_num_threads(),
        interop_threads=torch.get_num_interop_threads(),
        mkldnn=torch.backends.mkldnn.is_available(),
        openmp=torch.backends.openmp.is_available(),
        debug_build=bool(torch.version.debug),
    )


def write_bench(report: SpeedupReport, environment: EnvironmentManifest, directory: str | Path) -> Path:
    """
    Writes `bench.json` (points and ratios), `bench.tsv` (one row per point) and
    `environment.json`.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "bench.json").write_bytes(orjson.dumps(report.model_dump(mode="json"), option=orjson.OPT_INDENT_2))
    (directory / "environment.json").write_bytes(
        orjson.dumps(environment.model_dump(mode="json"), option=orjson.OPT_INDENT_2)
    )
    columns = ("pipeline", "batch_size", "people_per_image", "mean_ms", "median_ms", "std_ms", "repetitions", "flops_per_person")
    rows = ["\t".join(columns)]
    rows += ["\t".join(str(point.model_dump(mode="json")[column]) for column in columns) for point in report.points]
    (directory / "bench.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    logger.info(f"Wrote {report.cells} benchmark cells to {directory}.")
    return directory / "bench.json"


def speedup_table(report: SpeedupReport) -> Table:
    """
    Median ms per person, one row per pipeline and one column per (batch, people) cell,
    followed by the disjoint/joint ratios.
    """
    cells = sorted({point.cell for point in report.points})
    table = Table(title="Time per person (ms)")
    table.add_column("pipeline")
    for batch_size, people in cells:
        table.add_column(f"b={batch_size} / {people}p", justify="right")
    for pipeline, points in groupby(lambda point: point.pipeline, report.points).items():
        grid = {point.cell: point for point in points}
        table.add_row(pipeline.value, *(f"{grid[cell].median_ms:.2f}" for cell in cells))
    for pipeline, ratios in groupby(lambda ratio: ratio.pipeline, report.ratios).items():
        grid = {(ratio.batch_size, ratio.people_per_image): ratio for ratio in ratios}
        table.add_row(f"Disj/{pipeline.value}", *(f"{grid[cell].ratio:.2f}x" for cell in cells))
    return table
