import orjson
import pytest
import torch
from conftest import TINY_BACKBONE, TINY_DETECT, TINY_REID, tiny_model
from torch import nn

from PersonSearch.Bench import (
    bench_fixtures,
    bench_searchers,
    count_flops,
    environment_manifest,
    run_grid,
    speedup_report,
    speedup_table,
    time_pipeline,
    write_bench,
)
from PersonSearch.Exceptions.Bench import BenchException, GridMismatchException
from PersonSearch.Inference import DisjointSearcher, JointSearcher
from PersonSearch.Networks.Model import StandaloneExtractor
from PersonSearch.ValidationModels.Bench import BenchPoint, PipelineId
from PersonSearch.ValidationModels.Config import BenchConfig, ModelConfig

TINY_MODEL = ModelConfig(backbone=TINY_BACKBONE, detect=TINY_DETECT, reid=TINY_REID)


def point(pipeline: PipelineId, batch_size: int, people: int, median_ms: float) -> BenchPoint:
    return BenchPoint(
        pipeline=pipeline,
        batch_size=batch_size,
        people_per_image=people,
        mean_ms=median_ms,
        median_ms=median_ms,
        std_ms=0.0,
        repetitions=10,
        flops_per_person=1.0,
    )


def grid(pipelines=tuple(PipelineId), batch_sizes=(1, 4, 8), people_counts=(5, 20)) -> list[BenchPoint]:
    return [
        point(pipeline, batch_size, people, 2.0 if pipeline is PipelineId.Disj else 1.0)
        for pipeline in pipelines
        for batch_size in batch_sizes
        for people in people_counts
    ]


class MacCounter:
    """
    Counts the multiply-adds of every convolution and linear layer through forward hooks.
    """

    def __init__(self, *modules: nn.Module) -> None:
        self.macs = 0
        self.handles = [
            layer.register_forward_hook(self.hook)
            for module in modules
            for layer in module.modules()
            if isinstance(layer, (nn.Conv2d, nn.Linear))
        ]

    def hook(self, layer: nn.Module, _inputs, output: torch.Tensor) -> None:
        if isinstance(layer, nn.Conv2d):
            kernel_h, kernel_w = layer.kernel_size
            self.macs += output.numel() * layer.in_channels // layer.groups * kernel_h * kernel_w
        else:
            self.macs += output.numel() * layer.in_features


class TestFlops:
    def test_ordering(self):
        flops = {pipeline: count_flops(pipeline, 5) for pipeline in PipelineId}
        assert flops[PipelineId.J4] <= flops[PipelineId.J3] <= flops[PipelineId.J2] < flops[PipelineId.Disj]

    def test_detection_cost_is_shared_among_people(self):
        one, two, four = (count_flops(PipelineId.J3, people) for people in (1, 2, 4))
        assert one - two == pytest.approx(2 * (two - four))
        assert count_flops(PipelineId.J3, 10**9) == pytest.approx(one - 2 * (one - two), rel=1e-6)

    def test_people_must_be_positive(self):
        with pytest.raises(BenchException):
            count_flops(PipelineId.J2, 0)

    @pytest.mark.parametrize("variant", ["J2", "J3", "J4"])
    def test_joint_count_matches_the_layers_run(self, variant, image):
        model = tiny_model(variant)
        boxes = bench_fixtures(3, 1, 64, seed=0)[1][0]
        counter = MacCounter(model)
        with torch.no_grad():
            JointSearcher(model).search(image, boxes=boxes)
        expected = 3 * count_flops(PipelineId(variant), 3, (64, 64), TINY_BACKBONE, TINY_DETECT, TINY_REID)
        assert counter.macs == pytest.approx(expected)

    def test_disjoint_count_matches_the_layers_run(self, image):
        detector = tiny_model("J4")
        extractor = StandaloneExtractor(TINY_BACKBONE, TINY_REID).eval()
        boxes = bench_fixtures(2, 1, 64, seed=0)[1][0]
        counter = MacCounter(detector, extractor)
        with torch.no_grad():
            DisjointSearcher(detector, extractor).search(image, boxes=boxes)
        expected = 2 * count_flops(PipelineId.Disj, 2, (64, 64), TINY_BACKBONE, TINY_DETECT, TINY_REID)
        assert counter.macs == pytest.approx(expected)


class TestSpeedupReport:
    def test_one_ratio_per_joint_pipeline_and_cell(self):
        report = speedup_report(grid())
        assert report.cells == 24
        assert len(report.ratios) == 18
        assert all(ratio.ratio == pytest.approx(2.0) for ratio in report.ratios)
        assert {ratio.pipeline for ratio in report.ratios} == {PipelineId.J2, PipelineId.J3, PipelineId.J4}

    def test_baseline_is_required(self):
        with pytest.raises(GridMismatchException, match="disjoint"):
            speedup_report(grid(pipelines=(PipelineId.J2, PipelineId.J3)))

    def test_grids_must_agree(self):
        points = grid() + [point(PipelineId.J2, 16, 5, 1.0)]
        with pytest.raises(GridMismatchException):
            speedup_report(points)

    def test_repeated_cell(self):
        with pytest.raises(GridMismatchException, match="repeats"):
            speedup_report(grid() + [point(PipelineId.J3, 1, 5, 1.0)])

    def test_table(self):
        table = speedup_table(speedup_report(grid(batch_sizes=(1,), people_counts=(5,))))
        assert table.row_count == 4 + 3
        assert len(table.columns) == 2


class TestTiming:
    def test_fixtures_hold_the_requested_people(self):
        images, boxes = bench_fixtures(4, 3, 128, seed=1)
        assert images.shape == (3, 3, 128, 128)
        assert [len(image_boxes) for image_boxes in boxes] == [4, 4, 4]

    def test_point(self):
        images, boxes = bench_fixtures(2, 2, 64, seed=0)
        result = time_pipeline(PipelineId.J3, JointSearcher(tiny_model()), images, boxes, 2, 2, warmup=1, flops_per_person=5.0)
        assert result.cell == (2, 2)
        assert result.repetitions == 10
        assert result.median_ms > 0.0
        assert result.flops_per_person == 5.0

    def test_too_few_repetitions(self):
        images, boxes = bench_fixtures(2, 1, 64, seed=0)
        with pytest.raises(BenchException, match="repetitions"):
            time_pipeline(PipelineId.J3, JointSearcher(tiny_model()), images, boxes, 1, 2, repetitions=3)

    def test_batch_larger_than_the_fixtures(self):
        images, boxes = bench_fixtures(2, 1, 64, seed=0)
        with pytest.raises(BenchException, match="batch"):
            time_pipeline(PipelineId.J3, JointSearcher(tiny_model()), images, boxes, 2, 2)

    def test_people_count_mismatch(self):
        images, boxes = bench_fixtures(2, 1, 64, seed=0)
        with pytest.raises(BenchException, match="exactly"):
            time_pipeline(PipelineId.J3, JointSearcher(tiny_model()), images, boxes, 1, 3)

    def test_baseline_detects_like_j4(self):
        searchers = bench_searchers(TINY_MODEL, seed=0)
        assert set(searchers) == set(PipelineId)
        assert searchers[PipelineId.Disj].detector.split.variant == "J4"
        checksums = {searcher.detector.detection_checksum() for searcher in searchers.values()}
        assert len(checksums) == 1

    def test_grid_run_and_files(self, tmp_path):
        cfg = BenchConfig(batch_sizes=(1, 2), people_counts=(2,), image_size=64, warmup=1)
        report = run_grid(cfg, TINY_MODEL, lock_path=tmp_path / ".bench.lock")
        assert report.cells == 8
        assert len(report.ratios) == 6
        assert not (tmp_path / ".bench.lock").exists()

        path = write_bench(report, environment_manifest(), tmp_path / "bench")
        assert orjson.loads(path.read_bytes())["ratios"][0]["pipeline"] == "J2"
        assert len((tmp_path / "bench" / "bench.tsv").read_text().splitlines()) == 9
        assert orjson.loads((tmp_path / "bench" / "environment.json").read_bytes())["device"] == "cpu"


@pytest.mark.slow
def test_joint_model_outpaces_the_baseline_on_crowded_scenes():
    report = run_grid(BenchConfig(batch_sizes=(8,), people_counts=(20,), repetitions=10))
    ratios = {ratio.pipeline: ratio.ratio for ratio in report.ratios}
    assert ratios[PipelineId.J3] >= 1.4
    medians = {point.pipeline: point.median_ms for point in report.points}
    assert medians[PipelineId.J4] <= medians[PipelineId.J3] <= medians[PipelineId.J2] < medians[PipelineId.Disj]
