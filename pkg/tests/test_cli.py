from pathlib import Path

import pytest
import yaml
from conftest import TINY_BACKBONE, TINY_DETECT, TINY_REID, TINY_SPEC

from PersonSearch.Cli import (
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    build_parser,
    compare_runs,
    deep_merge,
    parse_override,
    resolve_config,
    run,
)
from PersonSearch.Evaluation import read_reports, write_reports
from PersonSearch.Exceptions.Common import ConfigException
from PersonSearch.Exceptions.Evaluation import ReportException
from PersonSearch.ValidationModels.Evaluation import EvalMode, ProtocolKind, ProtocolReport

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"
AGGREGATED_CONFIG = DESK_CONFIG.with_name("aggregated.yaml")
OTHER_SPEC = TINY_SPEC.model_copy(update={"name": "tiny2", "hue_shift": 0.1, "noise": 0.05})


def tiny_config(tmp_path: Path, aggregated: bool = False) -> Path:
    """
    A run small enough to train and evaluate in seconds. The aggregated run adds a second
    domain whose detection data joins the first step.
    """
    domains = [TINY_SPEC, OTHER_SPEC] if aggregated else [TINY_SPEC]
    config = {
        "data": {
            "root": str(tmp_path / "data"),
            "domains": [spec.model_dump(mode="json") for spec in domains],
            "detection_domains": [spec.name for spec in domains],
            "reid_domain": "tiny",
            "sizes": {"detection_scenes": 4, "reid_scenes": 6, "test_scenes": 6, "min_people": 2, "max_people": 3},
        },
        "model": {
            "variant": "J3",
            "backbone": TINY_BACKBONE.model_dump(mode="json"),
            "detect": TINY_DETECT.model_dump(mode="json"),
            "reid": TINY_REID.model_dump(mode="json"),
        },
        "train": {
            "image_size": 64,
            "threads": 1,
            "detection": {"epochs": 1, "batch_size": 2, "base_lr": 0.01},
            "reid": {"semi_hard_epochs": 1, "batch_hard_epochs": 1, "base_lr": 0.001, "pk": {"P": 2, "K": 2}},
        },
        "eval": {"gallery_sizes": [3], "k_values": [1, 3]},
    }
    path = tmp_path / ("aggregated.yaml" if aggregated else "tiny.yaml")
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


def report(parameter: int, mAP: float = 0.5, mode: EvalMode = EvalMode.detected) -> ProtocolReport:
    return ProtocolReport(
        protocol=ProtocolKind.gallery,
        parameter=parameter,
        mAP=mAP,
        rank1=mAP,
        num_queries=4,
        num_gallery_images=parameter,
        mode=mode,
        model="J3-single",
        dataset="domA-test",
    )


class TestOverrides:
    def test_dotted_key_and_yaml_value(self):
        assert parse_override("model.variant=J2") == (["model", "variant"], "J2")
        assert parse_override("eval.gallery_sizes=[50, 100]") == (["eval", "gallery_sizes"], [50, 100])
        assert parse_override("train.seed=3") == (["train", "seed"], 3)

    @pytest.mark.parametrize("text", ["model.variant", "=J2", "model..variant=J2"])
    def test_malformed(self, text):
        with pytest.raises(ConfigException):
            parse_override(text)

    def test_deep_merge(self):
        merged = deep_merge({"a": {"b": 1, "c": 2}, "d": 1}, {"a": {"c": 3}}, {"d": {"e": 4}})
        assert merged == {"a": {"b": 1, "c": 3}, "d": {"e": 4}}


class TestResolveConfig:
    def test_layers(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("model:\n  variant: J2\ntrain:\n  seed: 7\n")
        config = resolve_config(path, ["model.variant=J4"], {"eval": {"gallery_sizes": [10]}})
        assert config.model.variant == "J4"
        assert config.train.seed == 7
        assert config.eval.gallery_sizes == (10,)

    def test_evaluation_settings_keep_the_run(self):
        base = resolve_config(None)
        assert resolve_config(None, ["eval.seed=5", "bench.repetitions=20"]).run_hash() == base.run_hash()
        assert resolve_config(None, ["model.variant=J2"]).run_hash() != base.run_hash()

    def test_uncapped_boxes_per_image(self):
        assert resolve_config(None, ["eval.k_values=[1, null]"]).eval.k_values == (1, None)
        assert build_parser().parse_args(["eval", "--k", "1,all"]).k == [1, None]
        with pytest.raises(ConfigException):
            resolve_config(None, ["eval.k_values=[0]"])

    def test_unknown_key(self):
        with pytest.raises(ConfigException):
            resolve_config(None, ["model.depth=3"])

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigException):
            resolve_config(path)

    def test_desk_preset_is_valid(self):
        config = resolve_config(DESK_CONFIG)
        assert config.train.image_size == 256
        assert config.train.reid.pk.batch_size == 64

    def test_aggregated_preset_only_widens_the_detection_data(self):
        single, aggregated = resolve_config(DESK_CONFIG), resolve_config(AGGREGATED_CONFIG)
        assert aggregated.data.detection_domains == ("domA", "domB")
        assert (single.data.regime, aggregated.data.regime) == ("single", "aggregated")
        widened = single.model_copy(update={"data": single.data.model_copy(update={"detection_domains": ("domA", "domB")})})
        assert widened.model_dump() == aggregated.model_dump()
        assert single.run_hash() != aggregated.run_hash()


class TestExitCodes:
    def test_help(self, capsys):
        assert run(["--help"]) == EXIT_OK

    def test_unknown_command(self, capsys):
        assert run(["train-everything"]) == EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert run(["eval", "--fast"]) == EXIT_USAGE
        assert run(["eval", "--k", "1,many"]) == EXIT_USAGE

    def test_invalid_override(self, tmp_path, capsys):
        assert run(["--runs-dir", str(tmp_path), "--set", "model.variant=J9", "train-det"]) == EXIT_USAGE

    def test_missing_data(self, tmp_path, capsys):
        argv = ["--runs-dir", str(tmp_path / "runs"), "--set", f"data.root={tmp_path / 'nothing'}", "train-det"]
        assert run(argv) == EXIT_FAILURE
        assert "gen-data" in capsys.readouterr().err

    def test_ground_truth_injection_needs_the_gallery_protocol(self, tmp_path, capsys):
        argv = ["--runs-dir", str(tmp_path), "eval", "--protocol", "boxes-per-image", "--gt-inject"]
        assert run(argv) == EXIT_USAGE


class TestReport:
    def test_side_by_side(self, tmp_path, capsys):
        for name, mAP in (("one", 0.5), ("two", 0.7)):
            write_reports([report(50, mAP), report(100, mAP)], tmp_path / name / "reports", "gallery-detected")
        table = compare_runs([tmp_path / "one", tmp_path / "two"])
        assert table.row_count == 2
        assert len(table.columns) == 4
        assert run(["report", str(tmp_path / "one"), str(tmp_path / "two")]) == EXIT_OK
        assert "70.0" in capsys.readouterr().out

    def test_detected_and_injected_columns(self, tmp_path):
        write_reports([report(50)], tmp_path / "run" / "reports", "gallery-detected")
        write_reports([report(50, 0.9, EvalMode.gt_injected)], tmp_path / "run" / "reports", "gallery-gt-injected")
        assert len(compare_runs([tmp_path / "run"]).columns) == 4

    def test_parameters_must_match(self, tmp_path, capsys):
        write_reports([report(50)], tmp_path / "one" / "reports", "gallery-detected")
        write_reports([report(100)], tmp_path / "two" / "reports", "gallery-detected")
        with pytest.raises(ReportException):
            compare_runs([tmp_path / "one", tmp_path / "two"])
        assert run(["report", str(tmp_path / "one"), str(tmp_path / "two")]) == EXIT_FAILURE

    def test_run_without_reports(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert run(["report", str(tmp_path / "empty")]) == EXIT_FAILURE


def test_tiny_run_end_to_end(tmp_path, capsys):
    runs = tmp_path / "runs"
    common = ["--config", str(tiny_config(tmp_path)), "--runs-dir", str(runs)]
    for command in (
        ["gen-data"],
        ["train-det"],
        ["build-cache"],
        ["train-reid"],
        ["train-reid", "--disjoint"],
        ["eval"],
        ["eval", "--gt-inject"],
        ["eval", "--protocol", "boxes-per-image"],
        ["eval", "--disjoint"],
    ):
        assert run([*common, *command]) == EXIT_OK, command

    (run_dir,) = [path for path in runs.iterdir() if path.is_dir()]
    assert (run_dir / "config.yaml").is_file()
    assert not (run_dir / ".lock").exists()
    assert {path.name for path in (run_dir / "checkpoints").iterdir()} == {"detection.pt", "reid.pt", "standalone.pt"}
    assert (run_dir / "cache" / "features.pt").is_file()
    assert len((run_dir / "metrics.jsonl").read_bytes().splitlines()) == 1 + 2 + 2

    stems = sorted(path.stem for path in (run_dir / "reports").glob("*.json"))
    assert stems == [
        "boxes-per-image-detected-J3-single-tiny",
        "gallery-detected-Disj-single-tiny",
        "gallery-detected-J3-single-tiny",
        "gallery-gt-injected-J3-single-tiny",
    ]
    injected = read_reports(run_dir / "reports" / "gallery-gt-injected-J3-single-tiny.json")
    assert injected[0].detection_ap is None
    sweep = read_reports(run_dir / "reports" / "boxes-per-image-detected-J3-single-tiny.json")
    assert [item.parameter for item in sweep] == [1, 3]

    checkpoint = run_dir / "checkpoints" / "detection.pt"
    written = checkpoint.stat().st_mtime_ns
    assert run([*common, "train-det"]) == EXIT_OK
    assert checkpoint.stat().st_mtime_ns == written
    assert run([*common, "report", str(run_dir)]) == EXIT_OK


def test_aggregated_tiny_run_evaluates_the_other_domain(tmp_path, capsys):
    runs = tmp_path / "runs"
    common = ["--config", str(tiny_config(tmp_path, aggregated=True)), "--runs-dir", str(runs)]
    for command in (["gen-data"], ["train-det"], ["build-cache"], ["train-reid"], ["eval", "--domain", "tiny2"]):
        assert run([*common, *command]) == EXIT_OK, command

    (run_dir,) = [path for path in runs.iterdir() if path.is_dir()]
    (report,) = read_reports(run_dir / "reports" / "gallery-detected-J3-aggregated-tiny2.json")
    assert report.model == "J3-aggregated"
    assert report.dataset == "tiny2-test"
    assert report.detection_ap is not None
    # one detection epoch over both domains, then the two re-ID phases
    assert len((run_dir / "metrics.jsonl").read_bytes().splitlines()) == 1 + 2


def test_other_benchmark_in_the_data_root(tmp_path, capsys):
    common = ["--config", str(tiny_config(tmp_path)), "--runs-dir", str(tmp_path / "runs")]
    assert run([*common, "gen-data"]) == EXIT_OK
    assert run([*common, "gen-data"]) == EXIT_OK
    assert run([*common, "--set", "data.seed=1", "gen-data"]) == EXIT_USAGE


def test_training_domains_share_the_benchmark(tmp_path, capsys):
    common = ["--config", str(tiny_config(tmp_path, aggregated=True)), "--runs-dir", str(tmp_path / "runs")]
    assert run([*common, "gen-data"]) == EXIT_OK
    marker = tmp_path / "data" / "benchmark.json"
    written = marker.stat().st_mtime_ns
    assert run([*common, "--set", "data.detection_domains=[tiny]", "gen-data"]) == EXIT_OK
    assert marker.stat().st_mtime_ns == written


@pytest.mark.slow
def test_desk_run_reaches_the_accuracy_targets(tmp_path, capsys):
    common = ["--config", str(DESK_CONFIG), "--runs-dir", str(tmp_path / "runs"), "--set", f"data.root={tmp_path / 'data'}"]
    for command in (["gen-data"], ["train-det"], ["build-cache"], ["train-reid"], ["eval"], ["eval", "--gt-inject"]):
        assert run([*common, *command]) == EXIT_OK, command
    (run_dir,) = [path for path in (tmp_path / "runs").iterdir() if path.is_dir()]
    detected = read_reports(run_dir / "reports" / "gallery-detected-J3-single-domA.json")[0]
    injected = read_reports(run_dir / "reports" / "gallery-gt-injected-J3-single-domA.json")[0]
    assert injected.mAP >= 0.9
    assert detected.mAP >= 0.75
    assert injected.mAP >= detected.mAP


@pytest.mark.slow
def test_aggregated_detection_data_helps_on_the_other_domain(tmp_path, capsys):
    results = {}
    for config in (DESK_CONFIG, AGGREGATED_CONFIG):
        runs = tmp_path / config.stem
        common = ["--config", str(config), "--runs-dir", str(runs), "--set", f"data.root={tmp_path / 'data'}"]
        for command in (["gen-data"], ["train-det"], ["build-cache"], ["train-reid"], ["eval", "--domain", "domB"]):
            assert run([*common, *command]) == EXIT_OK, command
        (run_dir,) = [path for path in runs.iterdir() if path.is_dir()]
        (results[config.stem],) = [
            read_reports(path)[0] for path in (run_dir / "reports").glob("gallery-detected-*-domB.json")
        ]
    single, aggregated = results["desk"], results["aggregated"]
    assert aggregated.detection_ap >= single.detection_ap + 0.05
    assert aggregated.mAP >= single.mAP + 0.05
