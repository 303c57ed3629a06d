"""
Provides the `person-search` command line.

Commands follow the experiment pipeline: `gen-data`, `train-det`, `build-cache`,
`train-reid`, `eval`, `bench`, and `report` to compare finished runs. Every command but
`report` resolves a `RunConfig` from the built-in defaults, an optional YAML file
(`--config`) and `--set section.key=value` flags, in that order of precedence. Artifacts go
to `<runs-dir>/<hash>/`, named by the hash of the data, model and train sections, where the
resolved configuration is archived as `config.yaml`.

A command whose artifact already exists is skipped unless `--force` is given. Diagnostics
go to standard error; tables go to standard output. Exit codes: 0 on success, 2 on a usage
or configuration error, 1 on a runtime failure.

Usage:
    ```shell
    person-search --config configs/desk.yaml gen-data
    person-search --config configs/desk.yaml train-det
    person-search --config configs/desk.yaml build-cache
    person-search --config configs/desk.yaml train-reid
    person-search --config configs/desk.yaml eval --protocol gallery --sizes 50,200
    person-search --config configs/desk.yaml bench --grid quick
    person-search report runs/0123456789ab runs/ba9876543210
    ```
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import orjson
import structlog
import yaml
from cytoolz import assoc_in, groupby, merge_with
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from PersonSearch.Bench import environment_manifest, run_grid, speedup_table, write_bench
from PersonSearch.Checkpoint import (
    load_cache,
    load_detection_checkpoint,
    load_joint,
    load_standalone_checkpoint,
    save_cache,
    save_detection_checkpoint,
    save_reid_checkpoint,
    save_standalone_checkpoint,
)
from PersonSearch.Dataset import ImageStore, load_manifest
from PersonSearch.Evaluation import (
    boxes_per_image_sweep,
    gallery_protocol_eval,
    gt_injection_eval,
    read_reports,
    reports_table,
    write_reports,
)
from PersonSearch.Exceptions.Common import ConfigException, PersonSearchException
from PersonSearch.Exceptions.Evaluation import ReportException
from PersonSearch.Exceptions.Training import TrainingException
from PersonSearch.Inference import DisjointSearcher, JointSearcher, Searcher
from PersonSearch.Lock import file_lock
from PersonSearch.Networks.Backbone import split_config
from PersonSearch.Synth import gen_benchmark
from PersonSearch.Training import (
    build_feature_cache,
    train_detection,
    train_reid,
    train_standalone_reid,
)
from PersonSearch.ValidationModels.Config import BenchConfig, RunConfig
from PersonSearch.ValidationModels.Evaluation import EvalMode, ProtocolKind, ProtocolReport

logger = structlog.get_logger()

EXIT_OK: int = 0
EXIT_FAILURE: int = 1
EXIT_USAGE: int = 2

COMMANDS: tuple[str, ...] = ("gen-data", "train-det", "build-cache", "train-reid", "eval", "bench", "report")


def configure_logging(verbose: bool = False) -> None:
    """
    Renders structlog events to standard error, at DEBUG level when `verbose`.
    """
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="%H:%M:%S"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(logging.DEBUG if verbose else logging.INFO),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def _int_list(text: str) -> list[int]:
    try:
        return [int(value) for value in text.split(",") if value]
    except ValueError as value_error:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from value_error


def _cap_list(text: str) -> list[int | None]:
    caps = [value.strip() for value in text.split(",") if value.strip()]
    try:
        return [None if cap == "all" else int(cap) for cap in caps]
    except ValueError as value_error:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers or 'all', got {text!r}") from value_error


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="person-search", description="Joint person detection and re-identification.")
    parser.add_argument("--config", type=Path, help="YAML run configuration layered over the defaults.")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration key, e.g. --set model.variant=J2. Values are parsed as YAML.",
    )
    parser.add_argument("--runs-dir", type=Path, default=Path("runs"), help="Parent of the run directories.")
    parser.add_argument("--force", action="store_true", help="Recompute artifacts that already exist.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", help="Generate the synthetic benchmark under data.root.")
    commands.add_parser("train-det", help="Train the backbone and detection head (step one).")
    commands.add_parser("build-cache", help="Pool the shared maps of every identity-labeled box.")
    train_reid_parser = commands.add_parser("train-reid", help="Train the re-ID branch on the cache (step two).")
    train_reid_parser.add_argument(
        "--disjoint", action="store_true", help="Train the standalone extractor of the disjoint baseline instead."
    )

    eval_parser = commands.add_parser("eval", help="Score the trained model on a test manifest.")
    eval_parser.add_argument("--protocol", choices=[kind.value for kind in ProtocolKind], help="Evaluation protocol.")
    eval_parser.add_argument("--sizes", type=_int_list, help="Gallery sizes, e.g. 50,200.")
    eval_parser.add_argument("--k", type=_cap_list, help="Boxes-per-image caps, e.g. 1,3,5,all.")
    eval_parser.add_argument("--gt-inject", action="store_true", help="Embed ground-truth boxes instead of detections.")
    eval_parser.add_argument("--disjoint", action="store_true", help="Evaluate the disjoint baseline.")
    eval_parser.add_argument("--domain", help="Test domain; defaults to eval.domain or data.reid_domain.")

    bench_parser = commands.add_parser("bench", help="Time the joint pipelines against the disjoint baseline.")
    bench_parser.add_argument("--grid", choices=["default", "quick"], default="default", help="Benchmark grid.")

    report_parser = commands.add_parser("report", help="Compare the reports of several runs.")
    report_parser.add_argument("run_dirs", nargs="+", type=Path, help="Run directories to compare.")
    return parser


def parse_override(text: str) -> tuple[list[str], Any]:
    """
    Splits `section.key=value` into a key path and a YAML-parsed value.

    Raises:
        PersonSearch.Exceptions.Common.ConfigException: If the flag is malformed.
    """
    key, separator, raw = text.partition("=")
    if not separator or not key or any(not part for part in key.split(".")):
        raise ConfigException(f"Malformed override {text!r}; expected SECTION.KEY=VALUE.")
    try:
        return key.split("."), yaml.safe_load(raw)
    except yaml.YAMLError as yaml_error:
        raise ConfigException(f"Cannot parse the value of {text!r}: {yaml_error}") from yaml_error


def deep_merge(*layers: dict[str, Any]) -> dict[str, Any]:
    """
    Merges dictionaries recursively; later layers win.
    """
    return merge_with(
        lambda values: deep_merge(*values) if all(isinstance(value, dict) for value in values) else values[-1],
        *layers,
    )


def resolve_config(config_path: Path | None, overrides: Sequence[str] = (), flags: dict[str, Any] | None = None) -> RunConfig:
    """
    Builds the run configuration: defaults < YAML file < `--set` overrides < command flags.

    Raises:
        PersonSearch.Exceptions.Common.ConfigException: If the file is unreadable or the
            resulting configuration is invalid.
    """
    layer: dict[str, Any] = {}
    if config_path is not None:
        try:
            layer = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as read_error:
            raise ConfigException(f"Cannot read configuration {config_path}: {read_error}") from read_error
        if not isinstance(layer, dict):
            raise ConfigException(f"Configuration {config_path} must be a mapping.")

    override_layer: dict[str, Any] = {}
    for text in overrides:
        path, value = parse_override(text)
        override_layer = assoc_in(override_layer, path, value)
    try:
        return RunConfig.model_validate(deep_merge(layer, override_layer, flags or {}))
    except ValidationError as validation_error:
        raise ConfigException(f"Invalid configuration: {validation_error}") from validation_error


def _command_flags(args: argparse.Namespace) -> dict[str, Any]:
    flags: dict[str, Any] = {}
    if args.command == "eval":
        if args.protocol is not None:
            flags = assoc_in(flags, ["eval", "protocol"], args.protocol)
        if args.sizes:
            flags = assoc_in(flags, ["eval", "gallery_sizes"], args.sizes)
        if args.k:
            flags = assoc_in(flags, ["eval", "k_values"], args.k)
        if args.domain is not None:
            flags = assoc_in(flags, ["eval", "domain"], args.domain)
    return flags


class Run:
    """
    The artifacts of one experiment, under `<runs-dir>/<hash>/`.

    Attributes:
        config (RunConfig): The resolved configuration.
        directory (Path): The run directory.
        force (bool): Whether existing artifacts are recomputed.
    """

    def __init__(self, config: RunConfig, runs_dir: Path, force: bool = False) -> None:
        self.config = config
        self.directory = runs_dir / config.run_hash()
        self.force = force
        self.data_root = Path(config.data.root)
        self.store = ImageStore(self.data_root)

    @property
    def detection_path(self) -> Path:
        return self.directory / "checkpoints" / "detection.pt"

    @property
    def reid_path(self) -> Path:
        return self.directory / "checkpoints" / "reid.pt"

    @property
    def standalone_path(self) -> Path:
        return self.directory / "checkpoints" / "standalone.pt"

    @property
    def cache_path(self) -> Path:
        return self.directory / "cache" / "features.pt"

    @property
    def metrics_path(self) -> Path:
        return self.directory / "metrics.jsonl"

    @property
    def reports_dir(self) -> Path:
        return self.directory / "reports"

    @property
    def model_label(self) -> str:
        return f"{self.config.model.variant}-{self.config.data.regime}"

    def archive(self) -> None:
        """
        Writes `config.yaml` on the run's first command.
        """
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / "config.yaml"
        if not path.exists():
            path.write_text(yaml.safe_dump(self.config.model_dump(mode="json"), sort_keys=True), encoding="utf-8")

    def skip(self, artifact: Path) -> bool:
        if artifact.exists() and not self.force:
            logger.info(f"{artifact} already exists; skipping (use --force to recompute).")
            return True
        return False

    def require(self, artifact: Path, producer: str) -> None:
        if not artifact.exists():
            logger.error(f"Missing {artifact}; run `{producer}` first.")
            raise TrainingException(f"Missing {artifact}; run `{producer}` first.")

    def manifest(self, domain: str, split: str):
        path = self.data_root / f"{domain}-{split}.jsonl"
        self.require(path, "gen-data")
        return load_manifest(path)


def cmd_gen_data(run: Run) -> None:
    data = run.config.data
    marker = run.data_root / "benchmark.json"
    # The benchmark is defined by its domains, sizes and seed; runs that only pick other
    # training domains share it.
    payload = orjson.dumps(data.model_dump(mode="json", include={"domains", "sizes", "seed"}), option=orjson.OPT_SORT_KEYS)
    if marker.exists() and not run.force:
        if marker.read_bytes() == payload:
            logger.info(f"{run.data_root} already holds this benchmark; skipping.")
            return
        raise ConfigException(f"{run.data_root} holds another benchmark; pass --force or change data.root.")
    gen_benchmark(data.domains, data.sizes, data.seed, run.data_root)
    marker.write_bytes(payload)


def cmd_train_det(run: Run) -> None:
    if run.skip(run.detection_path):
        return
    config = run.config
    manifests = [run.manifest(domain, "detection") for domain in config.data.detection_domains]
    model, _ = train_detection(
        manifests,
        split_config(config.model.variant),
        config.train,
        run.store,
        config.model.backbone,
        config.model.detect,
        config.model.reid,
        metrics_path=run.metrics_path,
    )
    save_detection_checkpoint(model, run.detection_path)


def cmd_build_cache(run: Run) -> None:
    if run.skip(run.cache_path):
        return
    run.require(run.detection_path, "train-det")
    model = load_detection_checkpoint(run.detection_path)
    manifest = run.manifest(run.config.data.reid_domain, "reid")
    save_cache(build_feature_cache(model, manifest, split_config(run.config.model.variant), run.store), run.cache_path)


def cmd_train_reid(run: Run, disjoint: bool) -> None:
    config = run.config
    if disjoint:
        if run.skip(run.standalone_path):
            return
        manifest = run.manifest(config.data.reid_domain, "reid")
        extractor, _ = train_standalone_reid(
            manifest, config.train, run.store, config.model.backbone, config.model.reid, metrics_path=run.metrics_path
        )
        save_standalone_checkpoint(extractor, run.standalone_path)
        return
    if run.skip(run.reid_path):
        return
    run.require(run.cache_path, "build-cache")
    run.require(run.detection_path, "train-det")
    model = load_detection_checkpoint(run.detection_path)
    model, _ = train_reid(
        model, load_cache(run.cache_path), split_config(config.model.variant), config.train, run.metrics_path
    )
    save_reid_checkpoint(model, run.reid_path)


def _searcher(run: Run, disjoint: bool) -> tuple[Searcher, str]:
    run.require(run.detection_path, "train-det")
    max_per_image = run.config.model.detect.max_per_image
    if disjoint:
        run.require(run.standalone_path, "train-reid --disjoint")
        searcher = DisjointSearcher(
            load_detection_checkpoint(run.detection_path), load_standalone_checkpoint(run.standalone_path), max_per_image
        )
        return searcher, f"Disj-{run.config.data.regime}"
    run.require(run.reid_path, "train-reid")
    return JointSearcher(load_joint(run.detection_path, run.reid_path), max_per_image), run.model_label


def cmd_eval(run: Run, gt_inject: bool, disjoint: bool, console: Console) -> None:
    evaluation = run.config.eval
    if gt_inject and evaluation.protocol is ProtocolKind.boxes_per_image:
        raise ConfigException("--gt-inject applies to the gallery protocol only.")
    searcher, label = _searcher(run, disjoint)
    domain = run.config.test_domain
    manifest = run.manifest(domain, "test")
    mode = EvalMode.gt_injected if gt_inject else EvalMode.detected

    if evaluation.protocol is ProtocolKind.boxes_per_image:
        sweep = boxes_per_image_sweep(
            searcher, manifest, run.store, evaluation.k_values, evaluation.iou_thresh, evaluation.seed, label
        )
        reports = list(sweep.reports)
        logger.info(f"Best cap: {sweep.best.parameter_label} boxes per image, mAP {sweep.best.mAP:.4f}.")
    elif gt_inject:
        reports = gt_injection_eval(
            searcher, manifest, run.store, evaluation.gallery_sizes, evaluation.iou_thresh, evaluation.seed, label
        )
    else:
        reports = gallery_protocol_eval(
            searcher, manifest, run.store, evaluation.gallery_sizes, evaluation.iou_thresh, evaluation.seed, mode, label
        )
    write_reports(reports, run.reports_dir, f"{evaluation.protocol}-{mode}-{label}-{domain}")
    console.print(reports_table(reports, title=f"{label} on {manifest.name}"))


def cmd_bench(run: Run, grid: str, runs_dir: Path, console: Console) -> None:
    config = run.config.bench if grid == "default" else BenchConfig.quick().model_copy(update={"seed": run.config.bench.seed})
    report = run_grid(config, run.config.model, lock_path=runs_dir / ".bench.lock", threads=run.config.train.threads)
    write_bench(report, environment_manifest(), run.directory / "bench")
    console.print(speedup_table(report))


def _column_label(run_dir: Path, report: ProtocolReport) -> str:
    return f"{run_dir.name} {report.model} {report.dataset} ({report.mode})"


def compare_runs(run_dirs: Sequence[Path]) -> Table:
    """
    Lays the reports of several runs side by side: one row per protocol parameter, one
    mAP / Rank-1 column per run, model, dataset and mode, so detected and GT-injected
    results sit next to each other.

    Raises:
        PersonSearch.Exceptions.Evaluation.ReportException: If a run has no report or two
            runs scored one protocol at different parameters.
    """
    columns: dict[str, dict[tuple[str, str], ProtocolReport]] = {}
    parameters: dict[str, set[str]] = {}
    owners: dict[str, Path] = {}
    for run_dir in run_dirs:
        files = sorted((run_dir / "reports").glob("*.json"))
        if not files:
            logger.error(f"{run_dir} holds no report.")
            raise ReportException(f"{run_dir} holds no report.")
        reports = [report for path in files for report in read_reports(path)]
        for protocol, protocol_reports in groupby(lambda report: report.protocol.value, reports).items():
            labels = {report.parameter_label for report in protocol_reports}
            if protocol in parameters and parameters[protocol] != labels:
                logger.error(
                    f"{run_dir} scored {protocol} at {sorted(labels)}, {owners[protocol]} at {sorted(parameters[protocol])}."
                )
                raise ReportException(
                    f"{run_dir} scored {protocol} at {sorted(labels)}, {owners[protocol]} at {sorted(parameters[protocol])}."
                )
            parameters.setdefault(protocol, labels)
            owners.setdefault(protocol, run_dir)
        for report in reports:
            columns.setdefault(_column_label(run_dir, report), {})[(report.protocol.value, report.parameter_label)] = report

    rows = sorted(
        {key for column in columns.values() for key in column},
        key=lambda key: (key[0], int(key[1]) if key[1].isdigit() else -1),
    )
    table = Table(title="mAP / Rank-1 (%)")
    table.add_column("protocol")
    table.add_column("parameter", justify="right")
    for label in columns:
        table.add_column(label, justify="right")
    for protocol, parameter in rows:
        cells = []
        for column in columns.values():
            report = column.get((protocol, parameter))
            cells.append("-" if report is None else f"{100 * report.mAP:.1f} / {100 * report.rank1:.1f}")
        table.add_row(protocol, parameter, *cells)
    return table


def run(argv: Sequence[str] | None = None) -> int:
    """
    Runs one command and returns its exit code.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return EXIT_OK if exit_request.code in (0, None) else EXIT_USAGE
    configure_logging(args.verbose)
    console = Console()

    try:
        if args.command == "report":
            console.print(compare_runs(args.run_dirs))
            return EXIT_OK

        current = Run(resolve_config(args.config, args.overrides, _command_flags(args)), args.runs_dir, args.force)
        current.archive()
        with file_lock(current.directory / ".lock"):
            logger.info(f"{args.command} in {current.directory}")
            match args.command:
                case "gen-data":
                    cmd_gen_data(current)
                case "train-det":
                    cmd_train_det(current)
                case "build-cache":
                    cmd_build_cache(current)
                case "train-reid":
                    cmd_train_reid(current, args.disjoint)
                case "eval":
                    cmd_eval(current, args.gt_inject, args.disjoint, console)
                case "bench":
                    cmd_bench(current, args.grid, args.runs_dir, console)
    except ConfigException as config_error:
        logger.error(str(config_error))
        return EXIT_USAGE
    except PersonSearchException as failure:
        logger.error(f"{args.command} failed: {failure}")
        return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))
