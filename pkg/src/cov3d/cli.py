"""
Command-line entry point: `cov3d <command> [options]`.

Commands:
    gen-synthetic  Write a seeded synthetic dataset and print its manifest path.
    train          Train the slice filter, the segmenter, detection runs or
                   severity (variant, run) pairs.
    predict        Per-model and ensemble-averaged probabilities for a split.
    evaluate       Macro F1 report with bootstrap interval and member rows.

Exit codes: 0 success (including "skipped"), 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import anyio
import numpy as np
import orjson
from pydantic import BaseModel, Field

from cov3d.checkpoint import (
    ModelCheckpoint,
    checkpoint_paths,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from cov3d.config import RunConfig, load_run_config, run_config_from_mapping
from cov3d.data.ground_truth import (
    dataset_segmentation_pairs,
    load_labeled_slices,
    load_segmentation_pairs,
    read_pair_listing,
)
from cov3d.data.manifest import DetectionLabel, Manifest, load_manifest
from cov3d.data.synthetic import SyntheticSpec, generate_synthetic_dataset
from cov3d.ensemble import EvalReport, evaluate
from cov3d.errors import (
    CheckpointError,
    ConfigError,
    Cov3DError,
    Cov3DFileError,
    DataError,
    EmptyDatasetError,
    EvaluationError,
    ManifestError,
    ModelError,
    ScanLoadError,
    SyntheticSpecError,
    TrainingError,
)
from cov3d.file_system import output_exists, save_to_file
from cov3d.format_utils import as_readable, format_report_table
from cov3d.hash_utils import config_digest, file_digest, scan_digest
from cov3d.nn.backbones import SEVERITY_RUNS, SEVERITY_VARIANTS, severity_grid
from cov3d.pipeline import (
    CLASS_NAMES,
    Preprocessor,
    Task,
    build_detection_model,
    build_severity_model,
    label_for,
    predict_probabilities,
    prepare_scans,
    to_tensor_data,
)
from cov3d.predictions import (
    PredictionTable,
    models_sidecar_path,
    read_predictions,
    write_predictions,
)
from cov3d.segmentation import train_segmenter
from cov3d.slice_filter import train_slice_filter
from cov3d.training import TrainHistory, train_model
from cov3d.utils import seed_everything
from cov3d.volume import VolumeCache

logger = logging.getLogger(__name__)

__all__ = ["RunRecord", "build_parser", "main"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# most specific first
_ERROR_STAGES: list[tuple[type[Cov3DError], str]] = [
    (ManifestError, "manifest"),
    (ScanLoadError, "scan"),
    (SyntheticSpecError, "synthetic"),
    (DataError, "data"),
    (ConfigError, "config"),
    (CheckpointError, "checkpoint"),
    (TrainingError, "training"),
    (ModelError, "model"),
    (EvaluationError, "evaluate"),
    (Cov3DFileError, "io"),
]


class RunRecord(BaseModel):
    """Provenance of one command run, written next to its outputs."""

    command: str
    argv: list[str]
    config: dict[str, Any] = Field(default_factory=dict)
    input_digests: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    started_at: str
    finished_at: str = ""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _input_digest(
    path: str | Path, what: str, error: type[Cov3DError] = DataError
) -> str:
    """`file_digest` of a command input; an unreadable file raises `error`."""
    try:
        return file_digest(path)
    except OSError as e:
        raise error(f"Cannot read {what} {path}: {e}") from e


def _error_stage(error: Cov3DError) -> str:
    stage = getattr(error, "stage", None)
    if stage:
        return stage
    for cls, name in _ERROR_STAGES:
        if isinstance(error, cls):
            return name
    return "run"


def _write_json(data: Any, path: Path) -> Path:
    content = orjson.dumps(data, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
    return anyio.run(save_to_file, content, path)


def _finish(record: RunRecord, path: Path) -> None:
    record.finished_at = _now()
    _write_json(record.model_dump(mode="json"), path)
    logger.debug(f"Run record written to {path}")


def _skipped(*paths: Path) -> bool:
    if output_exists(*paths):
        print("skipped")
        logger.info(f"Outputs exist, skipping: {', '.join(str(p) for p in paths)}")
        return True
    return False


def _run_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, {"seed": args.seed})


def _load_manifest_arg(args: argparse.Namespace) -> tuple[Manifest, Path]:
    path = Path(args.data)
    return load_manifest(path), path.parent


def _optional_model(path: str | None, task: str):
    if path is None:
        return None
    ckpt = load_checkpoint(path)
    if ckpt.task != task:
        raise CheckpointError(
            f"Checkpoint {path} holds a {ckpt.task} model, expected {task}"
        )
    return restore_model(ckpt)


def _make_preprocessor(
    args: argparse.Namespace, task: Task, run_config: RunConfig, root: Path
) -> Preprocessor:
    return Preprocessor(
        task,
        run_config.pipeline,
        root,
        filter_model=_optional_model(args.filter_checkpoint, "filter"),
        seg_model=_optional_model(args.seg_checkpoint, "seg"),
        cache=VolumeCache.from_env(),
    )


def _save_trained(
    ckpt: ModelCheckpoint, history: TrainHistory, out: Path, name: str
) -> list[str]:
    pt_path = save_checkpoint(ckpt, out / name)
    history_path = history.to_csv(out / f"{name}_history.csv")
    logger.info(f"{name}: {as_readable(ckpt.metrics)}")
    return [str(pt_path), str(history_path)]


# gen-synthetic


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    out = Path(args.out)
    manifest_path = out / "manifest.csv"
    if not args.overwrite and _skipped(manifest_path):
        return EXIT_OK

    data: dict[str, Any] = {}
    if args.spec is not None:
        try:
            data = orjson.loads(Path(args.spec).read_bytes())
        except FileNotFoundError as e:
            raise ConfigError(f"Synthetic spec not found: {args.spec}") from e
        except orjson.JSONDecodeError as e:
            raise ConfigError(f"Synthetic spec is not valid JSON: {args.spec}: {e}") from e
    if args.seed is not None:
        data["seed"] = args.seed
    spec = SyntheticSpec.from_mapping(data)

    record = RunRecord(
        command="gen-synthetic",
        argv=args.argv,
        config=spec.model_dump(mode="json"),
        input_digests={"spec": config_digest(spec.model_dump(mode="json"))},
        started_at=_now(),
    )
    if (out / "scans").exists():
        shutil.rmtree(out / "scans")
    generate_synthetic_dataset(spec, out)
    record.outputs = [str(manifest_path)]
    record.input_digests["dataset"] = config_digest(
        {"manifest": file_digest(manifest_path), "scans": scan_digest(out / "scans")}
    )
    _finish(record, out / "run_record.json")
    print(manifest_path)
    return EXIT_OK


# train


def _train_filter(args, run_config, manifest, root, out) -> list[str]:
    slices, labels = load_labeled_slices(manifest, root, "train")
    ckpt, history = train_slice_filter(
        slices,
        labels,
        run_config.train,
        run_config.pipeline,
        config_snapshot=run_config.flat(),
    )
    return _save_trained(ckpt, history, out, "filter")


def _train_seg(args, run_config, manifest, root, out) -> list[str]:
    if args.pairs is not None:
        listing = read_pair_listing(args.pairs)
    else:
        listing = dataset_segmentation_pairs(manifest, root, "train")
    p = run_config.pipeline
    ckpt, history = train_segmenter(
        load_segmentation_pairs(listing),
        run_config.train,
        depth=p.seg_depth,
        base_channels=p.seg_base_channels,
        threshold=p.seg_threshold,
        auto_pad=p.seg_auto_pad,
        holdout_fraction=p.seg_holdout_fraction,
        config_snapshot=run_config.flat(),
    )
    return _save_trained(ckpt, history, out, "seg")


def _train_classifier_runs(
    args,
    run_config: RunConfig,
    manifest: Manifest,
    root: Path,
    out: Path,
    task: Task,
    runs: list[tuple[str, int, str]],
) -> list[str]:
    """Train one checkpoint per (variant, run index, name); seed = seed + run index."""
    preprocessor = _make_preprocessor(args, task, run_config, root)
    train_items = prepare_scans(manifest.select("train", task), preprocessor, args.workers)
    val_items = prepare_scans(manifest.select("val", task), preprocessor, args.workers)
    if not train_items:
        raise EmptyDatasetError(f"no labeled {task} scans in the train split")
    train_data = to_tensor_data(train_items, task)
    val_data = to_tensor_data(val_items, task) if val_items else None

    outputs: list[str] = []
    for variant, run_index, name in runs:
        config = run_config.train.model_copy(
            update={"seed": run_config.train.seed + run_index}
        )
        snapshot = {**run_config.flat(), "seed": config.seed}
        seed_everything(config.seed, config.deterministic)
        if task == "detect":
            model = build_detection_model(run_config.pipeline)
        else:
            model = build_severity_model(run_config.pipeline, variant)
        logger.info(f"Training {name} (seed {config.seed})")
        ckpt, history = train_model(
            model,
            train_data,
            config,
            val=val_data,
            config_snapshot=snapshot,
            extra={"name": name, "run_index": run_index, "variant": variant},
        )
        outputs.extend(_save_trained(ckpt, history, out, name))
    return outputs


def _severity_runs(args) -> list[tuple[str, int]]:
    if args.grid:
        return severity_grid()
    if args.variant is None:
        raise ConfigError("--task severity needs --variant (or --grid)")
    return [(args.variant, args.run_index)]


def cmd_train(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.task == "filter":
        names = ["filter"]
    elif args.task == "seg":
        names = ["seg"]
    elif args.task == "detect":
        runs = [("detect", i, f"detect_run{i}") for i in range(args.runs)]
        names = [name for _, _, name in runs]
    else:
        runs = [
            (variant, r, f"severity_{variant}_run{r}")
            for variant, r in _severity_runs(args)
        ]
        names = [name for _, _, name in runs]
    if not args.overwrite and _skipped(*(checkpoint_paths(out / n)[0] for n in names)):
        return EXIT_OK

    run_config = _run_config(args)
    manifest, root = _load_manifest_arg(args)
    record = RunRecord(
        command=f"train {args.task}",
        argv=args.argv,
        config=run_config.flat(),
        input_digests={"manifest": file_digest(args.data)},
        started_at=_now(),
    )
    for flag in ("filter_checkpoint", "seg_checkpoint"):
        value = getattr(args, flag, None)
        if value is not None:
            record.input_digests[flag] = _input_digest(
                checkpoint_paths(value)[0], "checkpoint", CheckpointError
            )
    if getattr(args, "pairs", None) is not None:
        record.input_digests["pairs"] = _input_digest(args.pairs, "pair listing")

    if args.task == "filter":
        outputs = _train_filter(args, run_config, manifest, root, out)
    elif args.task == "seg":
        outputs = _train_seg(args, run_config, manifest, root, out)
    else:
        outputs = _train_classifier_runs(
            args, run_config, manifest, root, out, args.task, runs
        )

    record.outputs = outputs
    _finish(record, out / f"{args.task}_run_record.json")
    return EXIT_OK


# predict


def _check_members(ckpts: list[ModelCheckpoint], paths: list[str], task: Task) -> None:
    expected = len(CLASS_NAMES[task])
    for ckpt, path in zip(ckpts, paths):
        if ckpt.task != task:
            raise CheckpointError(
                f"Checkpoint {path} holds a {ckpt.task} model, expected {task}"
            )
        if ckpt.num_classes != expected:
            raise CheckpointError(
                f"Checkpoint {path} has {ckpt.num_classes} classes, "
                f"{task} needs {expected}"
            )


def cmd_predict(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if not args.overwrite and _skipped(out, models_sidecar_path(out)):
        return EXIT_OK

    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    _check_members(ckpts, args.checkpoint, args.task)
    if args.config is not None:
        run_config = _run_config(args)
    else:
        # preprocessing must match what the first member was trained on
        run_config = run_config_from_mapping(ckpts[0].config, {"seed": args.seed})

    manifest, root = _load_manifest_arg(args)
    entries = manifest.select(args.split)
    if args.task == "severity":
        entries = [e for e in entries if e.covid_label != DetectionLabel.NON_COVID]
    if not entries:
        raise DataError(f"No scans to predict in split {args.split!r}")

    record = RunRecord(
        command=f"predict {args.task}",
        argv=args.argv,
        config=run_config.flat(),
        input_digests={
            "manifest": file_digest(args.data),
            **{
                c.checkpoint_id: file_digest(checkpoint_paths(p)[0])
                for c, p in zip(ckpts, args.checkpoint)
            },
        },
        started_at=_now(),
    )

    preprocessor = _make_preprocessor(args, args.task, run_config, root)
    prepared = prepare_scans(entries, preprocessor, args.workers)
    member_probs = []
    for ckpt in ckpts:
        model = restore_model(ckpt)
        member_probs.append(
            predict_probabilities(model, prepared, run_config.train.batch_size)
        )
        logger.info(f"Predicted {len(prepared)} scans with {ckpt.checkpoint_id}")

    table = PredictionTable(
        task=args.task,
        scan_ids=[p.scan_id for p in prepared],
        member_ids=[c.checkpoint_id for c in ckpts],
        member_probs=np.stack(member_probs),
        labels=[label_for(p.entry, args.task) for p in prepared],
        filter_fallback=[p.filter_fallback for p in prepared],
    )
    target = write_predictions(table, out)
    record.outputs = [str(target), str(models_sidecar_path(target))]
    _finish(record, target.with_name(target.name + ".run_record.json"))
    return EXIT_OK


# evaluate


def _report_path(args: argparse.Namespace) -> Path:
    if args.out is not None:
        return Path(args.out)
    predictions = Path(args.predictions)
    return predictions.with_name(predictions.stem + ".report.json")


def cmd_evaluate(args: argparse.Namespace) -> int:
    report_path = _report_path(args)
    if not args.overwrite and _skipped(report_path):
        return EXIT_OK

    run_config = _run_config(args)
    table = read_predictions(args.predictions)
    manifest, _ = _load_manifest_arg(args)
    by_id = manifest.by_scan_id()
    if table.task not in CLASS_NAMES:
        raise EvaluationError(f"Unknown task {table.task!r} in {args.predictions}")

    truth = []
    for scan_id in table.scan_ids:
        entry = by_id.get(scan_id)
        if entry is None:
            raise EvaluationError(f"Scan {scan_id} is not in the manifest {args.data}")
        label = label_for(entry, table.task)
        if label is None:
            raise EvaluationError(f"Scan {scan_id} has no {table.task} label")
        truth.append(label)

    record = RunRecord(
        command="evaluate",
        argv=args.argv,
        config=run_config.flat(),
        input_digests={
            "predictions": file_digest(args.predictions),
            "manifest": file_digest(args.data),
        },
        started_at=_now(),
    )
    report: EvalReport = evaluate(
        table.preds.tolist(),
        truth,
        CLASS_NAMES[table.task],
        task=table.task,
        n_bootstrap=run_config.pipeline.n_bootstrap,
        seed=run_config.train.seed,
        exclude_absent_classes=run_config.pipeline.exclude_absent_classes,
        member_preds={k: v.tolist() for k, v in table.member_preds().items()},
    )
    _write_json(report.model_dump(mode="json"), report_path)
    record.outputs = [str(report_path)]
    _finish(record, report_path.with_name(report_path.name + ".run_record.json"))
    print(format_report_table(report))
    return EXIT_OK


# parser


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Flat JSON run configuration.")
    common.add_argument(
        "--seed", type=int, default=None, help="Overrides the configured seed."
    )
    common.add_argument(
        "--workers",
        type=int,
        default=1,
        help="Scans prepared concurrently; 1 is single-reader mode.",
    )
    common.add_argument(
        "--overwrite",
        action=argparse.BooleanOptionalAction,
        default=False,
        help="Recompute outputs that already exist.",
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging threshold for stderr.",
    )
    return common


def _model_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--filter-checkpoint", default=None, help="Slice filter checkpoint (.pt)."
    )
    parser.add_argument(
        "--seg-checkpoint",
        default=None,
        help="Segmentation checkpoint (.pt); required for severity.",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cov3d",
        description="CT-scan COVID detection and severity toolkit.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    common = _common_options()

    gen = commands.add_parser(
        "gen-synthetic", parents=[common], help="Write a synthetic dataset."
    )
    gen.add_argument("--out", required=True, help="Output dataset directory.")
    gen.add_argument("--spec", default=None, help="Synthetic spec JSON file.")
    gen.set_defaults(handler=cmd_gen_synthetic)

    train = commands.add_parser("train", parents=[common], help="Train a model.")
    train.add_argument(
        "--task", required=True, choices=["filter", "seg", "detect", "severity"]
    )
    train.add_argument("--data", required=True, help="Dataset manifest.csv.")
    train.add_argument("--out", required=True, help="Checkpoint directory.")
    train.add_argument(
        "--runs", type=int, default=1, help="Detection runs, seeds seed+0..seed+N-1."
    )
    train.add_argument(
        "--variant", default=None, choices=list(SEVERITY_VARIANTS), help="Severity backbone."
    )
    train.add_argument(
        "--run-index",
        type=int,
        default=0,
        choices=range(SEVERITY_RUNS),
        help="Severity run index; seed is seed + run index.",
    )
    train.add_argument(
        "--grid", action="store_true", help="Train every severity (variant, run) pair."
    )
    train.add_argument(
        "--pairs", default=None, help="slice_path,mask_path listing for --task seg."
    )
    _model_inputs(train)
    train.set_defaults(handler=cmd_train)

    predict = commands.add_parser(
        "predict", parents=[common], help="Write per-model and ensemble probabilities."
    )
    predict.add_argument("--task", required=True, choices=["detect", "severity"])
    predict.add_argument(
        "--checkpoint",
        action="append",
        required=True,
        help="Member checkpoint (.pt); repeat for an ensemble.",
    )
    predict.add_argument("--data", required=True, help="Dataset manifest.csv.")
    predict.add_argument("--out", required=True, help="Predictions CSV path.")
    predict.add_argument(
        "--split",
        default=None,
        choices=["train", "val", "test"],
        help="Restrict to one split (default: every scan).",
    )
    _model_inputs(predict)
    predict.set_defaults(handler=cmd_predict)

    ev = commands.add_parser(
        "evaluate", parents=[common], help="Score predictions against the manifest."
    )
    ev.add_argument("--predictions", required=True, help="Predictions CSV.")
    ev.add_argument("--data", required=True, help="Dataset manifest.csv.")
    ev.add_argument(
        "--out", default=None, help="Report JSON (default: <predictions>.report.json)."
    )
    ev.set_defaults(handler=cmd_evaluate)
    return parser


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    args.argv = argv
    _configure_logging(args.log_level)

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except Cov3DError as e:
        print(f"error [{args.command}/{_error_stage(e)}]: {e}", file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
