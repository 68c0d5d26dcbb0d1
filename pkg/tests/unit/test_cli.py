import logging

import numpy as np
import orjson
import pytest

from cov3d.cli import build_parser, main
from cov3d.hash_utils import file_digest
from cov3d.pipeline import label_for
from cov3d.predictions import PredictionTable, write_predictions

SPEC = {
    "n_scans_per_class": {"non-covid": 4, "1": 1, "2": 1, "3": 1, "4": 1},
    "slice_count_range": [6, 10],
    "image_size": [32, 32],
    "seed": 7,
}

TOY = {
    "batch_size": 4,
    "epochs": 2,
    "lr0": 1e-3,
    "lr_decay_epochs": [],
    "seed": 3,
    "backbone_tier": "toy",
    "detection_depth": 8,
    "detection_size": 32,
    "severity_spatial": 32,
    "filter_input_size": 32,
    "seg_depth": 2,
    "seg_base_channels": 4,
    "n_bootstrap": 20,
}


@pytest.fixture(autouse=True)
def restore_root_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def files(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_bytes(orjson.dumps(SPEC))
    config = tmp_path / "toy.json"
    config.write_bytes(orjson.dumps(TOY))
    return spec, config


def _gen(tmp_path, spec, name="data") -> str:
    out = tmp_path / name
    assert main(["gen-synthetic", "--out", str(out), "--spec", str(spec)]) == 0
    return str(out / "manifest.csv")


class TestUsage:
    def test_no_command(self):
        assert main([]) == 2

    def test_missing_required_option(self, capsys):
        assert main(["gen-synthetic"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_unknown_variant(self):
        assert main(
            ["train", "--task", "severity", "--data", "m.csv", "--out", "o",
             "--variant", "vgg16"]
        ) == 2

    def test_help_exits_cleanly(self, capsys):
        assert main(["--help"]) == 0
        assert "gen-synthetic" in capsys.readouterr().out

    def test_defaults(self):
        args = build_parser().parse_args(
            ["predict", "--task", "detect", "--checkpoint", "a.pt", "--data", "m",
             "--out", "p.csv"]
        )
        assert args.split is None
        assert args.workers == 1
        assert args.overwrite is False
        assert args.checkpoint == ["a.pt"]


class TestGenSynthetic:
    def test_writes_and_skips(self, tmp_path, files, capsys):
        spec, _ = files
        manifest = _gen(tmp_path, spec)
        assert capsys.readouterr().out.strip() == manifest
        record = orjson.loads((tmp_path / "data" / "run_record.json").read_bytes())
        assert record["command"] == "gen-synthetic"
        assert set(record["input_digests"]) == {"spec", "dataset"}

        assert main(["gen-synthetic", "--out", str(tmp_path / "data")]) == 0
        assert capsys.readouterr().out.strip() == "skipped"

    def test_same_spec_same_dataset(self, tmp_path, files):
        spec, _ = files
        _gen(tmp_path, spec, "a")
        _gen(tmp_path, spec, "b")
        digest = [
            orjson.loads((tmp_path / d / "run_record.json").read_bytes())["input_digests"]
            for d in ("a", "b")
        ]
        assert digest[0]["dataset"] == digest[1]["dataset"]

    def test_invalid_spec(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen-synthetic", "--out", str(tmp_path / "o"), "--spec", str(bad)]) == 1
        assert "error [gen-synthetic/config]" in capsys.readouterr().err

    def test_degenerate_spec(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_bytes(orjson.dumps({"slice_count_range": [5, 2]}))
        assert main(["gen-synthetic", "--out", str(tmp_path / "o"), "--spec", str(bad)]) == 1
        assert "error [gen-synthetic/synthetic]" in capsys.readouterr().err


class TestFailures:
    def test_severity_needs_segmenter(self, tmp_path, files, capsys):
        spec, config = files
        manifest = _gen(tmp_path, spec)
        code = main(
            ["train", "--task", "severity", "--variant", "inception_v3", "--data", manifest,
             "--out", str(tmp_path / "ckpt"), "--config", str(config)]
        )
        assert code == 1
        assert "segmentation model required" in capsys.readouterr().err

    def test_severity_needs_variant(self, tmp_path, files, capsys):
        spec, config = files
        manifest = _gen(tmp_path, spec)
        code = main(
            ["train", "--task", "severity", "--data", manifest,
             "--out", str(tmp_path / "ckpt"), "--config", str(config)]
        )
        assert code == 1
        assert "--variant" in capsys.readouterr().err

    def test_unknown_config_key_suggests(self, tmp_path, files, capsys):
        spec, _ = files
        manifest = _gen(tmp_path, spec)
        config = tmp_path / "typo.json"
        config.write_bytes(orjson.dumps({"batch_sze": 4}))
        code = main(
            ["train", "--task", "detect", "--data", manifest, "--out", str(tmp_path / "c"),
             "--config", str(config)]
        )
        assert code == 1
        assert "Did you mean: 'batch_size'?" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, files, capsys):
        _, config = files
        code = main(
            ["train", "--task", "detect", "--data", str(tmp_path / "none.csv"),
             "--out", str(tmp_path / "c"), "--config", str(config)]
        )
        assert code == 1
        assert "error [train/" in capsys.readouterr().err

    def test_missing_pair_listing(self, tmp_path, files, capsys):
        spec, config = files
        manifest = _gen(tmp_path, spec)
        capsys.readouterr()
        code = main(
            ["train", "--task", "seg", "--data", manifest, "--out", str(tmp_path / "c"),
             "--config", str(config), "--pairs", str(tmp_path / "absent.csv")]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert "error [train/data]" in err
        assert "Cannot read pair listing" in err
        assert not (tmp_path / "c" / "seg.pt").exists()

    def test_missing_checkpoint(self, tmp_path, files, capsys):
        spec, _ = files
        manifest = _gen(tmp_path, spec)
        code = main(
            ["predict", "--task", "detect", "--checkpoint", str(tmp_path / "nope.pt"),
             "--data", manifest, "--out", str(tmp_path / "p.csv")]
        )
        assert code == 1
        assert "error [predict/checkpoint]" in capsys.readouterr().err


def _truth_table(root, manifest, scan_ids=None) -> PredictionTable:
    entries = manifest.select(task="detect")
    labels = [label_for(e, "detect") for e in entries]
    probs = np.eye(2)[labels][None]
    return PredictionTable(
        task="detect",
        scan_ids=scan_ids or [e.scan_id for e in entries],
        member_ids=["oracle"],
        member_probs=probs,
        labels=labels,
    )


class TestEvaluate:
    def test_perfect_predictions_score_100(self, small_dataset, tmp_path, files, capsys):
        root, manifest = small_dataset
        _, config = files
        pred = write_predictions(_truth_table(root, manifest), tmp_path / "pred.csv")
        code = main(
            ["evaluate", "--predictions", str(pred), "--data", str(root / "manifest.csv"),
             "--config", str(config)]
        )
        assert code == 0
        report = orjson.loads((tmp_path / "pred.report.json").read_bytes())
        assert report["macro_f1"] == 100.0
        assert report["n_bootstrap"] == 20
        assert [m["member_id"] for m in report["members"]] == ["oracle"]
        assert "ensemble" in capsys.readouterr().out

    def test_unknown_scan_id(self, small_dataset, tmp_path, files, capsys):
        root, manifest = small_dataset
        _, config = files
        n = len(manifest.select(task="detect"))
        table = _truth_table(root, manifest, scan_ids=["ghost"] + [f"x{i}" for i in range(n - 1)])
        pred = write_predictions(table, tmp_path / "pred.csv")
        code = main(
            ["evaluate", "--predictions", str(pred), "--data", str(root / "manifest.csv"),
             "--config", str(config)]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert "error [evaluate/evaluate]" in err
        assert "Scan ghost is not in the manifest" in err
        assert not (tmp_path / "pred.report.json").exists()


def _detect_pipeline(tmp_path, spec, config, name) -> tuple[bytes, str]:
    base = tmp_path / name
    manifest = _gen(base, spec)
    ckpt = base / "ckpt"
    common = ["--config", str(config), "--data", manifest, "--out", str(ckpt)]
    assert main(["train", "--task", "filter", *common]) == 0
    assert main(["train", "--task", "detect", "--runs", "2",
                 "--filter-checkpoint", str(ckpt / "filter.pt"), *common]) == 0
    pred = base / "pred.csv"
    assert main(
        ["predict", "--task", "detect", "--data", manifest, "--out", str(pred),
         "--checkpoint", str(ckpt / "detect_run0.pt"),
         "--checkpoint", str(ckpt / "detect_run1.pt"),
         "--filter-checkpoint", str(ckpt / "filter.pt")]
    ) == 0
    assert main(
        ["evaluate", "--predictions", str(pred), "--data", manifest, "--config", str(config)]
    ) == 0
    return pred.read_bytes(), file_digest(base / "pred.report.json")


@pytest.mark.slow
def test_detection_pipeline_is_deterministic(tmp_path, files, capsys):
    spec, config = files
    first_pred, first_report = _detect_pipeline(tmp_path, spec, config, "one")
    second_pred, second_report = _detect_pipeline(tmp_path, spec, config, "two")
    assert first_pred == second_pred
    assert first_report == second_report

    sidecar = orjson.loads((tmp_path / "one" / "pred.csv.models.json").read_bytes())
    assert sidecar["members"] == ["detect_run0", "detect_run1"]

    ckpt = tmp_path / "one" / "ckpt"
    meta = [orjson.loads((ckpt / f"detect_run{i}.json").read_bytes()) for i in (0, 1)]
    assert [m["seed"] for m in meta] == [3, 4]
    assert (ckpt / "detect_run0_history.csv").exists()
    assert (ckpt / "detect_run_record.json").exists()

    report = orjson.loads((tmp_path / "one" / "pred.report.json").read_bytes())
    assert len(report["members"]) == 2
    assert report["member_spread"] is not None
    assert 0.0 <= report["macro_f1"] <= 100.0


@pytest.mark.slow
def test_severity_pipeline(tmp_path, files):
    spec, config = files
    manifest = _gen(tmp_path, spec)
    ckpt = tmp_path / "ckpt"
    common = ["--config", str(config), "--data", manifest, "--out", str(ckpt)]
    assert main(["train", "--task", "seg", *common]) == 0
    seg = ["--seg-checkpoint", str(ckpt / "seg.pt")]
    for run in ("0", "1"):
        assert main(["train", "--task", "severity", "--variant", "inception_v3",
                     "--run-index", run, *seg, *common]) == 0
    assert main(["train", "--task", "severity", "--variant", "inception_v3",
                 "--run-index", "0", *seg, *common]) == 0

    pred = tmp_path / "sev.csv"
    assert main(
        ["predict", "--task", "severity", "--data", manifest, "--out", str(pred),
         "--checkpoint", str(ckpt / "severity_inception_v3_run0.pt"),
         "--checkpoint", str(ckpt / "severity_inception_v3_run1.pt"), *seg]
    ) == 0
    frame = pred.read_text().splitlines()
    assert len(frame) == 1 + 4
    assert frame[0].startswith("scan_id,p_0,p_1,p_2,p_3,pred,label,filter_fallback")

    assert main(["evaluate", "--predictions", str(pred), "--data", manifest,
                 "--config", str(config)]) == 0
    report = orjson.loads((tmp_path / "sev.report.json").read_bytes())
    assert report["class_names"] == ["severity-1", "severity-2", "severity-3", "severity-4"]
    assert report["n_samples"] == 4


@pytest.mark.slow
def test_detect_checkpoint_rejected_for_severity(tmp_path, files, capsys):
    spec, config = files
    manifest = _gen(tmp_path, spec)
    ckpt = tmp_path / "ckpt"
    assert main(["train", "--task", "detect", "--config", str(config), "--data", manifest,
                 "--out", str(ckpt)]) == 0
    capsys.readouterr()
    code = main(
        ["predict", "--task", "severity", "--data", manifest, "--out", str(tmp_path / "p.csv"),
         "--checkpoint", str(ckpt / "detect_run0.pt")]
    )
    assert code == 1
    assert "holds a detect model, expected severity" in capsys.readouterr().err
