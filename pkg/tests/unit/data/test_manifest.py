import numpy as np
import pytest

from cov3d.data.manifest import (
    DetectionLabel,
    Manifest,
    ManifestEntry,
    class_to_severity,
    load_manifest,
    severity_to_class,
    write_manifest,
)
from cov3d.errors import ManifestError

HEADER = "scan_path,split,covid_label,severity\n"


def _write(tmp_path, body: str):
    path = tmp_path / "manifest.csv"
    path.write_text(HEADER + body, encoding="utf-8")
    return path


def _rows(prefix: str, split: str, covid: int, severity: int | None, n: int) -> str:
    sev = "" if severity is None else str(severity)
    return "".join(f"scans/{prefix}_{i},{split},{covid},{sev}\n" for i in range(n))


def test_detection_counts_per_split(tmp_path):
    body = (
        _rows("tc", "train", 1, None, 882)
        + _rows("tn", "train", 0, None, 1110)
        + _rows("vc", "val", 1, None, 215)
        + _rows("vn", "val", 0, None, 289)
    )
    manifest = load_manifest(_write(tmp_path, body))
    assert manifest.class_counts["train"]["covid"] == 882
    assert manifest.class_counts["train"]["non-covid"] == 1110
    assert manifest.class_counts["val"]["covid"] == 215
    assert manifest.class_counts["val"]["non-covid"] == 289


def test_severity_counts_per_split(tmp_path):
    body = ""
    for split, counts in (("train", (85, 62, 85, 26)), ("val", (22, 10, 22, 5))):
        for severity, n in zip((1, 2, 3, 4), counts):
            body += _rows(f"{split}{severity}", split, 1, severity, n)
    manifest = load_manifest(_write(tmp_path, body))
    assert manifest.severity_counts("train") == (85, 62, 85, 26)
    assert manifest.severity_counts("val") == (22, 10, 22, 5)
    assert manifest.severity_counts("test") == (0, 0, 0, 0)


def test_empty_manifest(tmp_path):
    manifest = load_manifest(_write(tmp_path, ""))
    assert manifest.entries == ()
    assert manifest.class_counts == {}


def test_row_order_and_optional_labels(tmp_path):
    body = "scans/b,test,,\nscans/a,train,1,4\nscans/c,val,0,\n"
    manifest = load_manifest(_write(tmp_path, body))
    assert [e.scan_id for e in manifest.entries] == ["b", "a", "c"]
    assert manifest.entries[0].covid_label is None
    assert manifest.entries[1].severity == 4
    assert manifest.entries[2].covid_label is DetectionLabel.NON_COVID


@pytest.mark.parametrize(
    "body, row, match",
    [
        ("scans/a,train,1\n", 2, "expected 4 fields"),
        ("scans/a,train,1,\nscans/b,holdout,0,\n", 3, "Unknown split"),
        ("scans/a,train,1,5\n", 2, "Severity outside 1-4"),
        ("scans/a,train,2,\n", 2, "covid_label"),
        ("scans/a,train,x,\n", 2, "Invalid covid_label"),
        ("scans/a,train,0,2\n", 2, "requires covid_label"),
        ("scans/a,train,1,\nscans/a,val,1,\n", 3, "Duplicate scan_path"),
        ("a/ct1,train,1,\nb/ct1,train,0,\n", 3, "Duplicate scan_id"),
        (" scans/a ,train,1,\n", 2, "whitespace"),
    ],
)
def test_malformed_rows_report_row_number(tmp_path, body, row, match):
    with pytest.raises(ManifestError, match=match) as exc_info:
        load_manifest(_write(tmp_path, body))
    assert exc_info.value.row == row
    assert f"(Row: {row})" in str(exc_info.value)


def test_bad_header(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("path,split\nscans/a,train\n")
    with pytest.raises(ManifestError, match="Header") as exc_info:
        load_manifest(path)
    assert exc_info.value.row == 1


def test_missing_file(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "absent.csv")


def test_write_then_load_is_identity(tmp_path):
    manifest = Manifest(
        entries=(
            ManifestEntry(scan_path="scans/x", split="train", covid_label=1, severity=2),
            ManifestEntry(scan_path="scans/y", split="val", covid_label=0),
            ManifestEntry(scan_path="scans/z", split="test"),
        )
    )
    path = write_manifest(manifest, tmp_path / "m.csv")
    assert load_manifest(path) == manifest
    assert b"\r\n" not in path.read_bytes()


def _random_manifest(rng: np.random.Generator) -> Manifest:
    alphabet = list("abcxyz019_-. ,\"")
    entries = []
    for k in range(int(rng.integers(0, 25))):
        depth = int(rng.integers(0, 3))
        dirs = [
            "d" + "".join(rng.choice(alphabet, size=int(rng.integers(0, 5))))
            for _ in range(depth)
        ]
        name = f"ct{k}{''.join(rng.choice(list('abc ,'), size=int(rng.integers(0, 4))))}x"
        covid = [None, 0, 1][int(rng.integers(0, 3))]
        severity = int(rng.integers(1, 5)) if covid == 1 and rng.random() < 0.5 else None
        entries.append(
            ManifestEntry(
                scan_path="/".join([*dirs, name]),
                split=str(rng.choice(["train", "val", "test"])),
                covid_label=covid,
                severity=severity,
            )
        )
    return Manifest(entries=tuple(entries))


@pytest.mark.parametrize("seed", range(20))
def test_random_manifests_round_trip(tmp_path, seed):
    manifest = _random_manifest(np.random.default_rng(seed))
    path = write_manifest(manifest, tmp_path / "m.csv")
    assert load_manifest(path) == manifest


def test_duplicate_scan_ids_rejected_in_model():
    with pytest.raises(ValueError, match="duplicate scan_id"):
        Manifest(
            entries=(
                ManifestEntry(scan_path="a/ct1", split="train", covid_label=1),
                ManifestEntry(scan_path="b/ct1", split="train", covid_label=0),
            )
        )


@pytest.mark.parametrize("scan_path", [" scans/a", "scans/a ", "scans/a\n", "", "/", "."])
def test_scan_path_must_survive_csv(scan_path):
    with pytest.raises(ValueError):
        ManifestEntry(scan_path=scan_path, split="test")


def test_select_by_split_and_task(tmp_path):
    body = "scans/a,train,1,3\nscans/b,train,0,\nscans/c,train,1,\nscans/d,val,1,1\n"
    manifest = load_manifest(_write(tmp_path, body))
    assert [e.scan_id for e in manifest.select("train")] == ["a", "b", "c"]
    assert [e.scan_id for e in manifest.select("train", "severity")] == ["a"]
    assert [e.scan_id for e in manifest.select(None, "severity")] == ["a", "d"]
    assert set(manifest.by_scan_id()) == {"a", "b", "c", "d"}


def test_duplicate_paths_rejected_in_model():
    entry = ManifestEntry(scan_path="scans/a", split="train")
    with pytest.raises(ValueError, match="duplicate"):
        Manifest(entries=(entry, entry))


def test_severity_class_mapping():
    assert [severity_to_class(k) for k in (1, 2, 3, 4)] == [0, 1, 2, 3]
    assert [class_to_severity(i) for i in range(4)] == [1, 2, 3, 4]
    assert DetectionLabel.COVID.tag == "covid"
    assert DetectionLabel.NON_COVID.tag == "non-covid"
