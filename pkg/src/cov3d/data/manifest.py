"""
Dataset manifests: which scan lives where, in which split, with which labels.

CSV schema (UTF-8, LF line endings)::

    scan_path,split,covid_label,severity
    scans/ct_001,train,1,3
    scans/ct_002,val,0,

`covid_label` is 0, 1 or empty; `severity` is 1-4 or empty. Row numbers in
errors count the header as row 1.
"""

import csv
import io
import logging
from collections import Counter
from enum import IntEnum
from pathlib import Path, PurePosixPath
from typing import Literal

from pydantic import BaseModel, ConfigDict, computed_field, field_validator, model_validator

from cov3d.errors import ManifestError
from cov3d.file_system import save_to_file_sync

logger = logging.getLogger(__name__)

__all__ = [
    "MANIFEST_HEADER",
    "SPLITS",
    "DetectionLabel",
    "ManifestEntry",
    "Manifest",
    "load_manifest",
    "write_manifest",
    "manifest_to_csv",
    "severity_to_class",
    "class_to_severity",
]

MANIFEST_HEADER = ("scan_path", "split", "covid_label", "severity")
SPLITS = ("train", "val", "test")
SEVERITY_CLASSES = (1, 2, 3, 4)

Split = Literal["train", "val", "test"]


class DetectionLabel(IntEnum):
    NON_COVID = 0
    COVID = 1

    @property
    def tag(self) -> str:
        return "covid" if self is DetectionLabel.COVID else "non-covid"


def severity_to_class(severity: int) -> int:
    """Severity grade 1-4 to class index 0-3."""
    return severity - 1


def class_to_severity(index: int) -> int:
    return index + 1


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    scan_path: str
    split: Split
    covid_label: DetectionLabel | None = None
    severity: int | None = None

    @field_validator("scan_path")
    def validate_scan_path(cls, v):
        if v != v.strip():
            raise ValueError(f"scan_path has leading or trailing whitespace: {v!r}")
        if not PurePosixPath(v).name:
            raise ValueError(f"scan_path has no final component: {v!r}")
        return v

    @model_validator(mode="after")
    def check_labels(self) -> "ManifestEntry":
        if self.severity is not None:
            if self.severity not in SEVERITY_CLASSES:
                raise ValueError(f"severity must be one of 1-4, got {self.severity}")
            if self.covid_label is not DetectionLabel.COVID:
                raise ValueError("a severity label requires covid_label == 1")
        return self

    @property
    def scan_id(self) -> str:
        return PurePosixPath(self.scan_path).name


class Manifest(BaseModel):
    """Ordered manifest entries plus derived per-split class counts."""

    model_config = ConfigDict(frozen=True)

    entries: tuple[ManifestEntry, ...] = ()

    @model_validator(mode="after")
    def check_unique_paths(self) -> "Manifest":
        paths: set[str] = set()
        ids: dict[str, str] = {}
        for entry in self.entries:
            if entry.scan_path in paths:
                raise ValueError(f"duplicate scan_path: {entry.scan_path}")
            if entry.scan_id in ids:
                raise ValueError(
                    f"duplicate scan_id {entry.scan_id!r}: {ids[entry.scan_id]} "
                    f"and {entry.scan_path}"
                )
            paths.add(entry.scan_path)
            ids[entry.scan_id] = entry.scan_path
        return self

    @computed_field
    @property
    def class_counts(self) -> dict[str, dict[str, int]]:
        counts: dict[str, Counter] = {}
        for entry in self.entries:
            bucket = counts.setdefault(entry.split, Counter())
            if entry.covid_label is not None:
                bucket[entry.covid_label.tag] += 1
            if entry.severity is not None:
                bucket[f"severity-{entry.severity}"] += 1
        return {
            split: dict(sorted(counts[split].items()))
            for split in SPLITS
            if split in counts
        }

    def severity_counts(self, split: Split) -> tuple[int, int, int, int]:
        bucket = self.class_counts.get(split, {})
        return tuple(bucket.get(f"severity-{k}", 0) for k in SEVERITY_CLASSES)

    def select(
        self, split: Split | None = None, task: Literal["detect", "severity"] | None = None
    ) -> list[ManifestEntry]:
        """Entries of a split that carry the label a task needs."""
        selected = []
        for entry in self.entries:
            if split is not None and entry.split != split:
                continue
            if task == "detect" and entry.covid_label is None:
                continue
            if task == "severity" and entry.severity is None:
                continue
            selected.append(entry)
        return selected

    def by_scan_id(self) -> dict[str, ManifestEntry]:
        """Entries keyed by scan id; ids are unique within a manifest."""
        return {entry.scan_id: entry for entry in self.entries}


def _parse_optional_int(token: str, field: str, row: int) -> int | None:
    token = token.strip()
    if token == "":
        return None
    try:
        return int(token)
    except ValueError:
        raise ManifestError(f"Invalid {field} value {token!r}", row=row) from None


def _parse_row(values: list[str], row: int) -> ManifestEntry:
    if len(values) != len(MANIFEST_HEADER):
        raise ManifestError(
            f"Malformed row: expected {len(MANIFEST_HEADER)} fields, got {len(values)}",
            row=row,
        )
    scan_path = values[0]
    split, covid_token, severity_token = (v.strip() for v in values[1:])
    if not scan_path.strip():
        raise ManifestError("Empty scan_path", row=row)
    if split not in SPLITS:
        raise ManifestError(
            f"Unknown split token {split!r}; expected one of {', '.join(SPLITS)}",
            row=row,
        )
    covid = _parse_optional_int(covid_token, "covid_label", row)
    if covid is not None and covid not in (0, 1):
        raise ManifestError(f"covid_label must be 0, 1 or empty, got {covid}", row=row)
    severity = _parse_optional_int(severity_token, "severity", row)
    if severity is not None and severity not in SEVERITY_CLASSES:
        raise ManifestError(f"Severity outside 1-4: {severity}", row=row)
    try:
        return ManifestEntry(
            scan_path=scan_path,
            split=split,
            covid_label=None if covid is None else DetectionLabel(covid),
            severity=severity,
        )
    except ValueError as e:
        raise ManifestError(f"Invalid row: {e}", row=row) from e


def load_manifest(path: str | Path) -> Manifest:
    """
    Load and validate a manifest CSV.

    Args:
        path: Path of the manifest file.

    Returns:
        The manifest with entries in file order.

    Raises:
        ManifestError: Missing file, bad header, malformed row (with row number),
            unknown split token, severity outside 1-4, or a scan_path or
            scan_id that repeats an earlier row.
    """
    manifest_path = Path(path)
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ManifestError(f"Manifest not found: {manifest_path}") from e
    except (OSError, UnicodeDecodeError) as e:
        raise ManifestError(f"Cannot read manifest {manifest_path}: {e}") from e

    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise ManifestError(
            f"Header must be {','.join(MANIFEST_HEADER)}, got {header}", row=1
        )

    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    seen_ids: dict[str, int] = {}
    for row_number, values in enumerate(reader, start=2):
        if not values or all(not v.strip() for v in values):
            continue
        entry = _parse_row(values, row_number)
        if entry.scan_path in seen:
            raise ManifestError(
                f"Duplicate scan_path {entry.scan_path!r} (first seen on row "
                f"{seen[entry.scan_path]})",
                row=row_number,
            )
        if entry.scan_id in seen_ids:
            raise ManifestError(
                f"Duplicate scan_id {entry.scan_id!r} (first seen on row "
                f"{seen_ids[entry.scan_id]})",
                row=row_number,
            )
        seen[entry.scan_path] = row_number
        seen_ids[entry.scan_id] = row_number
        entries.append(entry)

    manifest = Manifest(entries=tuple(entries))
    logger.info(f"Loaded manifest {manifest_path} with {len(entries)} entries")
    return manifest


def manifest_to_csv(manifest: Manifest) -> str:
    buffer = io.StringIO(newline="")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for entry in manifest.entries:
        writer.writerow(
            [
                entry.scan_path,
                entry.split,
                "" if entry.covid_label is None else int(entry.covid_label),
                "" if entry.severity is None else entry.severity,
            ]
        )
    return buffer.getvalue()


def write_manifest(manifest: Manifest, path: str | Path) -> Path:
    """Write a manifest as UTF-8 CSV with LF line endings."""
    return save_to_file_sync(manifest_to_csv(manifest), path)
