"""
Predictions CSV: one row per scan with the ensemble probabilities, the
predicted and (when known) true class, the slice-filter fallback flag and
every member model's probabilities.

Columns: `scan_id,p_0..p_{K-1},pred,label,filter_fallback,m0_p_0,...`.
A sibling `<file>.models.json` names the task and member checkpoints in
column order.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import orjson
import pandas as pd

from cov3d.ensemble import ensemble_average, predict_labels
from cov3d.errors import EvaluationError
from cov3d.file_system import save_to_file_sync

logger = logging.getLogger(__name__)

__all__ = [
    "PredictionTable",
    "models_sidecar_path",
    "write_predictions",
    "read_predictions",
]


@dataclass
class PredictionTable:
    task: str
    scan_ids: list[str]
    member_ids: list[str]
    member_probs: np.ndarray  # (M, N, K)
    labels: list[int | None] = field(default_factory=list)
    filter_fallback: list[bool] = field(default_factory=list)

    def __post_init__(self):
        self.member_probs = np.asarray(self.member_probs, dtype=np.float64)
        m, n, _ = self.member_probs.shape
        if m != len(self.member_ids) or n != len(self.scan_ids):
            raise EvaluationError(
                f"member probabilities {self.member_probs.shape} do not match "
                f"{len(self.member_ids)} members and {len(self.scan_ids)} scans"
            )
        if not self.labels:
            self.labels = [None] * n
        if not self.filter_fallback:
            self.filter_fallback = [False] * n

    @property
    def num_classes(self) -> int:
        return self.member_probs.shape[2]

    @property
    def ensemble_probs(self) -> np.ndarray:
        return ensemble_average(list(self.member_probs))

    @property
    def preds(self) -> np.ndarray:
        return predict_labels(self.ensemble_probs)

    def member_preds(self) -> dict[str, np.ndarray]:
        return {
            mid: predict_labels(self.member_probs[j])
            for j, mid in enumerate(self.member_ids)
        }

    def to_frame(self) -> pd.DataFrame:
        k = self.num_classes
        columns: dict[str, object] = {"scan_id": self.scan_ids}
        ensemble = self.ensemble_probs
        for i in range(k):
            columns[f"p_{i}"] = ensemble[:, i]
        columns["pred"] = self.preds
        columns["label"] = pd.array(self.labels, dtype="Int64")
        columns["filter_fallback"] = [int(f) for f in self.filter_fallback]
        for j in range(len(self.member_ids)):
            for i in range(k):
                columns[f"m{j}_p_{i}"] = self.member_probs[j, :, i]
        return pd.DataFrame(columns)


def models_sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".models.json")


def write_predictions(table: PredictionTable, path: str | Path) -> Path:
    """Write the CSV (probabilities with full float precision) and its sidecar."""
    text = table.to_frame().to_csv(index=False, lineterminator="\n", float_format="%.17g")
    target = save_to_file_sync(text, path)
    sidecar = {
        "task": table.task,
        "num_classes": table.num_classes,
        "members": table.member_ids,
    }
    save_to_file_sync(
        orjson.dumps(sidecar, option=orjson.OPT_INDENT_2), models_sidecar_path(target)
    )
    logger.info(f"Wrote predictions for {len(table.scan_ids)} scans to {target}")
    return target


def read_predictions(path: str | Path) -> PredictionTable:
    """
    Read a predictions CSV and its sidecar.

    Raises:
        EvaluationError: Missing files or columns.
    """
    csv_path = Path(path)
    sidecar_path = models_sidecar_path(csv_path)
    try:
        frame = pd.read_csv(csv_path, dtype={"scan_id": str})
        sidecar = orjson.loads(sidecar_path.read_bytes())
    except FileNotFoundError as e:
        raise EvaluationError(f"Predictions not found: {e.filename}") from e
    except (pd.errors.ParserError, orjson.JSONDecodeError) as e:
        raise EvaluationError(f"Malformed predictions {csv_path}: {e}") from e

    k = int(sidecar["num_classes"])
    members = list(sidecar["members"])
    needed = ["scan_id", "label", "filter_fallback"] + [
        f"m{j}_p_{i}" for j in range(len(members)) for i in range(k)
    ]
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise EvaluationError(f"Predictions {csv_path} lack columns {missing}")

    member_probs = np.stack(
        [
            frame[[f"m{j}_p_{i}" for i in range(k)]].to_numpy(dtype=np.float64)
            for j in range(len(members))
        ]
    )
    labels = [None if pd.isna(v) else int(v) for v in frame["label"]]
    return PredictionTable(
        task=sidecar["task"],
        scan_ids=frame["scan_id"].tolist(),
        member_ids=members,
        member_probs=member_probs,
        labels=labels,
        filter_fallback=[bool(v) for v in frame["filter_fallback"]],
    )
