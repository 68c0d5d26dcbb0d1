"""
Probability averaging across independently trained models and macro-F1
evaluation with scan-level bootstrap uncertainty.

Scores are percentages. A class that is neither predicted nor present in
the truth contributes F1 = 0 unless `exclude_absent_classes` is set.
"""

import logging
import math
from typing import Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from cov3d.errors import EvaluationError

logger = logging.getLogger(__name__)

__all__ = [
    "BOOTSTRAP_METHOD",
    "softmax",
    "check_probabilities",
    "ensemble_average",
    "predict_label",
    "predict_labels",
    "confusion_matrix",
    "per_class_f1",
    "macro_f1",
    "bootstrap_ci",
    "BootstrapResult",
    "MemberScore",
    "EvalReport",
    "evaluate",
]

BOOTSTRAP_METHOD = "bootstrap-v1"
PROB_TOLERANCE = 1e-6


def softmax(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """
    Exponential normalization along the last axis, with max-subtraction.

    Raises:
        EvaluationError: If any logit is NaN or Inf.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise EvaluationError("softmax of an empty logit vector")
    if not np.isfinite(x).all():
        raise EvaluationError("softmax input contains NaN or Inf")
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def check_probabilities(p: np.ndarray) -> np.ndarray:
    """Validate one probability vector (or rows of them); returns float64."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] < 1:
        raise EvaluationError(f"expected (K,) or (N, K) probabilities, got {arr.shape}")
    if not np.isfinite(arr).all() or (arr < 0).any() or (arr > 1).any():
        raise EvaluationError("probabilities must be finite values in [0, 1]")
    if np.abs(arr.sum(axis=-1) - 1.0).max() > PROB_TOLERANCE:
        raise EvaluationError("probabilities must sum to 1")
    return arr


def ensemble_average(probs: Sequence[np.ndarray]) -> np.ndarray:
    """
    Componentwise mean of M probability vectors (or M equally shaped
    (N, K) tables). Summation is correctly rounded, so the result does not
    depend on the order of `probs`.

    Raises:
        EvaluationError: Empty list or members of different shapes.
    """
    if len(probs) == 0:
        raise EvaluationError("cannot average an empty list of probability vectors")
    arrays = [np.asarray(p, dtype=np.float64) for p in probs]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise EvaluationError(f"ragged probability vectors: {sorted(shapes)}")
    stacked = np.stack(arrays).reshape(len(arrays), -1)
    mean = np.array([math.fsum(column) for column in stacked.T]) / len(arrays)
    return mean.reshape(arrays[0].shape)


def predict_label(p: np.ndarray) -> int:
    """Argmax; ties go to the lowest class index."""
    arr = check_probabilities(p)
    if arr.ndim != 1:
        raise EvaluationError("predict_label takes a single probability vector")
    return int(np.argmax(arr))


def predict_labels(p: np.ndarray) -> np.ndarray:
    """Row-wise `predict_label` for an (N, K) table."""
    return np.argmax(check_probabilities(np.atleast_2d(p)), axis=1)


def _as_labels(
    preds: Sequence[int], truth: Sequence[int], num_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    if len(p) != len(t):
        raise EvaluationError(f"length mismatch: {len(p)} predictions, {len(t)} labels")
    if len(p) == 0:
        raise EvaluationError("empty predictions")
    for name, arr in (("prediction", p), ("label", t)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise EvaluationError(f"{name} outside [0, {num_classes})")
    return p, t


def confusion_matrix(
    preds: Sequence[int], truth: Sequence[int], num_classes: int
) -> np.ndarray:
    """K×K counts; rows are true classes, columns predicted classes."""
    p, t = _as_labels(preds, truth, num_classes)
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(
        num_classes, num_classes
    )


def _f1_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    present = denom > 0
    f1 = np.divide(200.0 * tp, denom, out=np.zeros_like(tp), where=present)
    return f1, present


def per_class_f1(
    preds: Sequence[int], truth: Sequence[int], num_classes: int
) -> np.ndarray:
    """Per-class F1 = 2TP / (2TP + FP + FN) in percent; 0 where undefined."""
    f1, _ = _f1_from_confusion(confusion_matrix(preds, truth, num_classes))
    return f1


def _macro(cm: np.ndarray, exclude_absent_classes: bool) -> float:
    f1, present = _f1_from_confusion(cm)
    if exclude_absent_classes:
        f1 = f1[present]
    return float(f1.mean())


def macro_f1(
    preds: Sequence[int],
    truth: Sequence[int],
    num_classes: int,
    exclude_absent_classes: bool = False,
) -> float:
    """
    Unweighted mean of per-class F1 over all K classes, in percent.

    Raises:
        EvaluationError: Length mismatch, empty input or out-of-range label.
    """
    cm = confusion_matrix(preds, truth, num_classes)
    return _macro(cm, exclude_absent_classes)


class BootstrapResult(BaseModel):
    mean: float
    halfwidth: float
    n_resamples: int
    seed: int


def bootstrap_ci(
    preds: Sequence[int],
    truth: Sequence[int],
    num_classes: int,
    n_resamples: int = 1000,
    seed: int = 0,
    exclude_absent_classes: bool = False,
) -> BootstrapResult:
    """
    Resample scan-level (pred, truth) pairs with replacement and report the
    mean and standard deviation (the half-width) of the resampled macro F1.

    Raises:
        EvaluationError: Empty predictions or fewer than 2 resamples.
    """
    if n_resamples < 2:
        raise EvaluationError("n_resamples must be at least 2")
    p, t = _as_labels(preds, truth, num_classes)
    rng = np.random.default_rng(seed)
    n = len(p)
    scores = np.empty(n_resamples)
    for r in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        cm = np.bincount(
            t[idx] * num_classes + p[idx], minlength=num_classes**2
        ).reshape(num_classes, num_classes)
        scores[r] = _macro(cm, exclude_absent_classes)
    return BootstrapResult(
        mean=float(scores.mean()),
        halfwidth=float(scores.std(ddof=1)),
        n_resamples=n_resamples,
        seed=seed,
    )


class MemberScore(BaseModel):
    member_id: str
    macro_f1: float
    ci_mean: float
    ci_halfwidth: float


class EvalReport(BaseModel):
    """Ensemble score, per-class scores, bootstrap interval and member rows."""

    task: str
    class_names: list[str]
    macro_f1: float
    per_class_f1: list[float | None]
    ci_mean: float
    ci_halfwidth: float
    n_bootstrap: int
    seed: int
    n_samples: int
    method: str = BOOTSTRAP_METHOD
    exclude_absent_classes: bool = False
    members: list[MemberScore] = Field(default_factory=list)
    member_mean: float | None = None
    member_spread: float | None = None

    @model_validator(mode="after")
    def check_scores(self) -> "EvalReport":
        scores = [s for s in self.per_class_f1 if s is not None]
        if scores and abs(self.macro_f1 - sum(scores) / len(scores)) > 1e-9:
            raise ValueError("macro_f1 must equal the mean of per_class_f1")
        for s in [self.macro_f1, *scores]:
            if not 0.0 <= s <= 100.0:
                raise ValueError(f"score {s} outside [0, 100]")
        return self


def evaluate(
    preds: Sequence[int],
    truth: Sequence[int],
    class_names: list[str],
    *,
    task: str,
    n_bootstrap: int = 1000,
    seed: int = 0,
    exclude_absent_classes: bool = False,
    member_preds: dict[str, Sequence[int]] | None = None,
) -> EvalReport:
    """
    Build an EvalReport for ensemble predictions and, optionally, for each
    member model. `member_spread` is the sample standard deviation of the
    member macro F1 scores (None with fewer than two members).
    """
    k = len(class_names)
    cm = confusion_matrix(preds, truth, k)
    f1, present = _f1_from_confusion(cm)
    per_class = [
        None if exclude_absent_classes and not present[i] else float(f1[i])
        for i in range(k)
    ]
    ci = bootstrap_ci(preds, truth, k, n_bootstrap, seed, exclude_absent_classes)

    members = []
    for member_id, mp in (member_preds or {}).items():
        mci = bootstrap_ci(mp, truth, k, n_bootstrap, seed, exclude_absent_classes)
        members.append(
            MemberScore(
                member_id=member_id,
                macro_f1=macro_f1(mp, truth, k, exclude_absent_classes),
                ci_mean=mci.mean,
                ci_halfwidth=mci.halfwidth,
            )
        )
    member_scores = np.array([m.macro_f1 for m in members])
    report = EvalReport(
        task=task,
        class_names=class_names,
        macro_f1=_macro(cm, exclude_absent_classes),
        per_class_f1=per_class,
        ci_mean=ci.mean,
        ci_halfwidth=ci.halfwidth,
        n_bootstrap=n_bootstrap,
        seed=seed,
        n_samples=int(cm.sum()),
        exclude_absent_classes=exclude_absent_classes,
        members=members,
        member_mean=float(member_scores.mean()) if len(members) else None,
        member_spread=float(member_scores.std(ddof=1)) if len(members) > 1 else None,
    )
    logger.info(
        f"{task}: macro F1 {report.macro_f1:.2f} ± {report.ci_halfwidth:.2f} "
        f"({report.n_samples} scans, {len(members)} members)"
    )
    return report
