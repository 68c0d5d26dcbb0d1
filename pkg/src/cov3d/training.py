"""
The shared training loop: step-decay learning-rate schedule, seeded
shuffling, non-finite loss detection and best-validation checkpoint
selection.
"""

import copy
import logging
import math
import time
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field
from torch.utils.data import DataLoader, TensorDataset

from cov3d.checkpoint import ModelCheckpoint, checkpoint_from_model
from cov3d.config import TrainConfig
from cov3d.ensemble import macro_f1
from cov3d.errors import (
    Cov3DFileError,
    EmptyDatasetError,
    MissingClassError,
    NonFiniteLossError,
    TrainingError,
)
from cov3d.file_system import save_to_file_sync
from cov3d.hash_utils import config_digest
from cov3d.utils import resolve_device, seed_everything

logger = logging.getLogger(__name__)

__all__ = [
    "TensorData",
    "EpochRecord",
    "TrainHistory",
    "FitResult",
    "lr_at_epoch",
    "make_optimizer",
    "class_weights",
    "predict_logits",
    "classification_metric",
    "fit",
    "train_model",
]

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """
    Learning rate for a 0-based epoch: lr0 · factor^(decay epochs ≤ epoch).

    Computed in decimal arithmetic so the schedule hits its nominal values
    exactly (1e-4 → 1e-5 → 1e-6).

    Raises:
        TrainingError: If `epoch` is outside [0, config.epochs).
    """
    if not 0 <= epoch < config.epochs:
        raise TrainingError(f"epoch {epoch} outside [0, {config.epochs})")
    n_decays = sum(1 for d in config.lr_decay_epochs if d <= epoch)
    lr = Decimal(repr(config.lr0)) * Decimal(repr(config.lr_decay_factor)) ** n_decays
    return float(lr)


@dataclass
class TensorData:
    """Model inputs (one tensor per forward argument) and their targets."""

    inputs: tuple[torch.Tensor, ...]
    targets: torch.Tensor

    def __post_init__(self):
        lengths = {len(t) for t in self.inputs} | {len(self.targets)}
        if len(lengths) > 1:
            raise TrainingError(f"inputs and targets differ in length: {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, index: np.ndarray | list[int]) -> "TensorData":
        idx = torch.as_tensor(np.asarray(index, dtype=np.int64))
        return TensorData(tuple(t[idx] for t in self.inputs), self.targets[idx])


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    lr: float
    train_metric: float
    val_metric: float | None = None
    seconds: float = 0.0


class TrainHistory(BaseModel):
    """Per-epoch training log; one row per epoch that ran."""

    metric_name: str = "macro_f1"
    rows: list[EpochRecord] = Field(default_factory=list)
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def loss_column(self) -> list[float]:
        return [r.loss for r in self.rows]

    @property
    def lr_column(self) -> list[float]:
        return [r.lr for r in self.rows]

    def to_frame(self) -> pd.DataFrame:
        columns = list(EpochRecord.model_fields)
        return pd.DataFrame([r.model_dump() for r in self.rows], columns=columns)

    def to_csv(self, path: str | Path) -> Path:
        text = self.to_frame().to_csv(index=False, lineterminator="\n", float_format=None)
        return save_to_file_sync(text, path)

    @classmethod
    def from_csv(cls, path: str | Path, metric_name: str = "macro_f1") -> "TrainHistory":
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError) as e:
            raise Cov3DFileError(f"Cannot read history {path}: {e}") from e
        rows = []
        for record in frame.to_dict(orient="records"):
            val = record.get("val_metric")
            record["val_metric"] = None if val is None or math.isnan(val) else val
            rows.append(EpochRecord(**record))
        return cls(
            metric_name=metric_name,
            rows=rows,
            wall_time=float(sum(r.seconds for r in rows)),
        )


@dataclass
class FitResult:
    history: TrainHistory
    best_epoch: int | None
    final_loss: float | None


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer_id == "sgd":
        return torch.optim.SGD(model.parameters(), lr=config.lr0, momentum=config.momentum)
    return torch.optim.Adam(model.parameters(), lr=config.lr0)


def class_weights(targets: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Inverse-frequency weights N / (K · count_k); absent classes get 0."""
    counts = torch.bincount(targets.long(), minlength=num_classes).double()
    weights = torch.where(
        counts > 0, len(targets) / (num_classes * counts.clamp(min=1)), torch.zeros_like(counts)
    )
    return weights.float()


@torch.no_grad()
def predict_logits(
    model: nn.Module, inputs: tuple[torch.Tensor, ...], batch_size: int = 16
) -> torch.Tensor:
    """Eval-mode forward over `inputs` in batches; logits returned on cpu."""
    model.eval()
    device = next(model.parameters()).device
    n = len(inputs[0])
    outputs = []
    for start in range(0, n, batch_size):
        batch = [t[start : start + batch_size].to(device) for t in inputs]
        outputs.append(model(*batch).float().cpu())
    if not outputs:
        return torch.zeros(0)
    return torch.cat(outputs)


def classification_metric(
    num_classes: int, batch_size: int = 16
) -> Callable[[nn.Module, TensorData], float]:
    """Macro F1 (percent) of argmax predictions."""

    def _metric(model: nn.Module, data: TensorData) -> float:
        preds = predict_logits(model, data.inputs, batch_size).argmax(dim=1)
        return macro_f1(preds.tolist(), data.targets.tolist(), num_classes)

    return _metric


def fit(
    model: nn.Module,
    train: TensorData,
    config: TrainConfig,
    *,
    loss_fn: LossFn,
    metric_fn: Callable[[nn.Module, TensorData], float],
    val: TensorData | None = None,
    metric_name: str = "macro_f1",
) -> FitResult:
    """
    Train `model` in place.

    The learning rate of every epoch is set from `lr_at_epoch`. When `val` is
    given the weights of the epoch with the best validation metric are
    restored at the end (earliest epoch wins ties); otherwise the last
    epoch's weights are kept.

    Raises:
        NonFiniteLossError: If a batch loss is NaN or Inf.
    """
    device = resolve_device(config.device)
    model.to(device)
    generator = torch.Generator()
    generator.manual_seed(config.effective_shuffle_seed)
    loader = DataLoader(
        TensorDataset(*train.inputs, train.targets),
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=config.num_workers,
    )
    optimizer = make_optimizer(model, config)

    history = TrainHistory(metric_name=metric_name)
    best_state: dict[str, torch.Tensor] | None = None
    best_metric = -math.inf
    best_epoch: int | None = None
    started = time.perf_counter()

    for epoch in range(config.epochs):
        epoch_start = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        total, seen = 0.0, 0
        for batch_index, batch in enumerate(loader):
            *inputs, target = (t.to(device) for t in batch)
            optimizer.zero_grad()
            loss = loss_fn(model(*inputs), target)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss.item()}", epoch=epoch, batch=batch_index
                )
            loss.backward()
            optimizer.step()
            total += loss.item() * len(target)
            seen += len(target)

        record = EpochRecord(
            epoch=epoch,
            loss=total / seen,
            lr=lr,
            train_metric=metric_fn(model, train),
            val_metric=metric_fn(model, val) if val is not None else None,
            seconds=time.perf_counter() - epoch_start,
        )
        history.rows.append(record)
        logger.info(
            f"epoch {epoch + 1}/{config.epochs} loss={record.loss:.4f} lr={lr:g} "
            f"train_{metric_name}={record.train_metric:.2f}"
            + (f" val_{metric_name}={record.val_metric:.2f}" if val is not None else "")
        )
        if val is not None and record.val_metric > best_metric:
            best_metric = record.val_metric
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    if val is None:
        best_epoch = config.epochs - 1 if config.epochs else None
    elif best_state is not None:
        model.load_state_dict(best_state)
        logger.info(f"Restored weights of epoch {best_epoch + 1} (best val {metric_name})")

    model.eval()
    history.wall_time = time.perf_counter() - started
    final_loss = history.rows[-1].loss if history.rows else None
    return FitResult(history=history, best_epoch=best_epoch, final_loss=final_loss)


def _check_classes(data: TensorData, num_classes: int, what: str) -> None:
    present = set(data.targets.tolist())
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        raise MissingClassError(f"{what} lacks classes {missing}", missing=missing)
    unknown = sorted(c for c in present if not 0 <= c < num_classes)
    if unknown:
        raise TrainingError(f"{what} has labels outside [0, {num_classes}): {unknown}")


def train_model(
    model: nn.Module,
    data: TensorData,
    config: TrainConfig,
    *,
    val: TensorData | None = None,
    num_classes: int | None = None,
    config_snapshot: dict[str, Any] | None = None,
    extra: dict[str, Any] | None = None,
) -> tuple[ModelCheckpoint, TrainHistory]:
    """
    Train a classifier with softmax cross-entropy and return its checkpoint.

    Args:
        model: Any cov3d classification model (detection, severity, filter).
        data: Training volumes and integer class labels.
        config: Training hyperparameters.
        val: Optional validation split used for checkpoint selection.
        num_classes: Head size; defaults to `model.num_classes`.
        config_snapshot: Flat config stored in the checkpoint and digested.
        extra: Additional metadata stored in the checkpoint.

    Raises:
        EmptyDatasetError: No training samples.
        MissingClassError: A class of the head has no training sample.
        NonFiniteLossError: The loss diverged.
    """
    k = num_classes or model.num_classes
    if len(data) == 0:
        raise EmptyDatasetError()
    _check_classes(data, k, "training set")
    if val is not None and len(val) == 0:
        val = None

    seed_everything(config.seed, config.deterministic)
    weight = class_weights(data.targets, k) if config.class_weighting else None
    device = resolve_device(config.device)
    if weight is not None:
        weight = weight.to(device)

    def _loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return F.cross_entropy(logits, target.long(), weight=weight)

    metric_fn = classification_metric(k, config.batch_size)
    result = fit(model, data, config, loss_fn=_loss, metric_fn=metric_fn, val=val)

    metrics = {"train_macro_f1": metric_fn(model, data)}
    if val is not None:
        metrics["val_macro_f1"] = metric_fn(model, val)
    snapshot = config_snapshot or config.model_dump(mode="json")
    ckpt = checkpoint_from_model(
        model,
        seed=config.seed,
        config=snapshot,
        config_digest=config_digest(snapshot),
        epochs_run=len(result.history),
        best_epoch=result.best_epoch,
        final_loss=result.final_loss,
        metrics=metrics,
        extra=extra or {},
    )
    return ckpt, result.history
