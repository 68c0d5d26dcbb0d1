"""
2D lung / non-lung slice classifier and the filtering step that drops
slices without lung before volume assembly.
"""

import logging
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel

from cov3d.checkpoint import ModelCheckpoint
from cov3d.config import PipelineConfig, TrainConfig
from cov3d.data.scans import CTScan
from cov3d.errors import EmptyDatasetError
from cov3d.nn.backbones import FILTER_BACKBONE, BackboneTier, build_backbone
from cov3d.training import TensorData, TrainHistory, predict_logits, train_model
from cov3d.utils import seed_everything

logger = logging.getLogger(__name__)

__all__ = [
    "SliceFilterModel",
    "FilterResult",
    "prepare_slices",
    "select_slices",
    "filter_slices",
    "build_slice_filter",
    "train_slice_filter",
]


def prepare_slices(slices: np.ndarray, size: int) -> torch.Tensor:
    """(n, H, W) slices to an (n, 1, size, size) float tensor, bilinear resize."""
    x = torch.from_numpy(np.ascontiguousarray(slices, dtype=np.float32)).unsqueeze(1)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


class SliceFilterModel(nn.Module):
    """A 2-logit (non-lung, lung) slice classifier with a decision threshold."""

    architecture_id = "slice-filter"
    num_classes = 2

    def __init__(
        self,
        backbone_id: str = FILTER_BACKBONE,
        tier: BackboneTier = "full",
        input_size: int = 224,
        threshold: float = 0.5,
        pretrained: bool = False,
        backbone: nn.Module | None = None,
    ):
        super().__init__()
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie strictly inside (0, 1)")
        self.backbone_id = backbone_id
        self.tier = tier
        self.input_size = input_size
        self.threshold = threshold
        self.backbone = backbone or build_backbone(
            backbone_id, 2, tier=tier, in_chans=1, pretrained=pretrained
        )

    def model_args(self) -> dict[str, Any]:
        return {
            "backbone_id": self.backbone_id,
            "tier": self.tier,
            "input_size": self.input_size,
            "threshold": self.threshold,
        }

    @classmethod
    def from_args(cls, args: dict[str, Any]) -> "SliceFilterModel":
        return cls(**args)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def lung_probabilities(self, slices: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """P(lung) per slice of an (n, H, W) stack."""
        logits = predict_logits(self, (prepare_slices(slices, self.input_size),), batch_size)
        return torch.softmax(logits.double(), dim=1)[:, 1].numpy()


class FilterResult(BaseModel):
    scan_id: str
    kept: list[int]
    kept_indices: list[int]
    probabilities: list[float]
    fallback: bool

    @property
    def n_kept(self) -> int:
        return len(self.kept)


def select_slices(
    probabilities: Sequence[float], threshold: float
) -> tuple[list[int], bool]:
    """
    Positions with P(lung) ≥ threshold, in input order. When nothing passes
    every position is kept and the fallback flag is set.
    """
    kept = [i for i, p in enumerate(probabilities) if p >= threshold]
    if not kept:
        return list(range(len(probabilities))), True
    return kept, False


def filter_slices(
    scan: CTScan, model: SliceFilterModel, threshold: float | None = None
) -> FilterResult:
    """
    Classify every slice of a scan and keep the lung slices.

    Raises:
        ScanLoadError: If a slice cannot be decoded (its index is attached).
    """
    cut = model.threshold if threshold is None else threshold
    probabilities = model.lung_probabilities(scan.read_slices())
    kept, fallback = select_slices(probabilities, cut)
    if fallback:
        logger.warning(
            f"No slice of scan {scan.scan_id} reached P(lung) >= {cut}; keeping all "
            f"{scan.n_slices} slices"
        )
    else:
        logger.debug(f"Scan {scan.scan_id}: kept {len(kept)}/{scan.n_slices} slices")
    return FilterResult(
        scan_id=scan.scan_id,
        kept=kept,
        kept_indices=[scan.slice_indices[i] for i in kept],
        probabilities=[float(p) for p in probabilities],
        fallback=fallback,
    )


def build_slice_filter(pipeline: PipelineConfig) -> SliceFilterModel:
    return SliceFilterModel(
        backbone_id=pipeline.filter_backbone,
        tier=pipeline.backbone_tier,
        input_size=pipeline.filter_input_size,
        threshold=pipeline.filter_threshold,
        pretrained=pipeline.pretrained,
    )


def train_slice_filter(
    slices: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    pipeline: PipelineConfig | None = None,
    *,
    config_snapshot: dict[str, Any] | None = None,
) -> tuple[ModelCheckpoint, TrainHistory]:
    """
    Train the lung / non-lung slice classifier.

    Args:
        slices: (N, H, W) slices in [0, 1].
        labels: (N,) 1 for lung, 0 for non-lung.
        config: Training hyperparameters; `seed` fixes initialization and order.
        pipeline: Backbone, input size and threshold settings.

    Raises:
        EmptyDatasetError: No slices.
        MissingClassError: Only one of the two classes is present.
    """
    if len(slices) == 0:
        raise EmptyDatasetError()
    pipeline = pipeline or PipelineConfig()
    seed_everything(config.seed, config.deterministic)
    model = build_slice_filter(pipeline)
    data = TensorData(
        inputs=(prepare_slices(slices, pipeline.filter_input_size),),
        targets=torch.as_tensor(np.asarray(labels, dtype=np.int64)),
    )
    ckpt, history = train_model(model, data, config, config_snapshot=config_snapshot)
    probs = model.lung_probabilities(slices)
    accuracy = float(np.mean((probs >= model.threshold) == (np.asarray(labels) == 1)))
    ckpt.metrics["train_accuracy"] = accuracy
    logger.info(f"Slice filter training accuracy {accuracy:.3f}")
    return ckpt, history
