"""
Detection and severity model assemblies and their checked forward passes.
"""

import logging
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from cov3d.errors import NonFiniteError, ShapeMismatchError
from cov3d.nn.backbones import DETECTION_BACKBONE, BackboneTier, build_backbone
from cov3d.nn.blocks import ChannelReductionBlock, SeverityConvLayer
from cov3d.volume import (
    COARSE_DEPTH,
    FINE_DEPTH,
    IDENTITY_STATS,
    IMAGENET_STATS,
    DualVolume,
    NormalizationStats,
    VolumeTensor,
)

logger = logging.getLogger(__name__)

__all__ = [
    "InputNormalization",
    "DetectionModel",
    "SeverityModel",
    "detection_forward",
    "severity_forward",
    "default_stats",
]


def default_stats(pretrained: bool) -> NormalizationStats:
    """ImageNet statistics for pretrained backbones, identity otherwise."""
    return IMAGENET_STATS if pretrained else IDENTITY_STATS


class InputNormalization(nn.Module):
    """
    Channel-wise (x - mean) / std on the 3-channel image fed to a backbone;
    the tensor form of `normalize_volume`, built from the same broadcast stats.

    Raises:
        DataError: When the number of stats matches neither 1 nor `channels`.
    """

    def __init__(self, stats: NormalizationStats, channels: int = 3):
        super().__init__()
        mean, std = stats.broadcast(channels)
        self.register_buffer("mean", torch.from_numpy(mean).float().unsqueeze(0))
        self.register_buffer("std", torch.from_numpy(std).float().unsqueeze(0))
        self.identity = stats.is_identity

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.identity:
            return x
        return (x - self.mean) / self.std


class DetectionModel(nn.Module):
    """ChannelReductionBlock(64→3) followed by a 2-class backbone."""

    architecture_id = "detection"

    def __init__(
        self,
        backbone_id: str = DETECTION_BACKBONE,
        num_classes: int = 2,
        in_depth: int = 64,
        tier: BackboneTier = "full",
        pretrained: bool = False,
        pretrained_path: str | Path | None = None,
        stats: NormalizationStats | None = None,
        backbone: nn.Module | None = None,
    ):
        super().__init__()
        self.backbone_id = backbone_id
        self.num_classes = num_classes
        self.in_depth = in_depth
        self.tier = tier
        self.stats = stats or default_stats(pretrained or pretrained_path is not None)
        self.block = ChannelReductionBlock(in_depth, 3, name="block")
        self.normalize = InputNormalization(self.stats)
        self.backbone = backbone or build_backbone(
            backbone_id,
            num_classes,
            tier=tier,
            pretrained=pretrained,
            pretrained_path=pretrained_path,
        )

    def model_args(self) -> dict[str, Any]:
        return {
            "backbone_id": self.backbone_id,
            "num_classes": self.num_classes,
            "in_depth": self.in_depth,
            "tier": self.tier,
            "stats": self.stats.model_dump(mode="json"),
        }

    @classmethod
    def from_args(cls, args: dict[str, Any]) -> "DetectionModel":
        args = dict(args)
        args["stats"] = NormalizationStats(**args["stats"])
        return cls(**args)

    def block_shapes(self) -> dict[str, list[int]]:
        return {"block": self.block.weight_shape}

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        return self.backbone(self.normalize(self.block(volume)))


class SeverityModel(nn.Module):
    """SeverityConvLayer (32→3 ∥ 16→3 → 6→3) followed by a 4-class backbone."""

    architecture_id = "severity"

    def __init__(
        self,
        backbone_id: str,
        num_classes: int = 4,
        coarse_depth: int = COARSE_DEPTH,
        fine_depth: int = FINE_DEPTH,
        tier: BackboneTier = "full",
        relu_after_fusion: bool = False,
        pretrained: bool = False,
        pretrained_path: str | Path | None = None,
        stats: NormalizationStats | None = None,
        backbone: nn.Module | None = None,
    ):
        super().__init__()
        self.backbone_id = backbone_id
        self.num_classes = num_classes
        self.tier = tier
        self.stats = stats or default_stats(pretrained or pretrained_path is not None)
        self.conv_layer = SeverityConvLayer(coarse_depth, fine_depth, relu_after_fusion)
        self.normalize = InputNormalization(self.stats)
        self.backbone = backbone or build_backbone(
            backbone_id,
            num_classes,
            tier=tier,
            pretrained=pretrained,
            pretrained_path=pretrained_path,
        )

    def model_args(self) -> dict[str, Any]:
        return {
            "backbone_id": self.backbone_id,
            "num_classes": self.num_classes,
            "coarse_depth": self.conv_layer.block1.in_channels,
            "fine_depth": self.conv_layer.block2.in_channels,
            "tier": self.tier,
            "relu_after_fusion": self.conv_layer.relu_after_fusion,
            "stats": self.stats.model_dump(mode="json"),
        }

    @classmethod
    def from_args(cls, args: dict[str, Any]) -> "SeverityModel":
        args = dict(args)
        args["stats"] = NormalizationStats(**args["stats"])
        return cls(**args)

    def block_shapes(self) -> dict[str, list[int]]:
        return self.conv_layer.block_shapes()

    def forward(self, coarse: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        return self.backbone(self.normalize(self.conv_layer(coarse, fine)))


def _as_batch(x: VolumeTensor | torch.Tensor, model: nn.Module) -> tuple[torch.Tensor, bool]:
    tensor = x.as_tensor() if isinstance(x, VolumeTensor) else x
    param = next(model.parameters())
    tensor = tensor.to(device=param.device, dtype=param.dtype)
    if tensor.dim() == 3:
        return tensor.unsqueeze(0), True
    return tensor, False


def _check_finite(t: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError("NaN or Inf values detected", stage=stage)
    return t


def detection_forward(m: DetectionModel, v: VolumeTensor | torch.Tensor) -> torch.Tensor:
    """
    Logits for a 64×H×W volume (or a batch of volumes), checking every stage
    for non-finite values.

    Raises:
        ShapeMismatchError: If the volume depth differs from the block's channels.
        NonFiniteError: If NaN or Inf appears; the stage name is attached.
    """
    x, single = _as_batch(v, m)
    _check_finite(x, "input")
    h = _check_finite(m.block(x), "block")
    logits = _check_finite(m.backbone(m.normalize(h)), "backbone")
    return logits.squeeze(0) if single else logits


def severity_forward(
    m: SeverityModel,
    d: DualVolume | tuple[torch.Tensor, torch.Tensor],
) -> torch.Tensor:
    """
    Logits for a dual volume: block1(coarse) ∥ block2(fine_depth) → block3 →
    backbone.

    Raises:
        ShapeMismatchError: Naming the block whose input has the wrong shape.
        NonFiniteError: If NaN or Inf appears; the stage name is attached.
    """
    if isinstance(d, DualVolume):
        coarse, fine = d.coarse, d.fine_depth
    else:
        coarse, fine = d
    c, single = _as_batch(coarse, m)
    f, _ = _as_batch(fine, m)
    if c.dim() != f.dim():
        raise ShapeMismatchError("coarse and fine inputs differ in rank", stage="block3")
    _check_finite(c, "input")
    _check_finite(f, "input")
    layer = m.conv_layer
    a = _check_finite(layer.block1(c), "block1")
    b = _check_finite(layer.block2(f), "block2")
    if a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(
            f"spatial sizes differ: {tuple(a.shape[2:])} vs {tuple(b.shape[2:])}",
            stage="block3",
        )
    fused = _check_finite(layer.block3(torch.cat([a, b], dim=1)), "block3")
    if layer.relu_after_fusion:
        fused = torch.relu(fused)
    logits = _check_finite(m.backbone(m.normalize(fused)), "backbone")
    return logits.squeeze(0) if single else logits
