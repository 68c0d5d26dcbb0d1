"""
2D classification backbones in two tiers.

The "full" tier builds full timm architectures (DenseNet-161 for
detection, the Inception family for severity, ResNeXt-50 for the slice
filter) with the head replaced to match the task's class count. The "toy"
tier is a small CNN with the same interface for CPU-scale runs and tests.
"""

import logging
from pathlib import Path
from typing import Literal

import timm
import torch
import torch.nn as nn

from cov3d.errors import ModelError

logger = logging.getLogger(__name__)

__all__ = [
    "BackboneTier",
    "DETECTION_BACKBONE",
    "FILTER_BACKBONE",
    "SEVERITY_VARIANTS",
    "ToyBackbone",
    "build_backbone",
    "severity_grid",
]

BackboneTier = Literal["full", "toy"]

DETECTION_BACKBONE = "densenet161"
FILTER_BACKBONE = "resnext50_32x4d"
SEVERITY_VARIANTS = ("inception_v3", "inception_v4", "inception_resnet_v2")
SEVERITY_RUNS = 2

# variant-dependent widths keep toy severity members structurally distinct
_TOY_WIDTHS = {
    "inception_v3": 16,
    "inception_v4": 24,
    "inception_resnet_v2": 32,
}


def _conv_bn(in_ch: int, out_ch: int) -> list[nn.Module]:
    return [
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    ]


class ToyBackbone(nn.Module):
    """
    Three batch-normalized conv stages with one 2x max pool, then average and
    max pooling side by side into a linear head. The max branch responds to
    small bright regions such as lesion texture.
    """

    def __init__(self, num_classes: int, in_chans: int = 3, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.features = nn.Sequential(
            *_conv_bn(in_chans, width),
            *_conv_bn(width, width),
            nn.MaxPool2d(2, ceil_mode=True),
            *_conv_bn(width, 2 * width),
        )
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.max_pool = nn.AdaptiveMaxPool2d(1)
        self.head = nn.Linear(4 * width, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        pooled = torch.cat([self.avg_pool(h), self.max_pool(h)], dim=1)
        return self.head(torch.flatten(pooled, 1))


def build_backbone(
    backbone_id: str,
    num_classes: int,
    *,
    tier: BackboneTier = "full",
    in_chans: int = 3,
    pretrained: bool = False,
    pretrained_path: str | Path | None = None,
) -> nn.Module:
    """
    Create a backbone with a `num_classes` head.

    Args:
        backbone_id: timm model name, e.g. "densenet161" or "inception_v4".
        num_classes: Size of the replaced classification head.
        tier: "full" for the full timm architecture, "toy" for `ToyBackbone`.
        in_chans: Number of input channels.
        pretrained: Load timm's published weights (full tier only).
        pretrained_path: Local weights file; the classifier head is skipped.

    Raises:
        ModelError: Unknown backbone id or unreadable weights.
    """
    if tier == "toy":
        width = _TOY_WIDTHS.get(backbone_id, 16)
        return ToyBackbone(num_classes, in_chans=in_chans, width=width)

    kwargs: dict = {"num_classes": num_classes, "in_chans": in_chans}
    if pretrained_path is not None:
        kwargs["pretrained"] = True
        kwargs["pretrained_cfg_overlay"] = {"file": str(pretrained_path)}
    else:
        kwargs["pretrained"] = pretrained
    try:
        model = timm.create_model(backbone_id, **kwargs)
    except RuntimeError as e:
        raise ModelError(f"Cannot build backbone {backbone_id!r}: {e}", stage="backbone") from e
    except (OSError, ValueError) as e:
        raise ModelError(
            f"Cannot load weights for backbone {backbone_id!r}: {e}", stage="backbone"
        ) from e
    logger.info(
        f"Built {backbone_id} backbone ({num_classes} classes, "
        f"pretrained={kwargs['pretrained']})"
    )
    return model


def severity_grid(runs: int = SEVERITY_RUNS) -> list[tuple[str, int]]:
    """Every (variant, run_index) pair of the severity ensemble."""
    return [(variant, run) for variant in SEVERITY_VARIANTS for run in range(runs)]
