"""
Lung segmentation with an attention-gated U-Net.

Encoder levels double the channel count from `base_channels`; every skip
connection passes through an additive attention gate driven by the
upsampled decoder features before it is concatenated back in. Inputs must
be divisible by 2**depth; `segment_lungs` zero-pads them to the next
multiple and crops the mask back when auto-pad is on.
"""

import logging
import math
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from cov3d.checkpoint import ModelCheckpoint, checkpoint_from_model
from cov3d.config import TrainConfig
from cov3d.errors import EmptyDatasetError, ShapeMismatchError
from cov3d.hash_utils import config_digest
from cov3d.training import TensorData, TrainHistory, fit
from cov3d.utils import seed_everything

logger = logging.getLogger(__name__)

__all__ = [
    "AttentionGate",
    "AttentionUNet",
    "BinaryMask",
    "dice",
    "dice_bce_loss",
    "apply_mask",
    "segment_lungs",
    "train_segmenter",
]


class BinaryMask(BaseModel):
    """An H×W grid of {0, 1} values."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: np.ndarray = Field(repr=False)

    @field_validator("grid")
    def validate_grid(cls, v):
        grid = np.asarray(v)
        if grid.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {grid.shape}")
        if grid.dtype != bool and not np.isin(grid, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        return grid.astype(bool)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.grid.shape)


def _grid(mask: BinaryMask | np.ndarray) -> np.ndarray:
    return mask.grid if isinstance(mask, BinaryMask) else np.asarray(mask).astype(bool)


def dice(pred: BinaryMask | np.ndarray, truth: BinaryMask | np.ndarray) -> float:
    """
    2|pred ∧ truth| / (|pred| + |truth|); 1.0 when both masks are empty.

    Raises:
        ShapeMismatchError: If the masks differ in shape.
    """
    p, t = _grid(pred), _grid(truth)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"mask shapes differ: {p.shape} vs {t.shape}", stage="dice")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def apply_mask(slice_: np.ndarray, mask: BinaryMask | np.ndarray) -> np.ndarray:
    """Zero every pixel outside the mask."""
    m = _grid(mask)
    if slice_.shape != m.shape:
        raise ShapeMismatchError(
            f"slice {slice_.shape} and mask {m.shape} differ", stage="apply_mask"
        )
    return np.where(m, slice_, 0).astype(slice_.dtype, copy=False)


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
        nn.GroupNorm(math.gcd(8, out_ch), out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1, bias=False),
        nn.GroupNorm(math.gcd(8, out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class AttentionGate(nn.Module):
    """Additive attention: skip * sigmoid(psi(relu(W_g g + W_x x)))."""

    def __init__(self, gate_channels: int, skip_channels: int, inter_channels: int):
        super().__init__()
        self.W_g = nn.Conv2d(gate_channels, inter_channels, kernel_size=1)
        self.W_x = nn.Conv2d(skip_channels, inter_channels, kernel_size=1)
        self.psi = nn.Conv2d(inter_channels, 1, kernel_size=1)

    def forward(self, g: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        alpha = torch.sigmoid(self.psi(F.relu(self.W_g(g) + self.W_x(x))))
        return x * alpha


class AttentionUNet(nn.Module):
    """Single-channel-in, single-logit-out attention U-Net."""

    architecture_id = "att-unet"
    num_classes = 1

    def __init__(
        self,
        depth: int = 4,
        base_channels: int = 32,
        threshold: float = 0.5,
        auto_pad: bool = True,
    ):
        super().__init__()
        if depth < 1 or base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")
        self.depth = depth
        self.base_channels = base_channels
        self.threshold = threshold
        self.auto_pad = auto_pad

        channels = [base_channels * 2**i for i in range(depth + 1)]
        self.encoders = nn.ModuleList(
            [_conv_block(1, channels[0])]
            + [_conv_block(channels[i], channels[i + 1]) for i in range(depth)]
        )
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(channels[i + 1], channels[i], kernel_size=2, stride=2)
            for i in range(depth)
        )
        self.gates = nn.ModuleList(
            AttentionGate(channels[i], channels[i], max(1, channels[i] // 2))
            for i in range(depth)
        )
        self.decoders = nn.ModuleList(
            _conv_block(2 * channels[i], channels[i]) for i in range(depth)
        )
        self.head = nn.Conv2d(channels[0], 1, kernel_size=1)

    @property
    def multiple(self) -> int:
        return 2**self.depth

    def model_args(self) -> dict[str, Any]:
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "threshold": self.threshold,
            "auto_pad": self.auto_pad,
        }

    @classmethod
    def from_args(cls, args: dict[str, Any]) -> "AttentionUNet":
        return cls(**args)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ShapeMismatchError(
                f"input {h}x{w} is not divisible by {self.multiple}", stage="segmentation"
            )
        skips = []
        for level, encoder in enumerate(self.encoders):
            x = encoder(x if level == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for i in reversed(range(self.depth)):
            g = self.ups[i](x)
            gated = self.gates[i](g, skips[i])
            x = self.decoders[i](torch.cat([gated, g], dim=1))
        return self.head(x)


def padded_size(h: int, w: int, multiple: int) -> tuple[int, int]:
    return -(-h // multiple) * multiple, -(-w // multiple) * multiple


def _pad_to(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    return F.pad(x, (0, width - w, 0, height - h))


@torch.no_grad()
def segment_lungs(
    slice_: np.ndarray, model: AttentionUNet, auto_pad: bool | None = None
) -> BinaryMask:
    """
    Lung mask of one H×W slice: sigmoid(logits) ≥ threshold.

    Raises:
        ShapeMismatchError: If H or W is not divisible by 2**depth and
            auto-pad is off; the message names the required padded size.
    """
    pad = model.auto_pad if auto_pad is None else auto_pad
    h, w = slice_.shape
    target_h, target_w = padded_size(h, w, model.multiple)
    if (target_h, target_w) != (h, w) and not pad:
        raise ShapeMismatchError(
            f"slice {h}x{w} must be padded to {target_h}x{target_w} "
            f"(multiple of 2**{model.depth}) or auto-pad enabled",
            stage="segmentation",
        )
    model.eval()
    param = next(model.parameters())
    x = torch.from_numpy(np.ascontiguousarray(slice_, dtype=np.float32))[None, None]
    x = _pad_to(x.to(device=param.device, dtype=param.dtype), target_h, target_w)
    prob = torch.sigmoid(model(x))[0, 0, :h, :w]
    return BinaryMask(grid=(prob >= model.threshold).cpu().numpy())


def dice_bce_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Equal-weight sum of binary cross-entropy and soft Dice loss."""
    target = target.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    prob = torch.sigmoid(logits).flatten(1)
    flat = target.flatten(1)
    intersection = (prob * flat).sum(dim=1)
    soft_dice = (2 * intersection + smooth) / (prob.sum(dim=1) + flat.sum(dim=1) + smooth)
    return bce + (1 - soft_dice).mean()


def _mean_dice(model: AttentionUNet, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    return float(np.mean([dice(segment_lungs(s, model, auto_pad=True), m) for s, m in pairs]))


def _stack_pairs(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]], multiple: int
) -> TensorData:
    h, w = pairs[0][0].shape
    th, tw = padded_size(h, w, multiple)
    images = torch.from_numpy(np.stack([s for s, _ in pairs]).astype(np.float32))[:, None]
    masks = torch.from_numpy(np.stack([m for _, m in pairs]).astype(np.float32))[:, None]
    return TensorData((_pad_to(images, th, tw),), _pad_to(masks, th, tw))


def train_segmenter(
    pairs: Sequence[tuple[np.ndarray, np.ndarray | BinaryMask]],
    config: TrainConfig,
    *,
    depth: int = 4,
    base_channels: int = 32,
    threshold: float = 0.5,
    auto_pad: bool = True,
    holdout_fraction: float = 0.2,
    config_snapshot: dict[str, Any] | None = None,
) -> tuple[ModelCheckpoint, TrainHistory]:
    """
    Train an AttentionUNet on (slice, mask) pairs with Dice + BCE loss.

    A `holdout_fraction` of the pairs (chosen with `config.seed`) is held
    out; its mean Dice selects the best epoch and is recorded as
    `heldout_dice`. With too few pairs to hold any out, Dice is measured
    on the training pairs instead.

    Raises:
        EmptyDatasetError: No pairs.
        ShapeMismatchError: A slice and its mask differ in shape, or pairs
            differ in size from each other.
    """
    if not pairs:
        raise EmptyDatasetError()
    arrays = [(np.asarray(s, dtype=np.float32), _grid(m)) for s, m in pairs]
    size = arrays[0][0].shape
    for k, (s, m) in enumerate(arrays):
        if s.shape != m.shape:
            raise ShapeMismatchError(
                f"pair {k}: slice {s.shape} and mask {m.shape} differ", stage="pairs"
            )
        if s.shape != size:
            raise ShapeMismatchError(
                f"pair {k} has size {s.shape}, expected {size}", stage="pairs"
            )

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(arrays))
    n_hold = int(len(arrays) * holdout_fraction)
    if n_hold >= len(arrays):
        n_hold = len(arrays) - 1
    held = [arrays[i] for i in order[:n_hold]]
    train_pairs = [arrays[i] for i in order[n_hold:]]
    scored = held or train_pairs

    seed_everything(config.seed, config.deterministic)
    model = AttentionUNet(depth, base_channels, threshold=threshold, auto_pad=auto_pad)
    train_data = _stack_pairs(train_pairs, model.multiple)
    val_data = _stack_pairs(held, model.multiple) if held else None

    def _metric(m: nn.Module, data: TensorData) -> float:
        # scores the original pair lists; `data` only tells train from held-out
        return _mean_dice(m, held if data is val_data else train_pairs)

    result = fit(
        model,
        train_data,
        config,
        loss_fn=dice_bce_loss,
        metric_fn=_metric,
        val=val_data,
        metric_name="dice",
    )
    heldout = _mean_dice(model, scored)
    logger.info(
        f"Segmenter {'held-out' if held else 'training'} Dice {heldout:.4f} "
        f"({len(train_pairs)} train / {len(held)} held-out pairs)"
    )
    snapshot = config_snapshot or config.model_dump(mode="json")
    ckpt = checkpoint_from_model(
        model,
        seed=config.seed,
        config=snapshot,
        config_digest=config_digest(snapshot),
        epochs_run=len(result.history),
        best_epoch=result.best_epoch,
        final_loss=result.final_loss,
        metrics={"heldout_dice": heldout, "n_heldout": float(len(held))},
    )
    return ckpt, result.history
