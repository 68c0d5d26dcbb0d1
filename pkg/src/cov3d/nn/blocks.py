"""
Channel-reduction convolutions that turn depth-stacked volumes into
3-channel images a 2D backbone can consume.
"""

import logging
import math

import torch
import torch.nn as nn

from cov3d.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

__all__ = [
    "ChannelReductionBlock",
    "SeverityConvLayer",
    "reduce_channels",
]


class ChannelReductionBlock(nn.Module):
    """
    A single 3×3 convolution, stride 1, padding 1, with bias, mapping
    `in_channels` depth slices to `out_channels` (3) image channels.

    Spatial dimensions are preserved exactly. Weights use Kaiming-uniform
    fan-in initialization, biases the usual U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """

    def __init__(self, in_channels: int, out_channels: int = 3, name: str = "block"):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.name = name
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=True
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.kaiming_uniform_(self.conv.weight, mode="fan_in", nonlinearity="relu")
        fan_in = self.in_channels * 9
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(self.conv.bias, -bound, bound)

    @property
    def weight_shape(self) -> list[int]:
        return list(self.conv.weight.shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}",
                stage=self.name,
            )
        return self.conv(x)


def reduce_channels(block: ChannelReductionBlock, v: torch.Tensor) -> torch.Tensor:
    """
    Apply a reduction block to a C_in×H×W volume (or a batch of them).

    Returns:
        A 3×H×W tensor, or B×3×H×W for batched input.

    Raises:
        ShapeMismatchError: If the volume's channel count differs from the block's.
    """
    if v.dim() == 3:
        return block(v.unsqueeze(0)).squeeze(0)
    return block(v)


class SeverityConvLayer(nn.Module):
    """
    Fuses the two depth views of a scan into one 3-channel image:
    block1(coarse) and block2(fine_depth) are concatenated along channels,
    block1's output first, and block3 maps the 6 channels back to 3.
    """

    def __init__(
        self,
        coarse_depth: int = 32,
        fine_depth: int = 16,
        relu_after_fusion: bool = False,
    ):
        super().__init__()
        self.block1 = ChannelReductionBlock(coarse_depth, 3, name="block1")
        self.block2 = ChannelReductionBlock(fine_depth, 3, name="block2")
        self.block3 = ChannelReductionBlock(6, 3, name="block3")
        self.relu_after_fusion = relu_after_fusion

    def forward(self, coarse: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        a = self.block1(coarse)
        b = self.block2(fine)
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeMismatchError(
                f"cannot concatenate block outputs {tuple(a.shape)} and {tuple(b.shape)}",
                stage="block3",
            )
        fused = self.block3(torch.cat([a, b], dim=1))
        if self.relu_after_fusion:
            fused = torch.relu(fused)
        return fused

    def block_shapes(self) -> dict[str, list[int]]:
        return {
            name: block.weight_shape
            for name, block in (
                ("block1", self.block1),
                ("block2", self.block2),
                ("block3", self.block3),
            )
        }
