from cov3d.nn.backbones import (
    SEVERITY_VARIANTS,
    ToyBackbone,
    build_backbone,
    severity_grid,
)
from cov3d.nn.blocks import ChannelReductionBlock, SeverityConvLayer, reduce_channels
from cov3d.nn.models import (
    DetectionModel,
    SeverityModel,
    detection_forward,
    severity_forward,
)

__all__ = [
    "SEVERITY_VARIANTS",
    "ChannelReductionBlock",
    "DetectionModel",
    "SeverityConvLayer",
    "SeverityModel",
    "ToyBackbone",
    "build_backbone",
    "detection_forward",
    "reduce_channels",
    "severity_forward",
    "severity_grid",
]
