"""Dual-encoder gland segmentation network with boundary-enhanced attention."""

from .network import DEANet, LossConfig, ModelConfig, NetworkOutputs, build_ablation, compute_loss
from .types import ImageBatch, MetricReport, ShapeError, validate_shapes

__all__ = [
    "DEANet",
    "ImageBatch",
    "LossConfig",
    "MetricReport",
    "ModelConfig",
    "NetworkOutputs",
    "ShapeError",
    "build_ablation",
    "compute_loss",
    "validate_shapes",
]
__version__ = "0.1.0"
