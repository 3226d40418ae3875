"""Shared data contracts: image batches, class masks, instance maps, reports."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

BACKGROUND, INTERIOR, BOUNDARY = 0, 1, 2
NUM_CLASSES = 3

# Number of 2x poolings in the backbone; spatial sizes must survive all of them.
DEPTH = 4
SIZE_MULTIPLE = 2 ** DEPTH

# Which operation produces each named intermediate tensor.
STAGES = {
    "F_l": "LocalSemanticEncoder.forward",
    "F_h": "BackboneEncoder.forward",
    "F_h'": "FeatureFusionModule.fuse_levels",
    "F_a": "FeatureFusionModule.channel_attention",
    "F_1'..F_4'": "FeatureFusionModule.multiscale_cascade",
    "F_m": "FeatureFusionModule.forward",
    "F_m'": "DeepFeatureDecoderBlock.pooled_branch",
    "F_n": "previous decoder stage / bottleneck",
    "F_c": "DeepFeatureDecoderBlock.merge",
    "F_s": "DeepFeatureDecoderBlock.forward",
    "F_g": "BoundaryEnhancedAttention.boundary_features",
    "M_g": "BoundaryEnhancedAttention.boundary_map",
    "delta": "BoundaryEnhancedAttention.adaptive_threshold",
    "M_t": "BoundaryEnhancedAttention.threshold",
    "M_b": "BoundaryEnhancedAttention.refine",
    "F_s'": "BoundaryEnhancedAttention.forward",
}


class ShapeError(ValueError):
    """Raised when a tensor violates a shape or value invariant."""


@dataclass(frozen=True)
class ImageBatch:
    data: torch.Tensor  # B x 3 x H x W in [0, 1]
    ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.ids and len(self.ids) != self.data.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for a batch of {self.data.shape[0]}")


def validate_shapes(batch: ImageBatch | torch.Tensor) -> ImageBatch | torch.Tensor:
    """Return ``batch`` unchanged if it is a finite B x 3 x H x W tensor with H, W divisible by 16."""
    x = batch.data if isinstance(batch, ImageBatch) else batch
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected B x 3 x H x W, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    for name, size in (("height", h), ("width", w)):
        if size % SIZE_MULTIPLE or size == 0:
            raise ShapeError(f"{name} {size} is not a positive multiple of {SIZE_MULTIPLE}")
    if not torch.isfinite(x).all():
        raise ShapeError("batch contains non-finite values (NaN or inf)")
    return batch


class ThresholdValue(NamedTuple):
    value: torch.Tensor  # B x 1 x 1 x 1, one threshold per sample


class DecoderStageOutput(NamedTuple):
    f_s_prime: torch.Tensor
    m_g: torch.Tensor
    m_t: torch.Tensor
    m_b: torch.Tensor
    delta: ThresholdValue


def check_triple_mask(mask: torch.Tensor | np.ndarray) -> None:
    values = torch.as_tensor(mask)
    if values.numel() and (values.min() < 0 or values.max() >= NUM_CLASSES):
        bad = sorted(set(torch.unique(values).tolist()) - {0, 1, 2})
        raise ValueError(f"triple mask contains values outside {{0,1,2}}: {bad}")


def one_hot_mask(mask: torch.Tensor) -> torch.Tensor:
    """B x H x W class map -> B x 3 x H x W float one-hot."""
    check_triple_mask(mask)
    return F.one_hot(mask.long(), NUM_CLASSES).permute(0, 3, 1, 2).float()


def decode_one_hot(onehot: torch.Tensor) -> torch.Tensor:
    return onehot.argmax(dim=1)


def harmonic_f1(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    """Object-level scores for one image or a pooled set of images.

    Detection counts are kept so that pooled reports compute precision and recall
    from summed counts, which keeps ``f1`` the harmonic mean of the two.
    Dice, Hausdorff and pixel Dice are averaged per image when pooling.
    """

    f1: float
    object_dice: float
    object_hausdorff: float
    precision: float
    recall: float
    pixel_dice: float
    tp: int = 0
    n_pred: int = 0
    n_gt: int = 0
    n_images: int = 1

    def as_row(self) -> dict[str, float]:
        return {
            "F1(%)": 100.0 * self.f1,
            "Dice(%)": 100.0 * self.object_dice,
            "Hausdorff": self.object_hausdorff,
        }

    @classmethod
    def pool(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        if not reports:
            raise ValueError("cannot pool zero reports")
        n = sum(r.n_images for r in reports)

        def avg(name):
            return sum(getattr(r, name) * r.n_images for r in reports) / n

        tp = sum(r.tp for r in reports)
        n_pred = sum(r.n_pred for r in reports)
        n_gt = sum(r.n_gt for r in reports)
        precision = tp / n_pred if n_pred else float(n_gt == 0)
        recall = tp / n_gt if n_gt else float(n_pred == 0)
        return cls(
            f1=harmonic_f1(precision, recall),
            object_dice=avg("object_dice"),
            object_hausdorff=avg("object_hausdorff"),
            precision=precision,
            recall=recall,
            pixel_dice=avg("pixel_dice"),
            tp=tp,
            n_pred=n_pred,
            n_gt=n_gt,
            n_images=n,
        )
