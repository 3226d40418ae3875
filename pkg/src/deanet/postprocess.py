"""Instance extraction from 3-class network output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .types import BOUNDARY, INTERIOR

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class PostprocessConfig:
    min_object_area: int = 100
    fill_holes: bool = True
    boundary_reassign: bool = True
    max_reassign_distance: float = 4.0

    def __post_init__(self):
        if self.min_object_area < 0:
            raise ValueError("min_object_area must be >= 0")


def label_interiors(classes: np.ndarray, min_object_area: int) -> np.ndarray:
    """4-connected interior components, small ones dropped, relabelled 1..K in scan order."""
    labels, n = ndimage.label(classes == INTERIOR, structure=FOUR_CONNECTED)
    if n == 0:
        return labels.astype(np.int32)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_object_area
    keep[0] = False
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[keep] = np.arange(1, keep.sum() + 1)
    return remap[labels]


def reassign_boundary(labels: np.ndarray, boundary: np.ndarray, max_distance: float) -> np.ndarray:
    """Give each boundary pixel the label of the nearest component (ties to the lower id).

    Pixels farther than ``max_distance`` from every component stay background.
    """
    out = labels.copy()
    n = int(labels.max())
    if n == 0 or not boundary.any():
        return out
    best = np.full(labels.shape, np.inf)
    owner = np.zeros(labels.shape, dtype=np.int32)
    for k in range(1, n + 1):
        dist = ndimage.distance_transform_edt(labels != k)
        closer = dist < best
        best[closer] = dist[closer]
        owner[closer] = k
    take = boundary & (labels == 0) & (best <= max_distance)
    out[take] = owner[take]
    return out


def fill_instance_holes(labels: np.ndarray) -> np.ndarray:
    out = labels.copy()
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        obj = labels[sl] == k
        holes = ndimage.binary_fill_holes(obj) & ~obj & (labels[sl] == 0)
        out[sl][holes] = k
    return out


def instances_from_classes(classes: np.ndarray, cfg: PostprocessConfig | None = None) -> np.ndarray:
    cfg = cfg or PostprocessConfig()
    labels = label_interiors(classes, cfg.min_object_area)
    if cfg.boundary_reassign:
        labels = reassign_boundary(labels, classes == BOUNDARY, cfg.max_reassign_distance)
    if cfg.fill_holes:
        labels = fill_instance_holes(labels)
    return labels


def instances_from_logits(logits, cfg: PostprocessConfig | None = None) -> list:
    """B x 3 x H x W logits -> list of H x W int32 instance maps."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    if logits.ndim != 4 or logits.shape[1] != 3:
        raise ValueError(f"expected B x 3 x H x W logits, got {logits.shape}")
    return [instances_from_classes(c, cfg) for c in logits.argmax(axis=1)]
