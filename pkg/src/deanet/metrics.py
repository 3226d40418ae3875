"""Object-level F1, Dice and Hausdorff following the GlaS challenge definitions.

Conventions:

* a predicted object is a true positive when it covers more than half of the
  ground-truth object it overlaps most; each ground-truth object is matched once;
* for Dice and Hausdorff every object is paired with the maximally overlapping
  object of the other map. For Dice an object with no overlap scores 0. For
  Hausdorff it is paired with the object of the other map whose boundary is
  closest. Ties between candidate partners go to the best-scoring one, which
  keeps every metric independent of the id values;
* object boundaries are the pixels with a 4-neighbour outside the object, the
  image border counting as outside;
* when one map has no objects at all, each object of the other map contributes
  the image diagonal as its Hausdorff distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .types import MetricReport, harmonic_f1

CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class MatchTable:
    pairs: list = field(default_factory=list)  # (pred id, gt id, intersection area)
    unmatched_pred: list = field(default_factory=list)
    unmatched_gt: list = field(default_factory=list)


class _Objects:
    """Ids, areas and pairwise overlaps of two instance maps."""

    def __init__(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        self.shape = pred.shape
        self.pred_ids, p_idx = np.unique(pred, return_inverse=True)
        self.gt_ids, g_idx = np.unique(gt, return_inverse=True)
        np_, ng = len(self.pred_ids), len(self.gt_ids)
        joint = np.bincount(g_idx.ravel() * np_ + p_idx.ravel(), minlength=np_ * ng).reshape(ng, np_)
        # drop the background row/column (id 0 sorts first when present)
        gsl = slice(1, None) if self.gt_ids[0] == 0 else slice(None)
        psl = slice(1, None) if self.pred_ids[0] == 0 else slice(None)
        self.overlap = joint[gsl, psl]  # gt x pred
        self.pred_ids = self.pred_ids[psl]
        self.gt_ids = self.gt_ids[gsl]
        self.pred_area = joint[:, psl].sum(axis=0)
        self.gt_area = joint[gsl, :].sum(axis=1)


def match_objects(pred, gt) -> MatchTable:
    obj = _Objects(pred, gt)
    table = MatchTable()
    matched_gt = set()
    if obj.overlap.size:
        best = obj.overlap.max(axis=0)
        # among equally overlapped gt objects prefer the smallest, the only one a hit can count for
        tied_area = np.where(obj.overlap == best, obj.gt_area[:, None], np.iinfo(np.int64).max)
        best_gt = tied_area.argmin(axis=0)
        for j in np.argsort(-best, kind="stable"):
            i = best_gt[j]
            if 2 * best[j] > obj.gt_area[i] and i not in matched_gt:
                matched_gt.add(i)
                table.pairs.append((int(obj.pred_ids[j]), int(obj.gt_ids[i]), int(best[j])))
            else:
                table.unmatched_pred.append(int(obj.pred_ids[j]))
    else:
        table.unmatched_pred = [int(p) for p in obj.pred_ids]
    table.unmatched_gt = [int(g) for i, g in enumerate(obj.gt_ids) if i not in matched_gt]
    table.unmatched_pred.sort()
    return table


def _detection(pred, gt):
    table = match_objects(pred, gt)
    tp = len(table.pairs)
    n_pred = tp + len(table.unmatched_pred)
    n_gt = tp + len(table.unmatched_gt)
    precision = tp / n_pred if n_pred else float(n_gt == 0)
    recall = tp / n_gt if n_gt else float(n_pred == 0)
    return tp, n_pred, n_gt, precision, recall


def object_f1(pred, gt):
    """Return ``(precision, recall, f1)``; both maps empty counts as perfect."""
    _, _, _, precision, recall = _detection(pred, gt)
    return precision, recall, harmonic_f1(precision, recall)


def _one_sided_dice(overlap, own_area, other_area):
    # overlap: own x other
    if overlap.shape[1] == 0:
        return 0.0
    best = overlap.max(axis=1, keepdims=True)
    dice = 2.0 * overlap / (own_area[:, None] + other_area[None, :])
    dice = np.where((overlap == best) & (best > 0), dice, 0.0).max(axis=1)
    return float((own_area * dice).sum() / own_area.sum())


def object_dice(pred, gt) -> float:
    obj = _Objects(pred, gt)
    if len(obj.gt_ids) == 0 and len(obj.pred_ids) == 0:
        return 1.0
    if len(obj.gt_ids) == 0 or len(obj.pred_ids) == 0:
        return 0.0
    g = _one_sided_dice(obj.overlap, obj.gt_area, obj.pred_area)
    s = _one_sided_dice(obj.overlap.T, obj.pred_area, obj.gt_area)
    return 0.5 * (g + s)


def boundary_coords(mask: np.ndarray) -> np.ndarray:
    edge = mask & ~ndimage.binary_erosion(mask, CROSS, border_value=0)
    return np.argwhere(edge).astype(np.float64)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Exact symmetric Hausdorff distance between two point sets (N x 2)."""
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def _boundaries(labels, ids):
    out = {}
    slices = ndimage.find_objects(labels)
    for k in ids:
        sl = slices[k - 1]
        pts = boundary_coords(labels[sl] == k)
        out[k] = pts + np.array([sl[0].start, sl[1].start], dtype=np.float64)
    return out


def _one_sided_hausdorff(overlap, own_ids, own_area, other_ids, own_b, other_b):
    total = 0.0
    for i, k in enumerate(own_ids):
        row = overlap[i]
        if row.max() > 0:
            candidates = other_ids[row == row.max()]
        else:
            gaps = np.array([cdist(own_b[k], other_b[m]).min() for m in other_ids])
            candidates = other_ids[gaps == gaps.min()]
        total += own_area[i] * min(hausdorff(own_b[k], other_b[m]) for m in candidates)
    return total / own_area.sum()


def object_hausdorff(pred, gt) -> float:
    obj = _Objects(pred, gt)
    ng, np_ = len(obj.gt_ids), len(obj.pred_ids)
    if ng == 0 and np_ == 0:
        return 0.0
    if ng == 0 or np_ == 0:
        return math.hypot(*obj.shape)
    pred_lab = np.asarray(pred).astype(np.int64)
    gt_lab = np.asarray(gt).astype(np.int64)
    pb = _boundaries(pred_lab, [int(k) for k in obj.pred_ids])
    gb = _boundaries(gt_lab, [int(k) for k in obj.gt_ids])
    g = _one_sided_hausdorff(obj.overlap, obj.gt_ids, obj.gt_area, obj.pred_ids, gb, pb)
    s = _one_sided_hausdorff(obj.overlap.T, obj.pred_ids, obj.pred_area, obj.gt_ids, pb, gb)
    return 0.5 * (g + s)


def pixel_dice(pred, gt) -> float:
    a = np.asarray(pred) > 0
    b = np.asarray(gt) > 0
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2.0 * (a & b).sum() / denom)


def evaluate_pair(pred, gt) -> MetricReport:
    tp, n_pred, n_gt, precision, recall = _detection(pred, gt)
    return MetricReport(
        f1=harmonic_f1(precision, recall),
        object_dice=object_dice(pred, gt),
        object_hausdorff=object_hausdorff(pred, gt),
        precision=precision,
        recall=recall,
        pixel_dice=pixel_dice(pred, gt),
        tp=tp,
        n_pred=n_pred,
        n_gt=n_gt,
    )
