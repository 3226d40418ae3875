"""Dataset evaluation and report writers."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import load_entry
from .metrics import evaluate_pair
from .postprocess import PostprocessConfig, instances_from_logits
from .types import MetricReport

# Published reference rows: F1 %, object Dice %, object Hausdorff.
PUBLISHED_ABLATION = {
    "backbone": (86.1, 85.1, 87.318),
    "+LD": (87.4, 86.9, 72.181),
    "+LD+FFM": (88.1, 87.8, 68.405),
    "+LD+FFM+BEA": (89.1, 88.8, 63.786),
    "full": (89.3, 89.6, 60.774),
}
PUBLISHED_RESULTS = {"glas": (89.3, 89.6, 60.8), "crag": (86.0, 89.9, 129.4)}


@torch.no_grad()
def predict_logits(model, images: torch.Tensor) -> torch.Tensor:
    model.eval()
    return model(images).final_logits


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]


def pad_to_multiple(image: np.ndarray, multiple=16):
    """Reflect-pad H x W x 3 so both sides are multiples of ``multiple``; returns (padded, (h, w))."""
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return image, (h, w)


def predict_instances(model, image: np.ndarray, pp_cfg: Optional[PostprocessConfig] = None):
    padded, (h, w) = pad_to_multiple(image)
    logits = predict_logits(model, _image_tensor(padded))[..., :h, :w]
    return instances_from_logits(logits, pp_cfg)[0]


def evaluate_predictions(items):
    """``items``: iterable of (name, split, pred instance map, gt instance map).

    Returns ``{"images": [(name, split, report)], "splits": {split: report},
    "pooled": report over all images, "split_mean": mean of split reports}``.
    """
    per_image = [(name, split, evaluate_pair(pred, gt)) for name, split, pred, gt in items]
    if not per_image:
        raise ValueError("nothing to evaluate")
    splits = {}
    for _, split, rep in per_image:
        splits.setdefault(split, []).append(rep)
    split_reports = {k: MetricReport.pool(v) for k, v in splits.items()}
    pooled = MetricReport.pool([r for _, _, r in per_image])
    return {
        "images": per_image,
        "splits": split_reports,
        "pooled": pooled,
        "split_mean": _mean_of(split_reports.values()),
    }


def _mean_of(reports):
    reports = list(reports)
    n = len(reports)
    keys = ("f1", "object_dice", "object_hausdorff", "precision", "recall", "pixel_dice")
    return MetricReport(**{k: sum(getattr(r, k) for r in reports) / n for k in keys},
                        n_images=sum(r.n_images for r in reports))


def evaluate_samples(model, samples, pp_cfg=None, split="val"):
    """Evaluate on in-memory ``(name, image, triple, inst)`` samples."""
    items = [(name, split, predict_instances(model, image, pp_cfg), inst)
             for name, image, _, inst in samples]
    return evaluate_predictions(items)


def evaluate_dataset(model, entries, pp_cfg: Optional[PostprocessConfig] = None):
    """Run the model on manifest entries and score each against its annotation."""

    def items():
        for e in entries:
            image, inst = load_entry(e)
            yield e.name, e.split, predict_instances(model, image, pp_cfg), inst

    return evaluate_predictions(items())


def write_report(results, out_dir, dataset="", method="DEA-Net", with_reference=False):
    """Write ``per_image.csv``, ``summary.csv`` and a ``report.txt`` results table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["name", "split", "f1", "object_dice", "object_hausdorff", "precision", "recall",
              "pixel_dice", "tp", "n_pred", "n_gt"]
    with open(out / "per_image.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for name, split, r in results["images"]:
            w.writerow([name, split] + [getattr(r, f) for f in fields[2:]])

    rows = [(k, r) for k, r in sorted(results["splits"].items())]
    rows += [("pooled", results["pooled"]), ("split_mean", results["split_mean"])]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "F1(%)", "Dice(%)", "Hausdorff", "precision", "recall", "pixel_dice", "images"])
        for k, r in rows:
            w.writerow([k, 100 * r.f1, 100 * r.object_dice, r.object_hausdorff, r.precision, r.recall,
                        r.pixel_dice, r.n_images])

    lines = [f"{'Datasets':<10}{'Methods':<22}{'F1(%)':>8}{'Dice(%)':>9}{'Hausdorff':>11}"]
    label = dataset.upper() if dataset != "glas" else "GlaS"
    for k, r in rows:
        lines.append(f"{label:<10}{method + ' [' + k + ']':<22}"
                     f"{100 * r.f1:>8.1f}{100 * r.object_dice:>9.1f}{r.object_hausdorff:>11.1f}")
    if with_reference and dataset in PUBLISHED_RESULTS:
        f1, dice, hd = PUBLISHED_RESULTS[dataset]
        lines.append(f"{label:<10}{method + ' [published]':<22}{f1:>8.1f}{dice:>9.1f}{hd:>11.1f}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    return text


def format_ablation(rows, with_reference=False):
    """``rows``: list of (variant, MetricReport). One row per variant, optionally with published values."""
    from .network import VARIANT_LABELS

    head = f"{'Methods':<22}{'F1(%)':>8}{'Dice(%)':>9}{'Hausdorff':>11}"
    if with_reference:
        head += f"{'pub F1':>9}{'pub Dice':>10}{'pub HD':>9}"
    lines = [head]
    for variant, r in rows:
        line = (f"{VARIANT_LABELS[variant]:<22}{100 * r.f1:>8.1f}{100 * r.object_dice:>9.1f}"
                f"{r.object_hausdorff:>11.3f}")
        if with_reference:
            f1, dice, hd = PUBLISHED_ABLATION[variant]
            line += f"{f1:>9.1f}{dice:>10.1f}{hd:>9.3f}"
        lines.append(line)
    return "\n".join(lines) + "\n"
