"""Command line entry point: train / evaluate / predict / ablate / make-masks / verify-data."""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from .config import ConfigError, RunConfig, load_config
from .data import DataError, GlandDataset, load_manifest, save_label_png
from .encoders import PretrainedWeightsError
from .evaluation import (
    _image_tensor,
    evaluate_dataset,
    evaluate_predictions,
    format_ablation,
    pad_to_multiple,
    predict_instances,
    write_report,
)
from .network import DEANet, ModelConfig
from .training import CheckpointMismatch, load_checkpoint, seed_everything, train

logger = logging.getLogger("deanet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
IMAGE_SUFFIXES = {".bmp", ".png", ".jpg", ".jpeg", ".tif", ".tiff"}


def _common(p):
    p.add_argument("--config", help="INI config file ([section] then key = value)")
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, may be repeated")
    p.add_argument("--out", default="runs", help="output root (default: runs)")
    p.add_argument("--run-name", help="run directory name (default: run-<timestamp>)")
    p.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="deanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)

    p = sub.add_parser("evaluate", help="object-level F1 / Dice / Hausdorff report")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="directory of <name>.png instance label images")
    p.add_argument("--with-paper-reference", action="store_true",
                   help="add the published reference row to the report")

    p = sub.add_parser("predict", help="write instance label PNGs")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", help="image file or directory (default: data.root manifest)")
    p.add_argument("--dump-boundary-maps", action="store_true",
                   help="also write per-stage M_g / M_t / M_b maps as grayscale PNGs")

    p = sub.add_parser("ablate", help="train and evaluate each ablation variant")
    _common(p)
    p.add_argument("--with-paper-reference", action="store_true",
                   help="add the published reference values as comparison columns")

    p = sub.add_parser("make-masks", help="cache triple masks for a dataset")
    _common(p)

    p = sub.add_parser("verify-data", help="check split counts (and optional checksums)")
    _common(p)
    p.add_argument("--checksums", help="sha256sum-style file: '<digest>  <relative path>' per line")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if args.deterministic:
        cfg.train = replace(cfg.train, deterministic=True)
    return cfg


def _run_dir(args) -> Path:
    root = Path(args.out)
    if args.run_name:
        path = root / args.run_name
        if path.exists():
            if not args.overwrite:
                raise ConfigError(f"run directory {path} exists; pass --overwrite to replace it")
            shutil.rmtree(path)
    else:
        base = root / time.strftime("run-%Y%m%d-%H%M%S")
        path, k = base, 1
        while path.exists():
            path = base.with_name(f"{base.name}-{k}")
            k += 1
    path.mkdir(parents=True)
    return path


def _manifest(cfg: RunConfig):
    if not cfg.data.root:
        raise ConfigError("data.root is not set")
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    return load_manifest(root, cfg.data.dataset)


def _cache_root(args):
    return data_mod.cache_dir(Path(args.out) / "cache")


def _split_train_val(entries, frac):
    n_val = int(round(len(entries) * frac))
    n_val = min(n_val, len(entries) - 1)
    if n_val <= 0:
        return entries, []
    return entries[:-n_val], entries[-n_val:]


def _eval_entries(cfg, manifest):
    splits = cfg.data.eval_splits or tuple(
        s for s in manifest.counts() if s != cfg.data.train_split
    ) or (cfg.data.train_split,)
    return [e for e in manifest.entries if e.split in splits]


def _fit(cfg: RunConfig, model_cfg: ModelConfig, manifest, out_dir, cache):
    entries = manifest.split(cfg.data.train_split)
    if not entries:
        raise DataError(f"no '{cfg.data.train_split}' images under {manifest.root}")
    train_entries, val_entries = _split_train_val(entries, cfg.data.val_fraction)
    seed_everything(cfg.train.seed, cfg.train.deterministic)
    model = DEANet(model_cfg)
    dataset = GlandDataset.from_entries(
        train_entries, cfg.data.boundary_width, cache, augment_cfg=cfg.augment, seed=cfg.train.seed
    )
    val = GlandDataset.from_entries(val_entries, cfg.data.boundary_width, cache).samples if val_entries else None
    snapshot = cfg.to_dict()
    train(model, dataset, cfg.train, cfg.loss, out_dir, val, cfg.postprocess, snapshot)
    return model


def cmd_train(args):
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    run = _run_dir(args)
    (run / "config.cfg").write_text(cfg.to_text())
    _fit(cfg, cfg.model, manifest, run, _cache_root(args))
    print(f"trained {cfg.model.variant} for {cfg.train.epochs} epochs -> {run}")
    return EXIT_OK


def _load_model(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    model_cfg = dict(state["model_config"])
    model_cfg["widths"] = tuple(model_cfg["widths"])
    model_cfg["dilations"] = tuple(model_cfg["dilations"])
    # weights come from the checkpoint itself
    model_cfg.update(ld_weights_path="", ld_require_pretrained=False)
    model = DEANet(ModelConfig(**model_cfg))
    load_checkpoint(path, model)
    model.eval()
    return model


def _read_label_png(path):
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


def cmd_evaluate(args):
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    entries = _eval_entries(cfg, manifest)
    run = _run_dir(args)
    (run / "config.cfg").write_text(cfg.to_text())
    if args.checkpoint:
        model = _load_model(args.checkpoint)
        results = evaluate_dataset(model, entries, cfg.postprocess)
    else:
        pred_dir = Path(args.predictions)
        items = []
        for e in entries:
            path = pred_dir / f"{e.name}.png"
            if not path.exists():
                raise DataError(f"no prediction for {e.name} in {pred_dir}")
            _, gt = data_mod.load_entry(e)
            items.append((e.name, e.split, _read_label_png(path), gt))
        results = evaluate_predictions(items)
    text = write_report(results, run, cfg.data.dataset, with_reference=args.with_paper_reference)
    print(text, end="")
    return EXIT_OK


def _input_images(args, cfg):
    if args.images:
        p = Path(args.images)
        if p.is_file():
            return [p]
        if not p.is_dir():
            raise DataError(f"image path not found: {p}")
        return sorted(f for f in p.iterdir()
                      if f.suffix.lower() in IMAGE_SUFFIXES and "_anno" not in f.stem)
    return [e.image for e in _manifest(cfg).entries]


def _dump_boundary_maps(model, image, out_dir, name):
    padded, (h, w) = pad_to_multiple(image)
    with torch.no_grad():
        outputs = model(_image_tensor(padded))
    for k, stage in enumerate(outputs.boundary_maps):
        if stage is None:
            continue
        scale = 2 ** k
        for key in ("m_g", "m_t", "m_b"):
            m = getattr(stage, key)[0, 0, : -(-h // scale), : -(-w // scale)].numpy()
            Image.fromarray((m * 255).round().astype(np.uint8)).save(out_dir / f"{name}_stage{k}_{key}.png")


def cmd_predict(args):
    cfg = _resolve_config(args)
    images = _input_images(args, cfg)
    if not images:
        raise DataError("no input images found")
    model = _load_model(args.checkpoint)
    run = _run_dir(args)
    for path in images:
        image = data_mod.read_image(path)
        inst = predict_instances(model, image, cfg.postprocess)
        save_label_png(run / f"{path.stem}.png", inst, bits=16)
        if args.dump_boundary_maps:
            _dump_boundary_maps(model, image, run, path.stem)
    print(f"wrote {len(images)} instance maps -> {run}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    run = _run_dir(args)
    (run / "config.cfg").write_text(cfg.to_text())
    cache = _cache_root(args)
    entries = _eval_entries(cfg, manifest)
    rows = []
    with open(run / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "F1(%)", "Dice(%)", "Hausdorff"])
        for variant in cfg.ablate.variants:
            model = _fit(cfg, replace(cfg.model, variant=variant), manifest, run / _safe(variant), cache)
            rep = evaluate_dataset(model, entries, cfg.postprocess)["pooled"]
            rows.append((variant, rep))
            writer.writerow([variant, 100 * rep.f1, 100 * rep.object_dice, rep.object_hausdorff])
            fh.flush()
    text = format_ablation(rows, with_reference=args.with_paper_reference)
    (run / "ablation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _safe(variant):
    return variant.replace("+", "plus_").strip("_") or "variant"


def cmd_make_masks(args):
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    cache = _cache_root(args)
    for e in manifest.entries:
        _, inst = data_mod.load_entry(e)
        data_mod.cached_triple_mask(e, inst, cfg.data.boundary_width, cache)
    print(f"cached {len(manifest.entries)} triple masks under {cache}")
    return EXIT_OK


def cmd_verify_data(args):
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    status = manifest.verify_counts()
    print(f"{cfg.data.dataset}: {status}")
    ok = status.endswith("OK")
    if args.checksums:
        bad = verify_checksums(args.checksums, manifest.root)
        for line in bad:
            print(line)
        print(f"checksums: {'OK' if not bad else f'{len(bad)} FAILED'}")
        ok = ok and not bad
    return EXIT_OK if ok else EXIT_DATA


def verify_checksums(listing, root):
    failures = []
    for line in Path(listing).read_text().splitlines():
        if not line.strip():
            continue
        digest, _, rel = line.strip().partition(" ")
        target = Path(root) / rel.strip().lstrip("*")
        if not target.is_file():
            failures.append(f"missing: {target}")
            continue
        h = hashlib.sha256()
        with open(target, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        if h.hexdigest() != digest.lower():
            failures.append(f"mismatch: {target}")
    return failures


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "make-masks": cmd_make_masks,
    "verify-data": cmd_verify_data,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PretrainedWeightsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointMismatch, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
