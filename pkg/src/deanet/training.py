"""Optimisation loop, checkpoints and the per-epoch metric log."""
from __future__ import annotations

import csv
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .network import DEANet, LossConfig, compute_loss
from .postprocess import PostprocessConfig

logger = logging.getLogger(__name__)

LOG_COLUMNS = (
    ["epoch", "loss"]
    + [f"ce{k}" for k in range(4)]
    + [f"var{k}" for k in range(4)]
    + ["mb", "val_f1", "val_dice", "val_hausdorff"]
)


class CheckpointMismatch(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 4
    lr: float = 5e-4
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = 100
    num_workers: int = 0
    resume: str = ""


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    best_dice: Optional[float] = None


def seed_everything(seed: int, deterministic: bool = False):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def epoch_batches(n, batch_size, seed, epoch):
    """Batch index lists for one epoch; depends only on ``(seed, epoch)``."""
    g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0]))
    order = torch.randperm(n, generator=g).tolist()
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_optimizer(model: DEANet, lr: float):
    ld = {id(p) for p in model.ld_parameters()}
    main = [p for p in model.parameters() if p.requires_grad and id(p) not in ld]
    groups = [{"params": main, "lr": lr}]
    ld_params = [p for p in model.ld_parameters() if p.requires_grad]
    if ld_params:
        groups.append({"params": ld_params, "lr": lr * model.cfg.ld_lr_mult})
    return torch.optim.Adam(groups, lr=lr)


def save_checkpoint(path, model: DEANet, optimizer, epoch, config=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "epoch": epoch,
            "arch_hash": model.architecture_hash(),
            "model_config": asdict(model.cfg),
            "config": config or {},
        },
        path,
    )
    return path


def load_checkpoint(path, model: DEANet, optimizer=None):
    """Restore weights (and optimiser state); returns the stored epoch counter."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("arch_hash") != model.architecture_hash():
        raise CheckpointMismatch(
            f"checkpoint {path} was written by architecture {state.get('arch_hash')} "
            f"({state.get('model_config', {}).get('variant')}), model is {model.architecture_hash()} "
            f"({model.cfg.variant})"
        )
    model.load_state_dict(state["model"])
    if optimizer is not None and state.get("optimizer") is not None:
        optimizer.load_state_dict(state["optimizer"])
    return state["epoch"]


def _collate(items):
    images, triples, insts = zip(*items)
    return torch.stack(images), torch.stack(triples), torch.stack(insts)


def train(
    model: DEANet,
    dataset,
    cfg: Optional[TrainConfig] = None,
    loss_cfg: Optional[LossConfig] = None,
    out_dir=None,
    val_samples=None,
    postprocess_cfg: Optional[PostprocessConfig] = None,
    config_snapshot=None,
) -> TrainResult:
    """Train ``model`` on ``dataset`` (items: image, triple mask, instance map).

    With ``out_dir`` set, writes ``metrics.csv`` (one row per epoch),
    ``best.pt`` whenever validation object Dice improves, ``epoch<N>.pt``
    every ``checkpoint_every`` epochs and ``last.pt`` at the end.
    """
    from .evaluation import evaluate_samples

    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)

    optimizer = make_optimizer(model, cfg.lr)
    start = 0
    if cfg.resume:
        start = load_checkpoint(cfg.resume, model, optimizer)
        logger.info("resumed from %s at epoch %d", cfg.resume, start)

    out = Path(out_dir) if out_dir else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.csv"
        new = not (cfg.resume and log_path.exists())
        log_file = open(log_path, "w" if new else "a", newline="")
        writer = csv.DictWriter(log_file, LOG_COLUMNS)
        if new:
            writer.writeheader()

    result = TrainResult()
    try:
        for epoch in range(start, cfg.epochs):
            model.train()
            if hasattr(dataset, "set_epoch"):
                dataset.set_epoch(epoch)
            loader = torch.utils.data.DataLoader(
                dataset,
                batch_sampler=epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch),
                num_workers=cfg.num_workers,
                collate_fn=_collate,
            )
            sums, n = {}, 0
            for images, triples, _ in loader:
                outputs = model(images)
                loss, terms = compute_loss(outputs, triples, loss_cfg)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
                n += 1
            row = {"epoch": epoch + 1, "loss": sums["total"] / n}
            row.update({k: v / n for k, v in sums.items() if k != "total"})

            if val_samples:
                rep = evaluate_samples(model, val_samples, postprocess_cfg)["pooled"]
                row.update(val_f1=rep.f1, val_dice=rep.object_dice, val_hausdorff=rep.object_hausdorff)
                if result.best_dice is None or rep.object_dice > result.best_dice:
                    result.best_dice = rep.object_dice
                    if out is not None:
                        result.checkpoints.append(
                            save_checkpoint(out / "best.pt", model, optimizer, epoch + 1, config_snapshot)
                        )
            result.history.append(row)
            logger.info("epoch %d loss %.5f", epoch + 1, row["loss"])
            if log_file is not None:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()
                                 if k in LOG_COLUMNS})
                log_file.flush()
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    result.checkpoints.append(
                        save_checkpoint(out / f"epoch{epoch + 1}.pt", model, optimizer, epoch + 1,
                                        config_snapshot)
                    )
        if out is not None:
            result.checkpoints.append(
                save_checkpoint(out / "last.pt", model, optimizer, cfg.epochs, config_snapshot)
            )
    finally:
        if log_file is not None:
            log_file.close()
    return result
