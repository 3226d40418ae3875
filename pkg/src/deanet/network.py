"""DEA-Net assembly, ablation variants and the deep-supervision loss."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder import BoundaryEnhancedAttention, DeepFeatureDecoderBlock, UpBlock
from .encoders import DEFAULT_WIDTHS, BackboneEncoder, LocalSemanticEncoder
from .ffm import DEFAULT_DILATIONS, FeatureFusionModule, LevelFusion
from .types import BOUNDARY, NUM_CLASSES, DecoderStageOutput, check_triple_mask, validate_shapes

# ablation ladder, each variant adding one module to the previous
VARIANTS = {
    "backbone": dict(ld=False, ffm=False, bea=False, dfb=False),
    "+LD": dict(ld=True, ffm=False, bea=False, dfb=False),
    "+LD+FFM": dict(ld=True, ffm=True, bea=False, dfb=False),
    "+LD+FFM+BEA": dict(ld=True, ffm=True, bea=True, dfb=False),
    "full": dict(ld=True, ffm=True, bea=True, dfb=True),
}

VARIANT_LABELS = {
    "backbone": "Backbone",
    "+LD": "Backbone+LD",
    "+LD+FFM": "Backbone+LD+FFM",
    "+LD+FFM+BEA": "Backbone+LD+FFM+BEA",
    "full": "DEA-Net",
}


@dataclass
class ModelConfig:
    variant: str = "full"
    widths: tuple = DEFAULT_WIDTHS
    dilations: tuple = DEFAULT_DILATIONS
    ld_arch: str = "resnet50"
    ld_channels: int = 64
    ld_weights_path: str = ""
    ld_require_pretrained: bool = False
    freeze_ld: bool = False
    ld_lr_mult: float = 0.1


class NetworkOutputs(NamedTuple):
    final_logits: torch.Tensor
    stage_logits: list  # shallowest first, all at input resolution
    boundary_maps: list  # DecoderStageOutput per stage (shallowest first) or None


class DEANet(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None, **overrides):
        super().__init__()
        cfg = cfg or ModelConfig()
        if overrides:
            cfg = ModelConfig(**{**cfg.__dict__, **overrides})
        if cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.variant!r}; choose from {list(VARIANTS)}")
        self.cfg = cfg
        flags = VARIANTS[cfg.variant]
        self.flags = flags
        widths = tuple(cfg.widths)
        skips = widths[:-1]

        self.encoder = BackboneEncoder(3, widths)
        self.ld = None
        self.fusions = None
        if flags["ld"]:
            self.ld = LocalSemanticEncoder(
                cfg.ld_arch,
                cfg.ld_channels,
                weights_path=cfg.ld_weights_path or None,
                require_pretrained=cfg.ld_require_pretrained,
                freeze=cfg.freeze_ld,
            )
            fusion = FeatureFusionModule if flags["ffm"] else LevelFusion
            extra = {"dilations": cfg.dilations} if flags["ffm"] else {}
            self.fusions = nn.ModuleList(fusion(cfg.ld_channels, c, **extra) for c in skips)

        block = DeepFeatureDecoderBlock if flags["dfb"] else UpBlock
        # decoder stages indexed by skip level: stage i consumes skip i and produces width skips[i]
        self.decoders = nn.ModuleList(block(c, widths[i + 1]) for i, c in enumerate(skips))
        self.attentions = (
            nn.ModuleList(BoundaryEnhancedAttention(c) for c in skips) if flags["bea"] else None
        )
        self.heads = nn.ModuleList(nn.Conv2d(c, NUM_CLASSES, 1) for c in skips)

    def ld_parameters(self):
        return list(self.ld.parameters()) if self.ld is not None else []

    def architecture_hash(self) -> str:
        desc = {
            "variant": self.cfg.variant,
            "flags": self.flags,
            "params": [(k, list(v.shape)) for k, v in self.state_dict().items()],
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]

    def forward(self, x) -> NetworkOutputs:
        validate_shapes(x)
        size = x.shape[-2:]
        pyramid = self.encoder(x)
        skips = pyramid[:-1]
        if self.ld is not None:
            f_l = self.ld(x)
            skips = [fuse(f_l, f_h) for fuse, f_h in zip(self.fusions, skips)]

        deep = pyramid[-1]
        logits = [None] * len(skips)
        boundary = [None] * len(skips)
        for i in reversed(range(len(skips))):
            deep = self.decoders[i](skips[i], deep)
            if self.attentions is not None:
                stage = self.attentions[i](deep)
                boundary[i] = stage
                deep = stage.f_s_prime
            out = self.heads[i](deep)
            if out.shape[-2:] != size:
                out = F.interpolate(out, size=size, mode="bilinear", align_corners=False)
            logits[i] = out
        return NetworkOutputs(logits[0], logits, boundary)


def build_ablation(variant: str, cfg: Optional[ModelConfig] = None) -> DEANet:
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {list(VARIANTS)}")
    base = cfg.__dict__ if cfg is not None else {}
    return DEANet(ModelConfig(**{**base, "variant": variant}))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class LossConfig:
    stage_weights: tuple = (1.0, 0.8, 0.6, 0.4)
    variance_lambda: float = 0.1
    supervise_mb: bool = False
    mb_lambda: float = 0.1

    def __post_init__(self):
        if len(self.stage_weights) == 0 or min(self.stage_weights) < 0 or max(self.stage_weights) <= 0:
            raise ValueError(f"stage weights must be >= 0 with at least one > 0: {self.stage_weights}")
        if self.variance_lambda < 0 or self.mb_lambda < 0:
            raise ValueError("loss lambdas must be non-negative")


def pixel_ce_stats(logits, target):
    """Mean and population variance of the per-pixel cross-entropy map."""
    ce = F.cross_entropy(logits, target, reduction="none")
    mean = ce.mean()
    var = ((ce - mean) ** 2).mean()
    return mean, var


def compute_loss(outputs: NetworkOutputs, target, cfg: Optional[LossConfig] = None):
    """Weighted deep-supervision loss. Returns ``(total, terms)``; ``terms`` maps names to floats."""
    cfg = cfg or LossConfig()
    check_triple_mask(target)
    target = target.long()
    if len(cfg.stage_weights) != len(outputs.stage_logits):
        raise ValueError(
            f"{len(cfg.stage_weights)} stage weights for {len(outputs.stage_logits)} stages"
        )
    total = outputs.final_logits.new_zeros(())
    terms = {}
    for k, (w, logits) in enumerate(zip(cfg.stage_weights, outputs.stage_logits)):
        if logits.shape[-2:] != target.shape[-2:]:
            raise ValueError(f"stage {k} logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
        mean, var = pixel_ce_stats(logits, target)
        terms[f"ce{k}"] = mean.item()
        terms[f"var{k}"] = var.item()
        if w:
            total = total + w * (mean + cfg.variance_lambda * var)

    if cfg.supervise_mb and cfg.mb_lambda > 0:
        maps = [b for b in outputs.boundary_maps if b is not None]
        if maps:
            edge = (target == BOUNDARY).float().unsqueeze(1)
            mb_loss = sum(_boundary_bce(b, edge) for b in maps) / len(maps)
            terms["mb"] = mb_loss.item()
            total = total + cfg.mb_lambda * mb_loss
    terms["total"] = total.item()
    return total, terms


def _boundary_bce(stage: DecoderStageOutput, edge):
    m_b = stage.m_b
    if m_b.shape[-2:] != edge.shape[-2:]:
        # max pooling keeps thin boundary bands alive at coarse scales
        edge = F.adaptive_max_pool2d(edge, m_b.shape[-2:])
    return F.binary_cross_entropy(m_b.clamp(1e-6, 1 - 1e-6), edge)
