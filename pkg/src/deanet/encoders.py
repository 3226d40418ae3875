"""Backbone (U-Net style) encoder and the local semantic-guided encoder."""
from __future__ import annotations

import logging
from pathlib import Path

import torch
import torch.nn as nn
import torchvision

from .types import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_WIDTHS = (64, 128, 256, 512, 1024)


class ConvBlock(nn.Sequential):
    """(3x3 conv -> batch norm -> ReLU) x ``repeats``."""

    def __init__(self, in_channels, out_channels, repeats=2):
        layers = []
        for i in range(repeats):
            layers += [
                nn.Conv2d(in_channels if i == 0 else out_channels, out_channels, 3, padding=1),
                nn.BatchNorm2d(out_channels),
                nn.ReLU(inplace=True),
            ]
        super().__init__(*layers)


class BackboneEncoder(nn.Module):
    """Five-stage encoder; stage ``i`` runs at 1/2**i of the input resolution."""

    def __init__(self, in_channels=3, widths=DEFAULT_WIDTHS):
        super().__init__()
        self.widths = tuple(widths)
        self.stages = nn.ModuleList()
        prev = in_channels
        for w in self.widths:
            self.stages.append(ConvBlock(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        factor = 2 ** (len(self.widths) - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeError(
                f"input {tuple(x.shape[-2:])} too small or not divisible by {factor} "
                f"for {len(self.widths) - 1} halvings"
            )
        pyramid = []
        for i, stage in enumerate(self.stages):
            if i:
                x = self.pool(x)
            x = stage(x)
            pyramid.append(x)
        return pyramid


class PretrainedWeightsError(RuntimeError):
    pass


_RESNETS = {
    "resnet18": (torchvision.models.resnet18, 64),
    "resnet34": (torchvision.models.resnet34, 64),
    "resnet50": (torchvision.models.resnet50, 256),
    "resnet101": (torchvision.models.resnet101, 256),
}


class LocalSemanticEncoder(nn.Module):
    """Low-level (stride 4) feature extractor of a DeepLabv3+ residual backbone.

    Only the stem and the first residual stage are kept: conv1/bn/relu (stride 2),
    max pool (stride 4), layer1. A 1x1 projection maps the result to
    ``out_channels``.

    Weights come from ``weights_path`` when given. The file may hold a full
    DeepLabv3+ or ResNet state dict; keys are matched after stripping common
    prefixes (``backbone.``, ``encoder.``, ``module.``). Without a path the
    extractor is randomly initialised, unless ``require_pretrained`` is set.
    """

    def __init__(
        self,
        arch="resnet50",
        out_channels=64,
        weights_path=None,
        require_pretrained=False,
        freeze=False,
    ):
        super().__init__()
        if arch not in _RESNETS:
            raise ValueError(f"unknown LD backbone {arch!r}; choose from {sorted(_RESNETS)}")
        builder, low_channels = _RESNETS[arch]
        net = builder(weights=None)
        self.features = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
        self.project = nn.Conv2d(low_channels, out_channels, 1)
        self.out_channels = out_channels
        self.pretrained = False

        if weights_path:
            self.load_backbone(weights_path)
        elif require_pretrained:
            raise PretrainedWeightsError(
                "pretrained LD weights unavailable (model.ld_weights_path unset) and "
                "random-init fallback is forbidden by model.ld_require_pretrained"
            )
        else:
            logger.info("LD encoder %s randomly initialised (no ld_weights_path)", arch)

        self.frozen = freeze
        if freeze:
            for p in self.parameters():
                p.requires_grad_(False)
            self.train(self.training)

    def load_backbone(self, path):
        path = Path(path)
        if not path.is_file():
            raise PretrainedWeightsError(f"LD checkpoint not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise PretrainedWeightsError(f"LD checkpoint {path} is unreadable: {exc}") from exc
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]

        wanted = {}
        names = {"0": "conv1", "1": "bn1", "4": "layer1"}
        own = self.features.state_dict()
        for key in own:
            idx, rest = key.split(".", 1)
            wanted[key] = f"{names[idx]}.{rest}"

        stripped = {}
        for k, v in state.items():
            for prefix in ("module.", "backbone.", "encoder.", "body."):
                if k.startswith(prefix):
                    k = k[len(prefix):]
            stripped[k] = v
        missing = [src for src in wanted.values() if src not in stripped]
        if missing:
            raise PretrainedWeightsError(
                f"LD checkpoint {path} lacks {len(missing)} backbone tensors (e.g. {missing[0]})"
            )
        self.features.load_state_dict({k: stripped[src] for k, src in wanted.items()})
        self.pretrained = True

    def train(self, mode=True):
        super().train(mode)
        if self.frozen:
            # frozen BN keeps its running statistics
            self.features.eval()
        return self

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"LD encoder needs sizes divisible by 4, got {tuple(x.shape[-2:])}")
        return self.project(self.features(x))

