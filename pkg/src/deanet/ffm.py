"""Multi-scale feature fusion of local semantic and backbone features."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_DILATIONS = (1, 2, 4, 8)


class LevelFusion(nn.Module):
    """Merge the low-level LD map into one backbone level (produces F_h').

    The LD map is resized bilinearly to the backbone level, projected to its
    width, concatenated with it and projected back down.
    """

    def __init__(self, ld_channels, channels):
        super().__init__()
        self.align = nn.Conv2d(ld_channels, channels, 1)
        self.merge = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, f_l, f_h):
        if f_l.shape[0] != f_h.shape[0]:
            raise ValueError(f"batch size mismatch: F_l {f_l.shape[0]} vs F_h {f_h.shape[0]}")
        if f_l.shape[-2:] != f_h.shape[-2:]:
            f_l = F.interpolate(f_l, size=f_h.shape[-2:], mode="bilinear", align_corners=False)
        return self.merge(torch.cat([self.align(f_l), f_h], dim=1))


class FeatureFusionModule(nn.Module):
    """Channel attention + cascaded dilated convolutions + residual fusion.

    With F_h' the fused input::

        F_a  = F_h' * sigmoid(conv1x1(avgpool(F_h')))
        F_i  = conv3x3_dilated(F_h', r_i)
        F_1' = F_1,  F_i' = F_{i-1} + F_i  (i = 2..4)
        F_m  = relu(conv1x1(cat(F_1', F_2', F_3', F_4', F_a))) + G(F_h')

    where G is a 1x1 projection.
    """

    def __init__(self, ld_channels, channels, dilations=DEFAULT_DILATIONS):
        super().__init__()
        dilations = tuple(dilations)
        if len(dilations) != 4 or dilations[0] != 1 or list(dilations) != sorted(set(dilations)):
            raise ValueError(f"need 4 strictly increasing dilation rates starting at 1, got {dilations}")
        self.dilations = dilations
        self.fuse = LevelFusion(ld_channels, channels)
        self.attention = nn.Conv2d(channels, channels, 1)
        self.branches = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in dilations
        )
        self.combine = nn.Conv2d(5 * channels, channels, 1)
        self.residual = nn.Conv2d(channels, channels, 1)

    def fuse_levels(self, f_l, f_h):
        return self.fuse(f_l, f_h)

    def channel_attention(self, f_h_prime):
        weights = torch.sigmoid(self.attention(F.adaptive_avg_pool2d(f_h_prime, 1)))
        return f_h_prime * weights

    def multiscale_cascade(self, f_h_prime):
        raw = [branch(f_h_prime) for branch in self.branches]
        return [raw[0]] + [raw[i - 1] + raw[i] for i in range(1, len(raw))]

    def fuse_scales(self, f_h_prime):
        """Everything after F_h' is formed; exposed for tests on hand-built inputs."""
        cascade = self.multiscale_cascade(f_h_prime)
        f_a = self.channel_attention(f_h_prime)
        stacked = torch.cat(cascade + [f_a], dim=1)
        return F.relu(self.combine(stacked)) + self.residual(f_h_prime)

    def forward(self, f_l, f_h):
        return self.fuse_scales(self.fuse_levels(f_l, f_h))
