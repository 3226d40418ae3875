"""Decoder blocks: plain U-Net up-block, deep feature decoder block, boundary attention."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ConvBlock
from .types import DecoderStageOutput, ThresholdValue


class Upsample(nn.Module):
    """Bilinear 2x upsampling of the deeper map, projected to the skip width.

    The 1x1 projection runs before interpolation; both are linear with
    interpolation weights summing to one, so the order does not change the result.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.project = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, f_n, size):
        return F.interpolate(self.project(f_n), size=size, mode="bilinear", align_corners=False)


def _check_half(f_m, f_n):
    h, w = f_m.shape[-2:]
    if f_n.shape[-2:] != (h // 2, w // 2) or h % 2 or w % 2:
        raise ValueError(
            f"deep feature {tuple(f_n.shape[-2:])} is not half of skip feature {tuple(f_m.shape[-2:])}"
        )


class UpBlock(nn.Module):
    """Plain U-Net decoder stage: upsample, concatenate skip, double conv."""

    def __init__(self, skip_channels, deep_channels):
        super().__init__()
        self.up = Upsample(deep_channels, skip_channels)
        self.conv = ConvBlock(2 * skip_channels, skip_channels)

    def forward(self, f_m, f_n):
        _check_half(f_m, f_n)
        return self.conv(torch.cat([f_m, self.up(f_n, f_m.shape[-2:])], dim=1))


class DeepFeatureDecoderBlock(nn.Module):
    """Two-branch decoder stage.

    Branch one adds a max-pooled channel gate to the skip feature; branch two
    adds the upsampled deep feature and concatenates it again. A single
    conv-BN-ReLU reduces the result to the skip width.
    """

    def __init__(self, skip_channels, deep_channels):
        super().__init__()
        self.gate = nn.Conv2d(skip_channels, skip_channels, 1)
        self.up = Upsample(deep_channels, skip_channels)
        self.conv = ConvBlock(2 * skip_channels, skip_channels, repeats=1)

    def pooled_branch(self, f_m):
        return f_m + torch.sigmoid(self.gate(F.adaptive_max_pool2d(f_m, 1)))

    def merge(self, f_m, f_n):
        _check_half(f_m, f_n)
        up = self.up(f_n, f_m.shape[-2:])
        return torch.cat([self.pooled_branch(f_m) + up, up], dim=1)

    def forward(self, f_m, f_n):
        return self.conv(self.merge(f_m, f_n))


class BoundaryEnhancedAttention(nn.Module):
    """Boundary map with an adaptive per-sample threshold, used to re-weight features.

    Pipeline (shapes for ``channels`` = C)::

        F_g   = cat(C_v(C_l(C_3(F_s))), C_l(C_v(C_3(F_s))))    # 7x1 / 1x7 paths
        M_g   = sigmoid(conv1x1(F_g))                          # B x 1 x H x W
        delta = conv1x1(avgpool(M_g))                          # B x 1 x 1 x 1
        M_t   = [M_g >= delta]                                 # hard, no gradient
        M_b   = sigmoid(conv1x1(cat(M_t, M_g)))                # auxiliary output
        F_s'  = conv3x3(F_s * M_g + F_s * M_t) + F_s
    """

    def __init__(self, channels):
        super().__init__()
        half = max(1, channels // 2)
        self.pre = nn.Conv2d(channels, channels, 3, padding=1)
        self.path_lv = nn.Sequential(
            nn.Conv2d(channels, half, (7, 1), padding=(3, 0)),
            nn.Conv2d(half, half, (1, 7), padding=(0, 3)),
        )
        self.path_vl = nn.Sequential(
            nn.Conv2d(channels, half, (1, 7), padding=(0, 3)),
            nn.Conv2d(half, half, (7, 1), padding=(3, 0)),
        )
        self.to_map = nn.Conv2d(2 * half, 1, 1)
        self.to_delta = nn.Conv2d(1, 1, 1)
        self.to_refined = nn.Conv2d(2, 1, 1)
        self.enhance = nn.Conv2d(channels, channels, 3, padding=1)

    def boundary_features(self, f_s):
        x = self.pre(f_s)
        return torch.cat([self.path_lv(x), self.path_vl(x)], dim=1)

    def boundary_map(self, f_g):
        return torch.sigmoid(self.to_map(f_g))

    def adaptive_threshold(self, m_g):
        return ThresholdValue(self.to_delta(F.adaptive_avg_pool2d(m_g, 1)))

    @staticmethod
    def threshold(m_g, delta):
        value = delta.value if isinstance(delta, ThresholdValue) else delta
        return (m_g.detach() >= value.detach()).to(m_g.dtype)

    def refine(self, m_t, m_g):
        return torch.sigmoid(self.to_refined(torch.cat([m_t, m_g], dim=1)))

    def enhancement(self, f_s, m_g, m_t):
        return self.enhance(f_s * m_g + f_s * m_t)

    def forward(self, f_s):
        m_g = self.boundary_map(self.boundary_features(f_s))
        delta = self.adaptive_threshold(m_g)
        m_t = self.threshold(m_g, delta)
        m_b = self.refine(m_t, m_g)
        f_s_prime = self.enhancement(f_s, m_g, m_t) + f_s
        return DecoderStageOutput(f_s_prime, m_g, m_t, m_b, delta)
