"""Boundary-guided module: channel attention + morphology-derived spatial attention."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import conv_bn_relu
from .exceptions import ShapeError
from .morphology import boundary_confidence


def upsample2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class ChannelAttention(nn.Module):
    """``sigmoid(MLP(avgpool(s)) + MLP(maxpool(s)))`` with one shared MLP."""

    def __init__(self, channels=64, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, s):
        avg = F.adaptive_avg_pool2d(s, 1)
        mx = F.adaptive_max_pool2d(s, 1)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))


class CoarseHead(nn.Module):
    """Coarse probability map from the decoder stream: upsample x2, 1x1 conv to 1, sigmoid."""

    def __init__(self, channels=64):
        super().__init__()
        self.proj = nn.Conv2d(channels, 1, 1)

    def forward(self, d_above):
        return torch.sigmoid(self.proj(upsample2(d_above)))


@dataclass
class BgmOutput:
    features: torch.Tensor
    prob: torch.Tensor
    spatial: torch.Tensor
    channel: torch.Tensor


def _conv3(channels, norm_act):
    if norm_act:
        return conv_bn_relu(channels, channels, 3)
    return nn.Conv2d(channels, channels, 3, padding=1)


class BGM(nn.Module):
    """``conv3(M_s * (M_c * conv3(s)) + s) || up(d_above)`` with ``M_s`` from the coarse map."""

    def __init__(self, ke, kd, channels=64, reduction=16, detach_attention=False, norm_act=True):
        super().__init__()
        self.ke, self.kd = ke, kd
        self.detach_attention = detach_attention
        self.channel_attention = ChannelAttention(channels, reduction)
        self.coarse = CoarseHead(channels)
        self.inner = _conv3(channels, norm_act)
        self.outer = _conv3(channels, norm_act)

    def attention(self, s_m, d_above):
        """Return ``(P_l, M_s, M_c)``."""
        prob = self.coarse(d_above)
        if prob.shape[-2:] != s_m.shape[-2:]:
            raise ShapeError(
                f"BGM expects the decoder map at half the MGPM resolution: got "
                f"{tuple(s_m.shape[-2:])} and {tuple(d_above.shape[-2:])}"
            )
        source = prob.detach() if self.detach_attention else prob
        spatial = boundary_confidence(source, self.ke, self.kd)
        return prob, spatial, self.channel_attention(s_m)

    def fuse(self, s_m, d_above, spatial, channel):
        core = self.outer(spatial * (channel * self.inner(s_m)) + s_m)
        return torch.cat([core, upsample2(d_above)], dim=1)

    def forward(self, s_m, d_above) -> BgmOutput:
        prob, spatial, channel = self.attention(s_m, d_above)
        return BgmOutput(self.fuse(s_m, d_above, spatial, channel), prob, spatial, channel)
