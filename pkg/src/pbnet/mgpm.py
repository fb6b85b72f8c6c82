"""Multilevel global perception: cell-split fusion of a level with the level above."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import conv_bn_relu
from .exceptions import ShapeError


def cell_split(x: torch.Tensor, n: int) -> torch.Tensor:
    """Tile ``(B, C, H, W)`` into an ``n x n`` grid stacked on channels.

    Output is ``(B, n*n*C, H/n, W/n)``; cell ``(i, j)`` (row-major) occupies
    channels ``[(i*n + j)*C, (i*n + j + 1)*C)``.
    """
    b, c, h, w = x.shape
    if h % n or w % n:
        raise ShapeError(f"cannot split {h}x{w} map into {n}x{n} cells")
    x = x.reshape(b, c, n, h // n, n, w // n)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, n * n * c, h // n, w // n)


def cell_merge(s: torch.Tensor, n: int) -> torch.Tensor:
    """Inverse of :func:`cell_split`."""
    b, cc, h, w = s.shape
    if cc % (n * n):
        raise ShapeError(f"{cc} channels cannot be merged from {n}x{n} cells")
    c = cc // (n * n)
    s = s.reshape(b, n, n, c, h, w)
    s = s.permute(0, 3, 1, 4, 2, 5)
    return s.reshape(b, c, n * h, n * w)


class DepthwiseSeparable(nn.Module):
    def __init__(self, in_ch, out_ch, norm_act=True):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, 3, padding=1, groups=in_ch, bias=False)
        self.bn1 = nn.BatchNorm2d(in_ch) if norm_act else nn.Identity()
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch) if norm_act else nn.Identity()
        self.act = nn.ReLU(inplace=True) if norm_act else nn.Identity()

    def forward(self, x):
        x = self.act(self.bn1(self.depthwise(x)))
        return self.act(self.bn2(self.pointwise(x)))


class MGPM(nn.Module):
    """Fuse skip feature ``e`` (H x W) with the higher-level map ``s_above`` (H/2 x W/2).

    Both streams are reduced to ``reduced`` channels, split into ``n x n``
    cells, concatenated, fused by a depth-wise separable 3x3 conv that halves
    the channels, merged back to ``reduced x H x W`` and lifted to 64 channels
    by two 3x3 convs.
    """

    def __init__(self, in_channels=64, n=2, reduced=32, out_channels=64, upsample_mode="bilinear"):
        super().__init__()
        self.n = n
        self.reduced = reduced
        self.upsample_mode = upsample_mode
        self.reduce_low = conv_bn_relu(in_channels, reduced, 1)
        self.reduce_high = conv_bn_relu(in_channels, reduced, 1)
        stacked = 2 * n * n * reduced
        self.fuse = DepthwiseSeparable(stacked, stacked // 2)
        self.lift = nn.Sequential(
            conv_bn_relu(reduced, out_channels, 3),
            conv_bn_relu(out_channels, out_channels, 3),
        )

    def forward(self, e, s_above):
        h, w = e.shape[-2:]
        if tuple(s_above.shape[-2:]) != (h // 2, w // 2) or h % 2 or w % 2:
            raise ShapeError(
                f"MGPM expects the higher level at half resolution: got {tuple(e.shape[-2:])} "
                f"and {tuple(s_above.shape[-2:])}"
            )
        align = False if self.upsample_mode in ("bilinear", "bicubic") else None
        up = F.interpolate(s_above, size=(h, w), mode=self.upsample_mode, align_corners=align)
        low = cell_split(self.reduce_low(e), self.n)
        high = cell_split(self.reduce_high(up), self.n)
        fused = self.fuse(torch.cat([low, high], dim=1))
        return self.lift(cell_merge(fused, self.n))
