"""Differentiable square-window morphology built on stride-1 pooling.

All operators keep the spatial size of their input (centered windows,
stride 1). Pixels outside the image count as background (0) for dilation
and erosion; the band operator averages only in-image pixels so constant
maps give an exactly zero response everywhere, borders included.

Inputs may be ``(H, W)``, ``(N, H, W)`` or ``(N, 1, H, W)``; outputs have
the same shape as the input.
"""

import torch
import torch.nn.functional as F

from .validation import check_kernel_size, check_map


def dilate(p: torch.Tensor, k: int) -> torch.Tensor:
    """Max over the centered ``k x k`` window, outside treated as 0."""
    k = check_kernel_size(k)
    x = check_map(p, "dilate input")
    r = k // 2
    out = F.max_pool2d(F.pad(x, (r, r, r, r), value=0.0), k, stride=1)
    return out.reshape(p.shape)


def erode(p: torch.Tensor, k: int) -> torch.Tensor:
    """Min over the centered ``k x k`` window, outside treated as 0.

    Realized as ``-maxpool(-p)`` with zero padding of ``-p``, so a border ring
    of width ``(k - 1) // 2`` erodes toward 0 for non-negative maps.
    """
    k = check_kernel_size(k)
    x = check_map(p, "erode input")
    r = k // 2
    out = -F.max_pool2d(F.pad(-x, (r, r, r, r), value=0.0), k, stride=1)
    return out.reshape(p.shape)


def boundary_confidence(p: torch.Tensor, ke: int, kd: int) -> torch.Tensor:
    """Ternary confidence map ``(dilate(p, ke) + erode(p, kd)) / 2``.

    For a binary map this is 1 inside the confidently-eroded lesion, 0 on
    confident background and exactly 0.5 on the band between the dilated and
    eroded supports.
    """
    return (dilate(p, ke) + erode(p, kd)) / 2


def window_mean(a: torch.Tensor, k: int) -> torch.Tensor:
    """Centered ``k x k`` mean over in-image pixels only (float64 accumulation)."""
    k = check_kernel_size(k)
    x = check_map(a, "window_mean input").double()
    out = F.avg_pool2d(x, k, stride=1, padding=k // 2, count_include_pad=False)
    return out.reshape(a.shape).to(a.dtype)


def boundary_band(a: torch.Tensor, k: int) -> torch.Tensor:
    """``|mean_k(a) - a|``: nonzero only near intensity transitions.

    Windows whose in-image pixels are all equal give exactly 0 (pooled means
    of a constant can otherwise carry rounding residue).
    """
    k = check_kernel_size(k)
    x = check_map(a, "boundary_band input").double()
    r = k // 2
    mean = F.avg_pool2d(x, k, stride=1, padding=r, count_include_pad=False)
    # max_pool2d pads with -inf, so these are over in-image pixels only
    hi = F.max_pool2d(x, k, stride=1, padding=r)
    lo = -F.max_pool2d(-x, k, stride=1, padding=r)
    band = torch.where(hi == lo, torch.zeros_like(x), (mean - x).abs())
    return band.reshape(a.shape).to(a.dtype)


def boundary_map(p: torch.Tensor, ke: int, kd: int) -> torch.Tensor:
    """``dilate - erode``; used to render the boundaries BGM attends to."""
    return dilate(p, ke) - erode(p, kd)
