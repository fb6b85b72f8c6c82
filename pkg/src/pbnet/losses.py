"""Segmentation loss, boundary-enhanced loss and the deep-supervised total."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import LossConfig
from .exceptions import ConfigError, NumericError
from .morphology import boundary_band, window_mean
from .validation import check_same_shape


@dataclass
class LossBundle:
    total: torch.Tensor
    per_term: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {"total": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.per_term.items()})
        return out


def _as_nchw(x):
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def _check_inputs(p, g):
    check_same_shape(p, g, "prediction and target")
    if torch.isnan(p).any() or torch.isnan(g).any():
        raise NumericError("NaN in loss input")


def iou_loss(p, g, eps=1e-6, weight=None):
    """Per-image soft IoU loss ``1 - (sum pg + eps) / (sum(p + g - pg) + eps)``, batch mean."""
    p, g = _as_nchw(p), _as_nchw(g)
    w = torch.ones_like(p) if weight is None else weight
    inter = (w * p * g).sum(dim=(1, 2, 3))
    union = (w * (p + g - p * g)).sum(dim=(1, 2, 3))
    return (1 - (inter + eps) / (union + eps)).mean()


def bce_loss(p, g, eps=1e-6, weight=None):
    """Pixel-mean binary cross-entropy with ``p`` clamped to ``[eps, 1 - eps]``."""
    p = p.clamp(eps, 1 - eps)
    ce = -(g * torch.log(p) + (1 - g) * torch.log(1 - p))
    if weight is None:
        return ce.mean()
    w4, ce4 = _as_nchw(weight), _as_nchw(ce)
    per_image = (w4 * ce4).sum(dim=(1, 2, 3)) / w4.sum(dim=(1, 2, 3))
    return per_image.mean()


def boundary_weight(g, k=31, gain=5.0):
    """Optional emphasis map ``1 + gain * |mean_k(g) - g|`` for the weighted IoU variant."""
    return 1 + gain * (window_mean(g, k) - g).abs()


def seg_terms(p, g, eps=1e-6, weighted=False) -> tuple[torch.Tensor, torch.Tensor]:
    _check_inputs(p, g)
    weight = boundary_weight(_as_nchw(g)).reshape(g.shape) if weighted else None
    return iou_loss(p, g, eps, weight), bce_loss(p, g, eps, weight)


def seg_loss(p, g, eps=1e-6, weighted=False) -> torch.Tensor:
    iou, bce = seg_terms(p, g, eps, weighted)
    return iou + bce


def boundary_loss(p, g, k=5) -> torch.Tensor:
    """MSE between the boundary bands ``|mean_k(x) - x|`` of prediction and target."""
    _check_inputs(p, g)
    return F.mse_loss(boundary_band(p, k), boundary_band(g, k))


def beseg_loss(p_up, g, cfg: LossConfig | None = None) -> torch.Tensor:
    """``alpha1 * seg + alpha2 * boundary`` on a map already at target resolution."""
    cfg = cfg or LossConfig()
    loss = cfg.alpha1 * seg_loss(p_up, g, cfg.epsilon, cfg.weighted_iou)
    if cfg.alpha2:
        loss = loss + cfg.alpha2 * boundary_loss(p_up, g, cfg.k)
    return loss


def upsample_to(p, size):
    return F.interpolate(_as_nchw(p), size=size, mode="bilinear", align_corners=False)


def combine_levels(level_losses: dict, final_seg, lambdas: dict):
    """``sum_l lambda_l * L_l + lambda_0 * L_seg(P_0)``."""
    total = lambdas.get(0, 1.0) * final_seg
    for level, value in sorted(level_losses.items()):
        total = total + lambdas[level] * value
    return total


def total_loss(outputs, g, cfg: LossConfig | None = None, *, deep=True) -> LossBundle:
    """Deep-supervised objective over the final map and every deep map in ``cfg.lambdas``.

    ``outputs`` is a :class:`~pbnet.network.PBNetOutputs` (anything with
    ``p0`` and a ``deep`` level->map dict). With ``cfg.boundary`` off the deep
    levels get the plain segmentation loss; with ``deep=False`` only the final
    map is supervised.
    """
    cfg = cfg or LossConfig()
    g = _as_nchw(g)
    size = g.shape[-2:]
    iou0, bce0 = seg_terms(_as_nchw(outputs.p0), g, cfg.epsilon, cfg.weighted_iou)
    terms = {"seg_0": iou0 + bce0, "iou_0": iou0, "bce_0": bce0}
    level_losses = {}
    if deep:
        for level in sorted(l for l in cfg.lambdas if l != 0):
            if level not in outputs.deep:
                raise ConfigError(f"loss configured for level {level} but the model produced no map there")
            p_up = upsample_to(outputs.deep[level], size)
            iou, bce = seg_terms(p_up, g, cfg.epsilon, cfg.weighted_iou)
            terms[f"iou_{level}"], terms[f"bce_{level}"] = iou, bce
            level_loss = cfg.alpha1 * (iou + bce)
            if cfg.boundary:
                bnd = boundary_loss(p_up, g, cfg.k)
                terms[f"boundary_{level}"] = bnd
                level_loss = level_loss + cfg.alpha2 * bnd
            terms[f"beseg_{level}"] = level_loss
            level_losses[level] = level_loss
    total = combine_levels(level_losses, terms["seg_0"], cfg.lambdas)
    return LossBundle(total, terms)
