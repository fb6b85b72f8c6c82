"""Rendering of predictions, overlays, attention and boundary maps to PNG."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .exceptions import ConfigError
from .morphology import boundary_map

GREEN = (0, 255, 0)  # correctly segmented lesion
YELLOW = (255, 255, 0)  # under-segmented (missed lesion)
RED = (255, 0, 0)  # over-segmented (background called lesion)


def to_u8(x) -> np.ndarray:
    """Map [0, 1] values to 8-bit gray (0.5 -> 128)."""
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)


def heatmap(x, cmap="jet") -> np.ndarray:
    rgba = colormaps[cmap](np.clip(np.asarray(x, dtype=np.float64), 0, 1))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def overlay(image, pred, gt) -> np.ndarray:
    """Color TP green, FN yellow, FP red over a grayscale copy of ``image``."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    gray = img.astype(np.float64).mean(axis=2).round().astype(np.uint8)
    out = np.repeat(gray[..., None], 3, axis=2)
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    out[pred & gt] = GREEN
    out[~pred & gt] = YELLOW
    out[pred & ~gt] = RED
    return out


def save_png(array, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(path)


def export_attention(model, image: torch.Tensor, out_dir, stem="image", gt_mask=None) -> dict:
    """Write per-level attention/boundary maps for one ``(3, H, W)`` image.

    Per level ``l``: ``{stem}_ms_l{l}.png`` (spatial attention, gray),
    ``{stem}_ms_l{l}_heat.png``, ``{stem}_p_l{l}.png`` (coarse probability),
    ``{stem}_boundary_l{l}.png`` (dilation minus erosion of the coarse map),
    ``{stem}_mc_l{l}.json`` (channel attention values) and, with ``gt_mask``,
    ``{stem}_tb_l{l}.png`` (the same boundary operator on the ground truth at
    that level's resolution).
    """
    if not getattr(model, "use_bgm", False):
        raise ConfigError("attention maps need a model with BGM enabled (bgm.enabled=true)")
    out_dir = Path(out_dir)
    model.eval()
    with torch.no_grad():
        outputs = model(image[None], return_aux=True)
    written = {}
    for level in sorted(outputs.aux):
        bgm = model.bgm[str(level)]
        aux = outputs.aux[level]
        prob = outputs.deep[level][0, 0]
        spatial = aux["spatial"][0, 0].numpy()
        files = {
            "ms": out_dir / f"{stem}_ms_l{level}.png",
            "ms_heat": out_dir / f"{stem}_ms_l{level}_heat.png",
            "p": out_dir / f"{stem}_p_l{level}.png",
            "boundary": out_dir / f"{stem}_boundary_l{level}.png",
            "mc": out_dir / f"{stem}_mc_l{level}.json",
        }
        save_png(to_u8(spatial), files["ms"])
        save_png(heatmap(spatial), files["ms_heat"])
        save_png(to_u8(prob.numpy()), files["p"])
        save_png(to_u8(boundary_map(prob, bgm.ke, bgm.kd).numpy()), files["boundary"])
        files["mc"].write_text(json.dumps([round(float(v), 8) for v in aux["channel"].flatten()]))
        if gt_mask is not None:
            g = torch.as_tensor(np.asarray(gt_mask, dtype=np.float32))[None, None]
            g_level = F.interpolate(g, size=prob.shape, mode="nearest")[0, 0]
            files["tb"] = out_dir / f"{stem}_tb_l{level}.png"
            save_png(to_u8(boundary_map(g_level, bgm.ke, bgm.kd).numpy()), files["tb"])
        written[level] = files
    return written
