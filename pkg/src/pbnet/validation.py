"""Input validation helpers shared by the estimator, modules and CLI."""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import ConfigError, NumericError, ShapeError


def check_kernel_size(k) -> int:
    if isinstance(k, bool) or int(k) != k or k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel size must be an odd positive integer, got {k!r}")
    return int(k)


def check_map(p: torch.Tensor, name: str = "map") -> torch.Tensor:
    """Reshape a 2-D map (optionally batched / single-channel) to ``(N, 1, H, W)``."""
    if not torch.is_tensor(p):
        p = torch.as_tensor(np.asarray(p))
    if p.dim() < 2:
        raise ShapeError(f"{name} must have at least 2 dimensions, got shape {tuple(p.shape)}")
    if p.numel() == 0:
        raise ShapeError(f"{name} is empty (shape {tuple(p.shape)})")
    if p.dim() == 4 and p.shape[1] != 1:
        raise ShapeError(f"{name} must be single-channel, got {p.shape[1]} channels")
    if p.dim() > 4:
        raise ShapeError(f"{name} has too many dimensions: {tuple(p.shape)}")
    return p.reshape(-1, 1, p.shape[-2], p.shape[-1])


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "inputs"):
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def check_finite(x: torch.Tensor, name: str = "tensor"):
    if not torch.isfinite(x).all():
        raise NumericError(f"{name} contains NaN or inf")


def check_divisible(height: int, width: int, factor: int = 32, what: str = "input"):
    if height % factor or width % factor:
        fix_h = -(-height // factor) * factor
        fix_w = -(-width // factor) * factor
        raise ShapeError(
            f"{what} spatial size {height}x{width} is not divisible by {factor}; "
            f"resize or pad to e.g. {fix_h}x{fix_w}"
        )


def check_image_batch(X, *, divisible: int | None = 32) -> np.ndarray:
    """Coerce images to float32 ``(N, 3, H, W)``.

    Accepts ``(N, H, W)`` grayscale, ``(N, H, W, C)`` channels-last or
    ``(N, C, H, W)`` channels-first arrays with C in {1, 3}.
    """
    X = np.asarray(X)
    if X.dtype == object:
        raise ShapeError("image batch must be a regular numeric array")
    if X.ndim == 3:
        X = X[:, None]
    elif X.ndim == 4:
        if X.shape[1] not in (1, 3) and X.shape[-1] in (1, 3):
            X = np.moveaxis(X, -1, 1)
    else:
        raise ShapeError(f"expected image batch with 3 or 4 dims, got shape {X.shape}")
    if X.shape[1] not in (1, 3):
        raise ShapeError(f"images must have 1 or 3 channels, got {X.shape[1]}")
    if X.shape[0] == 0:
        raise ShapeError("image batch is empty")
    if X.shape[1] == 1:
        X = np.repeat(X, 3, axis=1)
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise NumericError("image batch contains NaN or inf")
    if divisible:
        check_divisible(X.shape[2], X.shape[3], divisible, "image")
    return X


def check_mask_batch(y, n_samples: int | None = None, spatial: tuple | None = None) -> np.ndarray:
    """Coerce masks to float32 ``(N, 1, H, W)`` with values in {0, 1}."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    elif y.ndim == 4 and y.shape[-1] == 1:
        y = y[..., 0]
    if y.ndim != 3:
        raise ShapeError(f"expected masks shaped (N, H, W), got {y.shape}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ShapeError(f"got {y.shape[0]} masks for {n_samples} images")
    if spatial is not None and tuple(y.shape[1:]) != tuple(spatial):
        raise ShapeError(f"mask size {y.shape[1:]} does not match image size {tuple(spatial)}")
    y = y.astype(np.float32)
    if y.max(initial=0) > 1:
        y = y / 255.0
    return (y >= 0.5).astype(np.float32)[:, None]
