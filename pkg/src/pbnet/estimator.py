"""scikit-learn compatible segmenter wrapping PBNet training and inference."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import PBNetConfig
from .data import SegmentationDataset, channel_stats
from .metrics import confusion, dice
from .network import PBNet, load_checkpoint, save_checkpoint
from .trainer import build_model, fit, predict_proba
from .validation import check_image_batch, check_mask_batch


class PBNetSegmenter(BaseEstimator):
    """Binary lesion segmenter.

    Parameters
    ----------
    backbone : str, default="efficientnet-b0"
        ``efficientnet-b0`` .. ``efficientnet-b5`` or ``tiny-test``.
    pretrained : bool, default=False
        Load ImageNet weights for the EfficientNet encoder.
    mgpm, bgm, boundary_loss : bool, default=True
        Ablation switches; ``boundary_loss`` requires ``bgm``.
    epochs, batch_size, lr, poly_power, weight_decay :
        Optimization settings (AdamW with a poly learning-rate decay).
    augment : bool, default=True
        Random flip / rotation / scaling during training.
    threshold : float, default=0.5
        Probability cut used by :meth:`predict` and :meth:`score`.
    seed : int, default=0
    device : str, default="cpu"
    config : dict or None
        Extra nested config entries (same keys as the YAML file); explicit
        parameters above take precedence.

    Images are ``(N, H, W)``, ``(N, H, W, C)`` or ``(N, C, H, W)`` uint8 or
    float arrays with H, W divisible by 32; masks are ``(N, H, W)`` binary.

    Attributes
    ----------
    model_ : PBNet
    config_ : PBNetConfig
    normalization_ : dict
        Per-channel mean/std computed on the training images.
    history_ : RunLog
    """

    def __init__(
        self,
        backbone="efficientnet-b0",
        pretrained=False,
        mgpm=True,
        bgm=True,
        boundary_loss=True,
        epochs=100,
        batch_size=16,
        lr=1e-3,
        poly_power=0.9,
        weight_decay=0.01,
        augment=True,
        threshold=0.5,
        seed=0,
        device="cpu",
        config=None,
    ):
        self.backbone = backbone
        self.pretrained = pretrained
        self.mgpm = mgpm
        self.bgm = bgm
        self.boundary_loss = boundary_loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.poly_power = poly_power
        self.weight_decay = weight_decay
        self.augment = augment
        self.threshold = threshold
        self.seed = seed
        self.device = device
        self.config = config

    def _build_config(self, image_size) -> PBNetConfig:
        cfg = PBNetConfig.from_dict(self.config or {})
        return cfg.replace(
            **{
                "backbone.variant": self.backbone,
                "backbone.pretrained": self.pretrained,
                "mgpm.enabled": self.mgpm,
                "bgm.enabled": self.bgm,
                "loss.boundary": self.boundary_loss,
                "train.epochs": self.epochs,
                "train.batch_size": self.batch_size,
                "train.base_lr": self.lr,
                "train.poly_power": self.poly_power,
                "train.weight_decay": self.weight_decay,
                "train.seed": self.seed,
                "train.device": self.device,
                "data.augment.enabled": self.augment,
                "data.threshold": self.threshold,
                "data.image_size": list(image_size),
            }
        )

    @staticmethod
    def _to_uint8_hwc(X):
        X = check_image_batch(X)
        if X.max(initial=0) <= 1.0:
            X = X * 255.0
        return np.clip(np.round(X), 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)

    def fit(self, X, y):
        images = self._to_uint8_hwc(X)
        masks = check_mask_batch(y, len(images), images.shape[1:3])[:, 0].astype(np.uint8)
        cfg = self._build_config(images.shape[1:3])
        self.normalization_ = channel_stats(images)
        policy = cfg.data.augment if cfg.data.augment.enabled else None
        ds = SegmentationDataset(images, masks, None, self.normalization_, policy, cfg.train.seed)
        self.model_ = build_model(cfg)
        self.history_ = fit(self.model_, ds, cfg)
        self.model_.eval()
        self.config_ = cfg
        return self

    def _normalized(self, X):
        images = self._to_uint8_hwc(X)
        ds = SegmentationDataset(images, np.zeros(images.shape[:3], np.uint8), None, self.normalization_)
        return torch.stack([ds[i][0] for i in range(len(ds))])

    def predict_proba(self, X):
        """Foreground probability per pixel, ``(N, H, W)`` float32."""
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, self._normalized(X), device=self.config_.train.device)

    def predict(self, X):
        """Binary masks ``(N, H, W)`` uint8."""
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Mean per-image Dice."""
        pred = self.predict(X)
        masks = check_mask_batch(y, len(pred), pred.shape[1:])[:, 0]
        return float(np.mean([dice(confusion(p, m)) for p, m in zip(pred, masks)]))

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(
            path,
            self.model_,
            self.config_,
            extra={"normalization": self.normalization_, "estimator_params": self.get_params()},
        )

    @classmethod
    def load(cls, path) -> "PBNetSegmenter":
        model, cfg, meta = load_checkpoint(path)
        params = dict(meta["extra"].get("estimator_params") or {})
        est = cls(**params)
        est.model_, est.config_ = model, cfg
        est.normalization_ = meta["extra"]["normalization"]
        return est

    @classmethod
    def from_model(cls, model: PBNet, cfg: PBNetConfig, normalization) -> "PBNetSegmenter":
        est = cls(backbone=cfg.backbone.variant, threshold=cfg.data.threshold, device=cfg.train.device)
        est.model_, est.config_, est.normalization_ = model.eval(), cfg, normalization
        return est
