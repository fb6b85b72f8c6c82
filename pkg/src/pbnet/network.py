"""Full encoder-decoder assembly, complexity counters and checkpoint I/O."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .backbone import SKIP_CHANNELS, Backbone, conv_bn_relu
from .bgm import BGM, upsample2
from .config import DEFAULT_BGM_KERNELS, PBNetConfig
from .exceptions import ConfigError, ShapeError
from .mgpm import MGPM
from .validation import check_divisible

CHECKPOINT_SCHEMA_VERSION = 1
LEVELS = (3, 2, 1)


@dataclass
class PBNetOutputs:
    p0: torch.Tensor
    deep: dict = field(default_factory=dict)  # level -> coarse probability map at its native stride
    aux: dict = field(default_factory=dict)  # level -> {"spatial", "channel"} when requested


class DecoderBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU: 128 channels in, 64 out."""

    def __init__(self, in_channels=2 * SKIP_CHANNELS, out_channels=SKIP_CHANNELS):
        super().__init__()
        self.in_channels = in_channels
        self.body = nn.Sequential(
            conv_bn_relu(in_channels, out_channels, 3),
            conv_bn_relu(out_channels, out_channels, 3),
        )

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"decoder block expects {self.in_channels} channels, got {x.shape[1]}")
        return self.body(x)


class PBNet(nn.Module):
    """Encoder-decoder with MGPM and BGM on the skip connections of levels 1-3.

    With ``use_mgpm=False`` the skip feature passes through unchanged; with
    ``use_bgm=False`` the skip is concatenated with the upsampled decoder
    stream directly and no deep probability maps are produced.
    """

    def __init__(
        self,
        backbone="efficientnet-b0",
        pretrained=False,
        use_mgpm=True,
        use_bgm=True,
        mgpm_n=2,
        mgpm_reduced=32,
        upsample_mode="bilinear",
        bgm_kernels=None,
        detach_attention=False,
        reduction=16,
        bgm_norm_act=True,
    ):
        super().__init__()
        kernels = {int(k): tuple(v) for k, v in (bgm_kernels or DEFAULT_BGM_KERNELS).items()}
        self.use_mgpm = use_mgpm
        self.use_bgm = use_bgm
        self.mgpm_n = mgpm_n
        self.backbone = Backbone(backbone, pretrained)
        c = SKIP_CHANNELS
        if use_mgpm:
            self.mgpm = nn.ModuleDict(
                {str(l): MGPM(c, mgpm_n, mgpm_reduced, c, upsample_mode) for l in LEVELS}
            )
        if use_bgm:
            self.bgm = nn.ModuleDict(
                {
                    str(l): BGM(*kernels[l], c, reduction, detach_attention, bgm_norm_act)
                    for l in LEVELS
                }
            )
        self.decoders = nn.ModuleDict({str(l): DecoderBlock() for l in (3, 2, 1, 0)})
        self.head = nn.Conv2d(c, 1, 1)

    @classmethod
    def from_config(cls, cfg: PBNetConfig) -> "PBNet":
        return cls(
            backbone=cfg.backbone.variant,
            pretrained=cfg.backbone.pretrained,
            use_mgpm=cfg.mgpm.enabled,
            use_bgm=cfg.bgm.enabled,
            mgpm_n=cfg.mgpm.n,
            mgpm_reduced=cfg.mgpm.reduced_channels,
            upsample_mode=cfg.mgpm.upsample_mode,
            bgm_kernels=cfg.bgm.kernels,
            detach_attention=cfg.bgm.detach_attention,
            reduction=cfg.bgm.reduction,
            bgm_norm_act=cfg.bgm.norm_act,
        )

    def forward(self, image, return_aux=False) -> PBNetOutputs:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected images shaped (B, 3, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        check_divisible(h, w, 32, "image")
        if self.use_mgpm and ((h // 16) % self.mgpm_n or (w // 16) % self.mgpm_n):
            raise ShapeError(
                f"input {h}x{w}: level-3 features ({h // 16}x{w // 16}) must split into "
                f"{self.mgpm_n}x{self.mgpm_n} cells"
            )
        _, skips = self.backbone(image)
        d = skips[4]
        s_above = skips[4]
        out = PBNetOutputs(p0=None)
        for level in LEVELS:
            try:
                s_m = self.mgpm[str(level)](skips[level], s_above) if self.use_mgpm else skips[level]
                if self.use_bgm:
                    res = self.bgm[str(level)](s_m, d)
                    x = res.features
                    out.deep[level] = res.prob
                    if return_aux:
                        out.aux[level] = {"spatial": res.spatial, "channel": res.channel}
                else:
                    x = torch.cat([s_m, upsample2(d)], dim=1)
                d = self.decoders[str(level)](x)
            except ShapeError as exc:
                raise ShapeError(f"level {level}: {exc}") from exc
            s_above = s_m
        d0 = self.decoders["0"](torch.cat([upsample2(d), skips[0]], dim=1))
        out.p0 = upsample2(torch.sigmoid(self.head(d0)))
        return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_macs(model: nn.Module, input_size=(256, 256)) -> int:
    """Multiply-accumulates of conv and linear layers for one image.

    Normalization, activations, pooling and interpolation are not counted.
    """
    total = 0

    def conv_hook(mod, inp, out):
        nonlocal total
        kh, kw = mod.kernel_size
        total += out[0].numel() * (mod.in_channels // mod.groups) * kh * kw

    def linear_hook(mod, inp, out):
        nonlocal total
        total += out[0].numel() * mod.in_features

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, *input_size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total


def save_checkpoint(path, model: PBNet, cfg: PBNetConfig, *, fold=None, epoch=None, metrics=None, extra=None):
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "state_dict": model.state_dict(),
        "fold": fold,
        "epoch": epoch,
        "metrics": metrics or {},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, map_location="cpu"):
    """Return ``(model, config, meta)``; ``meta`` carries fold/epoch/metrics/extra."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=map_location, weights_only=True)
    version = payload.get("schema_version", 0)
    if version > CHECKPOINT_SCHEMA_VERSION:
        raise ConfigError(
            f"checkpoint schema {version} is newer than supported ({CHECKPOINT_SCHEMA_VERSION})"
        )
    cfg = PBNetConfig.from_dict(payload["config"])
    model = PBNet.from_config(cfg.replace(**{"backbone.pretrained": False}))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {k: payload.get(k) for k in ("fold", "epoch", "metrics", "extra", "schema_version")}
    return model, cfg, meta
