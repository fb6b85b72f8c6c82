"""Encoder feature pyramid (strides 2..32) and 64-channel skip projections."""

from __future__ import annotations

import torch
import torch.nn as nn
from torchvision import models

from .exceptions import ConfigError
from .validation import check_divisible

SKIP_CHANNELS = 64

# torchvision EfficientNet ``features`` indices whose outputs sit at strides 2, 4, 8, 16, 32
_EFFICIENTNET_TAPS = (1, 2, 3, 5, 7)


def conv_bn_relu(in_ch, out_ch, kernel_size=3, stride=1, groups=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, stride, kernel_size // 2, groups=groups, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class TinyEncoder(nn.Module):
    """Five stride-2 conv blocks of 8 channels; a CPU stand-in for unit tests."""

    def __init__(self, width: int = 8):
        super().__init__()
        chans = [3] + [width] * 5
        self.stages = nn.ModuleList(conv_bn_relu(chans[i], chans[i + 1], stride=2) for i in range(5))
        self.channels = tuple(chans[1:])

    def forward(self, x):
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class EfficientNetEncoder(nn.Module):
    def __init__(self, variant: str = "efficientnet-b0", pretrained: bool = False):
        super().__init__()
        name = variant.replace("-", "_")
        builder = getattr(models, name, None)
        if builder is None:
            raise ConfigError(f"torchvision has no {name}")
        weights = "DEFAULT" if pretrained else None
        try:
            net = builder(weights=weights)
        except Exception as exc:  # download / cache failures
            raise ConfigError(f"cannot load pretrained weights for {variant}: {exc}") from exc
        self.features = net.features[: _EFFICIENTNET_TAPS[-1] + 1]
        self.channels = tuple(_last_conv(self.features[i]).out_channels for i in _EFFICIENTNET_TAPS)

    def forward(self, x):
        levels = []
        for i, block in enumerate(self.features):
            x = block(x)
            if i in _EFFICIENTNET_TAPS:
                levels.append(x)
        return levels


def _last_conv(module):
    convs = [m for m in module.modules() if isinstance(m, nn.Conv2d)]
    return convs[-1]


def build_encoder(variant: str, pretrained: bool = False) -> nn.Module:
    if variant == "tiny-test":
        if pretrained:
            raise ConfigError("the tiny-test backbone has no pretrained weights")
        return TinyEncoder()
    if variant.startswith("efficientnet-b"):
        return EfficientNetEncoder(variant, pretrained)
    raise ConfigError(f"unknown backbone variant {variant!r}")


class Backbone(nn.Module):
    """Encoder plus one 1x1 conv + BN + ReLU per level mapping channels to 64."""

    def __init__(self, variant: str = "efficientnet-b0", pretrained: bool = False):
        super().__init__()
        self.variant = variant
        self.encoder = build_encoder(variant, pretrained)
        self.skips = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c, SKIP_CHANNELS, 1),
                nn.BatchNorm2d(SKIP_CHANNELS),
                nn.ReLU(inplace=True),
            )
            for c in self.encoder.channels
        )

    @property
    def channels(self):
        return self.encoder.channels

    def extract_pyramid(self, image: torch.Tensor) -> list[torch.Tensor]:
        check_divisible(image.shape[-2], image.shape[-1], 32, "image")
        return self.encoder(image)

    def to_skip_features(self, pyramid: list[torch.Tensor]) -> list[torch.Tensor]:
        return [proj(level) for proj, level in zip(self.skips, pyramid)]

    def forward(self, image):
        pyramid = self.extract_pyramid(image)
        return pyramid, self.to_skip_features(pyramid)
