import pytest
import torch

from pbnet.backbone import Backbone, build_encoder
from pbnet.exceptions import ConfigError, ShapeError


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    return Backbone("tiny-test").eval()


def test_tiny_pyramid_shapes(tiny):
    pyramid = tiny.extract_pyramid(torch.randn(1, 3, 64, 64))
    assert [tuple(e.shape[1:]) for e in pyramid] == [(8, s, s) for s in (32, 16, 8, 4, 2)]


@pytest.mark.parametrize("size", [(256, 256), (256, 384)])
def test_tiny_stride_law(tiny, size):
    h, w = size
    pyramid, skips = tiny(torch.randn(1, 3, h, w))
    assert len(pyramid) == len(skips) == 5
    for level, (e, s) in enumerate(zip(pyramid, skips)):
        assert e.shape[-2:] == (h >> (level + 1), w >> (level + 1))
        assert s.shape[1] == 64 and s.shape[-2:] == e.shape[-2:]


def test_efficientnet_b0_golden_shapes():
    torch.manual_seed(0)
    bb = Backbone("efficientnet-b0").eval()
    with torch.no_grad():
        pyramid, skips = bb(torch.randn(1, 3, 256, 384))
    assert [tuple(e.shape[-2:]) for e in pyramid] == [(128, 192), (64, 96), (32, 48), (16, 24), (8, 12)]
    assert bb.channels == (16, 24, 40, 112, 320)
    assert all(s.shape[1] == 64 for s in skips)
    assert all(torch.isfinite(e).all() for e in pyramid)


@pytest.mark.parametrize("size", [(65, 64), (64, 48), (100, 100)])
def test_non_divisible_input(tiny, size):
    with pytest.raises(ShapeError, match="not divisible by 32"):
        tiny.extract_pyramid(torch.zeros(1, 3, *size))


def test_unknown_variant():
    with pytest.raises(ConfigError):
        build_encoder("resnet50")
    with pytest.raises(ConfigError):
        build_encoder("tiny-test", pretrained=True)


def test_skip_projection_24_channels():
    proj = Backbone("efficientnet-b0").skips[1].eval()
    out = proj(torch.randn(1, 24, 64, 64))
    assert out.shape == (1, 64, 64, 64)


def test_skip_projection_linear_at_zero(tiny):
    conv = tiny.skips[0][0]
    with torch.no_grad():
        conv.bias.zero_()
    assert torch.equal(conv(torch.zeros(1, 8, 4, 4)), torch.zeros(1, 64, 4, 4))


@pytest.mark.parametrize("level", range(5))
def test_gradient_reaches_stage(level):
    torch.manual_seed(level)
    bb = Backbone("tiny-test")
    _, skips = bb(torch.randn(2, 3, 64, 64))
    skips[level].pow(2).mean().backward()
    grad = bb.encoder.stages[level][0].weight.grad
    assert grad is not None and grad.abs().sum() > 0
