import pytest
import torch

from pbnet.bgm import BGM, ChannelAttention, CoarseHead
from pbnet.exceptions import ShapeError


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestChannelAttention:
    def test_zero_weights_half(self):
        ca = ChannelAttention()
        zero_(ca)
        assert torch.equal(ca(torch.randn(2, 64, 8, 8)), torch.full((2, 64, 1, 1), 0.5))

    def test_shape_and_range(self):
        torch.manual_seed(0)
        mc = ChannelAttention()(torch.randn(1, 64, 32, 32))
        assert mc.shape == (1, 64, 1, 1)
        assert ((mc > 0) & (mc < 1)).all()

    def test_constant_input_doubles_mlp(self):
        torch.manual_seed(0)
        ca = ChannelAttention()
        v = torch.randn(1, 64, 1, 1)
        mc = ca(v.expand(1, 64, 8, 8))
        torch.testing.assert_close(mc, torch.sigmoid(2 * ca.mlp(v)))


class TestCoarseHead:
    def test_zero_half(self):
        head = CoarseHead()
        zero_(head)
        assert torch.equal(head(torch.randn(1, 64, 4, 4)), torch.full((1, 1, 8, 8), 0.5))

    def test_shape_range(self):
        torch.manual_seed(0)
        p = CoarseHead()(torch.randn(1, 64, 16, 16))
        assert p.shape == (1, 1, 32, 32)
        assert ((p > 0) & (p < 1)).all()


class TestBGM:
    def test_golden_shapes(self):
        out = BGM(3, 5).eval()(torch.randn(1, 64, 64, 64), torch.randn(1, 64, 32, 32))
        assert out.features.shape == (1, 128, 64, 64)
        assert out.prob.shape == (1, 1, 64, 64)
        assert out.channel.shape == (1, 64, 1, 1)
        assert ((out.prob > 0) & (out.prob < 1)).all()
        assert ((out.spatial >= 0) & (out.spatial <= 1)).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            BGM(3, 5)(torch.randn(1, 64, 16, 16), torch.randn(1, 64, 16, 16))

    def test_unit_attention_is_residual(self):
        torch.manual_seed(0)
        bgm = BGM(3, 5).eval()
        s = torch.randn(1, 64, 8, 8)
        d = torch.randn(1, 64, 4, 4)
        out = bgm.fuse(s, d, torch.ones(1, 1, 8, 8), torch.ones(1, 64, 1, 1))
        torch.testing.assert_close(out[:, :64], bgm.outer(bgm.inner(s) + s))

    def test_gate_to_zero_leaves_residual(self):
        torch.manual_seed(0)
        bgm = BGM(3, 5).eval()
        s = torch.randn(1, 64, 8, 8)
        d = torch.randn(1, 64, 4, 4)
        mc = torch.rand(1, 64, 1, 1)
        target = bgm.outer(s)
        errs = [
            (bgm.fuse(s, d, torch.full((1, 1, 8, 8), scale), mc)[:, :64] - target).abs().max().item()
            for scale in (1.0, 0.1, 0.01, 0.0)
        ]
        assert errs[-1] == 0.0
        assert errs[0] >= errs[1] >= errs[2] >= errs[3]

    def test_gradients_through_both_paths(self):
        torch.manual_seed(0)
        bgm = BGM(3, 5)
        d = torch.randn(1, 64, 4, 4)
        s = torch.randn(1, 64, 8, 8, requires_grad=True)
        ms, mc = torch.rand(1, 1, 8, 8), torch.rand(1, 64, 1, 1)
        # attention path only (residual detached)
        core = bgm.outer(ms * (mc * bgm.inner(s)) + s.detach())
        (g_att,) = torch.autograd.grad(core.sum(), s)
        # residual path only (attention detached)
        core = bgm.outer(ms * (mc * bgm.inner(s.detach())) + s)
        (g_res,) = torch.autograd.grad(core.sum(), s)
        assert g_att.abs().sum() > 0 and g_res.abs().sum() > 0

    @pytest.mark.parametrize("detach", [False, True])
    def test_detach_flag(self, detach):
        torch.manual_seed(0)
        bgm = BGM(3, 5, detach_attention=detach).eval()
        s = torch.randn(1, 64, 8, 8)
        d = torch.randn(1, 64, 4, 4)
        out = bgm(s, d)
        assert out.spatial.requires_grad == (not detach)
