import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pbnet.exceptions import ConfigError, ShapeError
from pbnet.morphology import boundary_band, boundary_confidence, dilate, erode

import oracles


def t(a):
    return torch.as_tensor(a, dtype=torch.float64)


class TestDilate:
    def test_zeros(self):
        assert torch.equal(dilate(torch.zeros(3, 3), 3), torch.zeros(3, 3))

    def test_center_impulse_fills(self):
        p = torch.zeros(3, 3)
        p[1, 1] = 1
        assert torch.equal(dilate(p, 3), torch.ones(3, 3))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        p = rng.random((16, 16))
        np.testing.assert_array_equal(dilate(t(p), 5).numpy(), oracles.window_max(p, 5))

    @pytest.mark.parametrize("k", [0, 2, 4, -1])
    def test_bad_kernel(self, k):
        with pytest.raises(ConfigError):
            dilate(torch.zeros(4, 4), k)

    def test_empty_map(self):
        with pytest.raises(ShapeError):
            dilate(torch.zeros(0, 4), 3)

    def test_batched_shapes_preserved(self):
        p = torch.rand(2, 1, 8, 8)
        assert dilate(p, 3).shape == p.shape
        assert dilate(p[:, 0], 3).shape == (2, 8, 8)


class TestErode:
    def test_ones_border_erodes(self):
        out = erode(torch.ones(3, 3), 3)
        expected = torch.zeros(3, 3)
        expected[1, 1] = 1
        assert torch.equal(out, expected)

    def test_zeros(self):
        assert torch.equal(erode(torch.zeros(3, 3), 3), torch.zeros(3, 3))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        p = rng.random((16, 16))
        np.testing.assert_array_equal(erode(t(p), 5).numpy(), oracles.window_min(p, 5))

    def test_bad_kernel(self):
        with pytest.raises(ConfigError):
            erode(torch.zeros(4, 4), 6)


class TestBoundaryConfidence:
    def test_zeros(self):
        assert torch.equal(boundary_confidence(torch.zeros(6, 6), 3, 5), torch.zeros(6, 6))

    def test_ones_5x5(self):
        out = boundary_confidence(torch.ones(5, 5), 3, 3)
        expected = torch.full((5, 5), 0.5)
        expected[1:4, 1:4] = 1.0
        assert torch.equal(out, expected)

    def test_disk_is_ternary_with_band_on_set_difference(self):
        yy, xx = np.mgrid[:32, :32]
        disk = (((yy - 15.5) ** 2 + (xx - 15.5) ** 2) <= 36).astype(np.float64)
        out = boundary_confidence(t(disk), 3, 5).numpy()
        assert set(np.unique(out)) <= {0.0, 0.5, 1.0}
        dil = oracles.window_max(disk, 3) > 0
        ero = oracles.window_min(disk, 5) > 0
        np.testing.assert_array_equal(out == 0.5, dil & ~ero)


class TestBoundaryBand:
    @pytest.mark.parametrize("c", [0.0, 0.3, 1.0])
    def test_constant_is_zero(self, c):
        assert torch.equal(boundary_band(torch.full((9, 9), c), 5), torch.zeros(9, 9))

    def test_step_edge_band(self):
        a = torch.zeros(6, 8)
        a[:, :4] = 1
        out = boundary_band(a, 3)
        nonzero_cols = torch.nonzero(out.abs().sum(0)).flatten().tolist()
        assert nonzero_cols == [3, 4]
        # hand-evaluated: interior rows see 2/3 on the left of the edge, 1/3 on the right
        assert out[2, 3].item() == pytest.approx(1 / 3)
        assert out[2, 4].item() == pytest.approx(1 / 3)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.random((16, 16))
        np.testing.assert_allclose(boundary_band(t(a), 5).numpy(), oracles.band(a, 5), rtol=0, atol=1e-15)

    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            boundary_band(torch.zeros(4, 4), 4)


unit_maps = arrays(np.float64, (7, 9), elements=st.floats(0, 1, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(unit_maps, st.sampled_from([3, 5, 7]))
def test_extensivity(p, k):
    x = t(p)
    assert torch.all(erode(x, k) <= x)
    assert torch.all(x <= dilate(x, k))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.sampled_from([3, 5]))
def test_constant_preserved_away_from_border(c, k):
    x = torch.full((11, 11), c, dtype=torch.float64)
    r = k // 2
    assert torch.all(dilate(x, k)[r:-r, r:-r] == c)
    assert torch.all(erode(x, k)[r:-r, r:-r] == c)


@pytest.mark.parametrize("op", ["dilate", "erode", "confidence", "band"])
def test_finite_difference_gradients(op):
    rng = np.random.default_rng(3)
    # distinct values keep max/min away from ties
    x0 = rng.permutation(36).reshape(6, 6) / 40 + 0.05
    weights = t(rng.standard_normal((6, 6)))
    fn = {
        "dilate": lambda x: dilate(x, 3),
        "erode": lambda x: erode(x, 3),
        "confidence": lambda x: boundary_confidence(x, 3, 5),
        "band": lambda x: boundary_band(x, 3),
    }[op]

    def scalar(x):
        return (fn(x) * weights).sum()

    x = t(x0).requires_grad_(True)
    scalar(x).backward()
    auto = x.grad.numpy()
    h = 1e-6
    fd = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (scalar(t(xp)).item() - scalar(t(xm)).item()) / (2 * h)
    rel = np.abs(fd - auto).max() / max(np.abs(auto).max(), 1e-12)
    assert rel <= 1e-4
