import numpy as np
import pytest

from gradutil import make_checkable, worst
from tsain.numerics import ConfigError, ConvParams, ParamBuilder, ParamStore, ShapeError, Tensor4, grad_check, square, sum_all
from tsain.refine import build_drb_params, drb_forward, stacked_drb

C = 4


def _triple(rng, h=8, w=8):
    return tuple(Tensor4(rng.normal(size=(1, C, h, w))) for _ in range(3))


def _identity_kernel():
    w = np.zeros((C, C, 3, 3))
    for i in range(C):
        w[i, i, 1, 1] = 1.0
    return ConvParams.same(Tensor4(w))


def _blocks(n, seed=0):
    s = ParamStore()
    pb = ParamBuilder(s, seed)
    return s, [build_drb_params(pb, f"drb{i + 1}", C) for i in range(n)]


def test_zero_refresh_keeps_f1(rng):
    _, (p,) = _blocks(1)
    f0, f1, f2 = _triple(rng)
    _, f1n, _ = drb_forward(f0, f1, f2, p)
    np.testing.assert_array_equal(f1n.data, f1.data)


def test_identity_kernels_halve(rng):
    _, (p,) = _blocks(1)
    p.dconv0 = _identity_kernel()
    p.dconv2 = _identity_kernel()
    f0, f1, f2 = _triple(rng)
    f0a, _, f2a = drb_forward(f0, f1, f2, p)
    np.testing.assert_allclose(f0a.data, 0.5 * f0.data, atol=1e-15)
    np.testing.assert_allclose(f2a.data, 0.5 * f2.data, atol=1e-15)


def test_shape_mismatch(rng):
    _, (p,) = _blocks(1)
    f0, f1, _ = _triple(rng)
    with pytest.raises(ShapeError):
        drb_forward(f0, f1, Tensor4(np.zeros((1, C, 4, 8))), p)


def test_refresh_width_checked():
    _, (p,) = _blocks(1)
    with pytest.raises(ShapeError):
        type(p)(p.pred0, p.pred2, p.dconv0, p.dconv2, p.dconv0)


def test_feedback_gradient(rng):
    s, (p,) = _blocks(1)
    make_checkable(s, 21)
    f0, f1, f2 = _triple(rng)
    for name, t in (("in.f0", f0), ("in.f1", f1), ("in.f2", f2)):
        s.add(name, t)
    f = lambda st: sum_all(square(drb_forward(st["in.f0"], st["in.f1"], st["in.f2"], p)[1]))
    assert worst(grad_check(f, s, samples=12)) <= 1e-3
    s.zero_grad()
    f(s).backward()
    assert np.any(s["in.f0"].grad) and np.any(s["in.f2"].grad)


class TestStack:
    def test_zero_depth_identity(self, rng):
        _, blocks = _blocks(3)
        tri = _triple(rng)
        out = stacked_drb(*tri, blocks, 0)
        assert all(a is b for a, b in zip(out, tri))

    def test_zero_refresh_stack_keeps_f1(self, rng):
        _, blocks = _blocks(3)
        f0, f1, f2 = _triple(rng)
        out = stacked_drb(f0, f1, f2, blocks)
        np.testing.assert_array_equal(out[1].data, f1.data)
        assert all(o.shape == f0.shape for o in out)

    def test_chains_full_triple(self, rng):
        s, blocks = _blocks(2)
        make_checkable(s, 12)
        tri = _triple(rng)
        a = drb_forward(*tri, blocks[0])
        expected = drb_forward(*a, blocks[1])
        got = stacked_drb(*tri, blocks, 2)
        for e, g in zip(expected, got):
            np.testing.assert_array_equal(e.data, g.data)

    def test_blocks_independent(self, rng):
        s, blocks = _blocks(2)
        make_checkable(s, 13)
        tri = _triple(rng)
        before = drb_forward(*tri, blocks[1])[1].data.copy()
        s["drb1.refresh.weight"].data += 1.0
        after = drb_forward(*tri, blocks[1])[1].data
        np.testing.assert_array_equal(before, after)
        assert blocks[0].refresh.weight is not blocks[1].refresh.weight

    def test_too_deep(self, rng):
        _, blocks = _blocks(2)
        with pytest.raises(ConfigError):
            stacked_drb(*_triple(rng), blocks, 3)

    def test_finite_at_init(self, rng):
        _, blocks = _blocks(3)
        tri = tuple(Tensor4(t.data * 1e3) for t in _triple(rng))
        assert all(np.all(np.isfinite(o.data)) for o in stacked_drb(*tri, blocks))
