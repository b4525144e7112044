"""Backend parity: the compiled kernels must reproduce the NumPy reference
bit-for-bit where the arithmetic order matches, and to tight tolerance
elsewhere."""

import numpy as np
import pytest

from dynslim.kernels import numpy_backend as npk

try:
    from dynslim.kernels import cython_backend as ck
    HAVE_C = True
except ImportError:  # pure-python install
    HAVE_C = False

needs_c = pytest.mark.skipif(not HAVE_C, reason="compiled kernels not built")


def _conv_case(rng, dtype):
    x = rng.standard_normal((2, 3, 41)).astype(dtype)
    w = rng.standard_normal((5, 3, 7)).astype(dtype)
    return x, w


@needs_c
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
@pytest.mark.parametrize("stride", [1, 2, 4])
class TestConvParity:
    def test_forward(self, dtype, stride, rng):
        x, w = _conv_case(rng, dtype)
        a = npk.conv1d_fwd(x, w, stride)
        b = ck.conv1d_fwd(x, w, stride)
        tol = 0 if dtype == np.float64 else 1e-5
        np.testing.assert_allclose(a, b, atol=tol)

    def test_backward_x(self, dtype, stride, rng):
        x, w = _conv_case(rng, dtype)
        t_out = (41 - 7) // stride + 1
        gy = rng.standard_normal((2, 5, t_out)).astype(dtype)
        a = npk.conv1d_bwd_x(gy, w, stride, 41)
        b = ck.conv1d_bwd_x(gy, w, stride, 41)
        np.testing.assert_allclose(a, b, atol=1e-5 if dtype == np.float32
                                   else 1e-12)

    def test_backward_w(self, dtype, stride, rng):
        x, w = _conv_case(rng, dtype)
        t_out = (41 - 7) // stride + 1
        gy = rng.standard_normal((2, 5, t_out)).astype(dtype)
        a = npk.conv1d_bwd_w(x, gy, stride, 7)
        b = ck.conv1d_bwd_w(x, gy, stride, 7)
        np.testing.assert_allclose(a, b, atol=1e-4 if dtype == np.float32
                                   else 1e-12)


def _gru_case(rng, dtype, b=2, f=8, t=11, m=2):
    fg = f // m
    return (rng.standard_normal((b, f, t)).astype(dtype),
            rng.standard_normal((b, f)).astype(dtype),
            rng.standard_normal((m, 3 * fg, fg)).astype(dtype),
            rng.standard_normal((m, 3 * fg, fg)).astype(dtype),
            rng.standard_normal((m, 3 * fg)).astype(dtype),
            rng.standard_normal((m, 3 * fg)).astype(dtype))


@needs_c
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
class TestGruParity:
    def test_grouped(self, dtype, rng):
        args = _gru_case(rng, dtype)
        y1, c1 = npk.gru_fwd(*args)
        y2, c2 = ck.gru_fwd(*args)
        tol = 1e-12 if dtype == np.float64 else 1e-5
        np.testing.assert_allclose(y1, y2, atol=tol)
        gy = np.random.default_rng(0).standard_normal(y1.shape).astype(dtype)
        for a, b in zip(npk.gru_bwd(gy, c1), ck.gru_bwd(gy, c2)):
            np.testing.assert_allclose(a, b, atol=tol * 100)

    def test_diagonal(self, dtype, rng):
        b, f, t = 2, 6, 9
        args = (rng.standard_normal((b, f, t)).astype(dtype),
                rng.standard_normal((b, f)).astype(dtype),
                rng.standard_normal((3, f)).astype(dtype),
                rng.standard_normal((3, f)).astype(dtype),
                rng.standard_normal((3, f)).astype(dtype),
                rng.standard_normal((3, f)).astype(dtype))
        y1, c1 = npk.diag_gru_fwd(*args)
        y2, c2 = ck.diag_gru_fwd(*args)
        tol = 1e-12 if dtype == np.float64 else 1e-5
        np.testing.assert_allclose(y1, y2, atol=tol)
        gy = np.random.default_rng(0).standard_normal(y1.shape).astype(dtype)
        for a, b in zip(npk.diag_gru_bwd(gy, c1), ck.diag_gru_bwd(gy, c2)):
            np.testing.assert_allclose(a, b, atol=tol * 100)


class TestNumpyKernelInternals:
    def test_conv_against_direct_loops(self, rng):
        x = rng.standard_normal((1, 2, 12))
        w = rng.standard_normal((3, 2, 4))
        y = npk.conv1d_fwd(x, w, 2)
        t_out = (12 - 4) // 2 + 1
        ref = np.zeros((1, 3, t_out))
        for o in range(3):
            for t in range(t_out):
                for i in range(2):
                    for k in range(4):
                        ref[0, o, t] += w[o, i, k] * x[0, i, t * 2 + k]
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_gru_single_group_single_feature_scalar_recurrence(self, rng):
        # hand-stepped scalar GRU oracle
        x = rng.standard_normal((1, 1, 3))
        h0 = np.zeros((1, 1))
        wi = rng.standard_normal((1, 3, 1))
        wh = rng.standard_normal((1, 3, 1))
        bi = rng.standard_normal((1, 3))
        bh = rng.standard_normal((1, 3))
        y, _ = npk.gru_fwd(x, h0, wi, wh, bi, bh)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        h = 0.0
        for t in range(3):
            xt = x[0, 0, t]
            r = sig(wi[0, 0, 0] * xt + bi[0, 0] + wh[0, 0, 0] * h + bh[0, 0])
            z = sig(wi[0, 1, 0] * xt + bi[0, 1] + wh[0, 1, 0] * h + bh[0, 1])
            n = np.tanh(wi[0, 2, 0] * xt + bi[0, 2]
                        + r * (wh[0, 2, 0] * h + bh[0, 2]))
            h = (1 - z) * n + z * h
            assert abs(y[0, 0, t] - h) < 1e-12
