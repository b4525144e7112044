"""Autodiff engine tests: frozen hand oracles, adjoint identities, and
finite-difference gradient checks for every primitive."""

import numpy as np
import pytest

from conftest import gradcheck, rel_err
from dynslim import tensor as dt
from dynslim.errors import NumericsError, ShapeError
from dynslim.tensor import Tensor, backward, conv1d, conv1d_transposed, stft


def T(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestConv1d:
    def test_hand_convolution(self):
        # [1,2,3,4] * [1,1] stride 2 -> [1+2, 3+4]
        x = T([[1.0, 2.0, 3.0, 4.0]])
        w = T([[[1.0, 1.0]]])
        b = T([0.0])
        y = conv1d(x, w, b, stride=2)
        np.testing.assert_allclose(y.data, [[3.0, 7.0]])

    def test_identity_kernel(self, rng):
        x = T(rng.standard_normal((1, 9)))
        w = T([[[1.0]]])
        y = conv1d(x, w, T([0.0]), stride=1)
        np.testing.assert_allclose(y.data, x.data)

    def test_zero_input_broadcasts_bias(self):
        x = T(np.zeros((2, 10)))
        w = T(np.ones((3, 2, 4)))
        b = T([1.0, -2.0, 0.5])
        y = conv1d(x, w, b, stride=2)
        np.testing.assert_allclose(y.data, np.tile([[1.0], [-2.0], [0.5]],
                                                   (1, 4)))

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ShapeError, match="channel axis"):
            conv1d(T(np.zeros((3, 10))), T(np.zeros((4, 2, 3))), None, 1)

    def test_too_short_input(self):
        with pytest.raises(ShapeError, match="time axis"):
            conv1d(T(np.zeros((1, 2))), T(np.zeros((1, 1, 5))), None, 1)

    def test_batched_matches_loop(self, rng):
        x = rng.standard_normal((3, 2, 20))
        w = T(rng.standard_normal((4, 2, 5)))
        b = T(rng.standard_normal(4))
        y = conv1d(T(x), w, b, stride=3)
        for i in range(3):
            yi = conv1d(T(x[i]), w, b, stride=3)
            np.testing.assert_allclose(y.data[i], yi.data, atol=1e-12)


class TestConvTransposed:
    def test_hand_expansion(self):
        y = conv1d_transposed(T([[1.0]]), T([[[1.0, 2.0]]]), T([0.0]),
                              stride=2)
        np.testing.assert_allclose(y.data, [[1.0, 2.0]])

    def test_zero_input_bias_only(self):
        y = conv1d_transposed(T(np.zeros((2, 3))), T(np.zeros((2, 3, 4))),
                              T([1.0, 2.0, 3.0]), stride=2)
        np.testing.assert_allclose(y.data, np.tile([[1.], [2.], [3.]],
                                                   (1, 8)))

    def test_adjoint_identity_small(self, rng):
        # <conv(x), y> == <x, tconv_with_same_w(y)> on a 5-element case
        x = T(rng.standard_normal((1, 5)))
        w = T(rng.standard_normal((2, 1, 3)))
        y = T(rng.standard_normal((2, 2)))
        lhs = (conv1d(x, w, None, 2) * y).sum()
        # conv weight [Co,Ci,K] reused directly as tconv weight [Ci',Co',K]
        back = conv1d_transposed(y, w, None, 2)
        rhs = (x * back).sum()
        assert abs(lhs.item() - rhs.item()) < 1e-10

    def test_adjoint_identity_random_instances(self, rng):
        for _ in range(10):
            ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            k = int(rng.integers(1, 6))
            s = int(rng.integers(1, 4))
            t = int(rng.integers(k, k + 12))
            to = (t - k) // s + 1
            x = T(rng.standard_normal((ci, t)))
            w = T(rng.standard_normal((co, ci, k)))
            y = T(rng.standard_normal((co, to)))
            lhs = (conv1d(x, w, None, s) * y).sum().item()
            full = conv1d_transposed(y, w, None, s)
            # conv drops trailing samples when (t-k) % s != 0; pad the
            # adjoint back to t with zeros (those samples never touched it)
            span = full.shape[1]
            rhs = (x * full.pad_last(0, t - span)).sum().item()
            assert abs(lhs - rhs) < 1e-8


class TestStft:
    def test_zero_signal(self):
        spec = stft(T(np.zeros(512)), np.hanning(256), 128)
        assert spec.n_bins == 129
        np.testing.assert_allclose(spec.real.data, 0.0)
        np.testing.assert_allclose(spec.imag.data, 0.0)

    def test_cosine_energy_concentrates(self):
        # bin-8 cosine, rectangular window: the windowed-cosine DFT is a
        # discrete delta, so essentially all frame energy sits in bin 8
        n = 256
        t = np.arange(1024)
        x = np.cos(2 * np.pi * 8.0 / n * t)
        spec = stft(T(x), np.ones(n), n // 2)
        power = spec.real.data ** 2 + spec.imag.data ** 2
        frame = power[1]  # interior frame, no padding effects
        assert frame[8] / frame.sum() >= 0.90

    def test_single_frame_matches_naive_dft(self, rng):
        n = 32
        x = rng.standard_normal(n)
        spec = stft(T(x), np.ones(n), n)
        # naive DFT oracle
        f = np.arange(n // 2 + 1)[:, None]
        tt = np.arange(n)[None, :]
        re = (x * np.cos(-2 * np.pi * f * tt / n)).sum(axis=1)
        im = (x * np.sin(-2 * np.pi * f * tt / n)).sum(axis=1)
        np.testing.assert_allclose(spec.real.data[0], re, atol=1e-10)
        np.testing.assert_allclose(spec.imag.data[0], im, atol=1e-10)

    def test_frame_count_invariant(self):
        spec = stft(T(np.zeros(1000)), np.hanning(512), 256)
        assert spec.n_frames == 1 + (spec.padded_length - 512) // 256
        assert spec.padded_length >= 1000

    def test_rejects_bad_hop_and_empty(self):
        with pytest.raises(ShapeError):
            stft(T(np.zeros(16)), np.ones(8), 0)
        with pytest.raises(ShapeError):
            stft(T(np.zeros(0)), np.ones(8), 4)


class TestBackward:
    def test_weighted_sum_grad_is_weights(self, rng):
        x = T(rng.standard_normal(7))
        w = T(rng.standard_normal(7), rg=True)
        loss = (w * x).sum()
        backward(loss)
        np.testing.assert_allclose(w.grad, x.data)

    def test_conv_relu_sum_matches_finite_differences(self, rng):
        x = T(rng.standard_normal((1, 8)), rg=True)
        w = T(rng.standard_normal((2, 1, 3)) + 0.2, rg=True)

        def f(xx, ww):
            return conv1d(xx, ww, None, 1).relu().sum()

        worst = gradcheck(f, [x, w], eps=1e-6, tol=1e-6)
        assert worst < 1e-6

    def test_detached_branch_zero_grad(self, rng):
        w = T(rng.standard_normal(5), rg=True)
        loss = (w.detach() * 3.0).sum() + T(np.ones(5)).sum()
        backward(loss, params=[w])
        np.testing.assert_allclose(w.grad, 0.0)

    def test_unreachable_param_gets_zero(self):
        w = T([1.0, 2.0], rg=True)
        other = T([3.0], rg=True)
        backward((other * other).sum(), params=[w, other])
        np.testing.assert_allclose(w.grad, 0.0)
        np.testing.assert_allclose(other.grad, [6.0])

    def test_backward_deterministic_bits(self, rng):
        def run():
            r = np.random.default_rng(7)
            x = T(r.standard_normal((2, 30)))
            w = T(r.standard_normal((4, 2, 5)), rg=True)
            loss = (conv1d(x, w, None, 2).sigmoid()).sum()
            backward(loss)
            return w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_nonfinite_loss_raises(self):
        bad = T([np.inf])
        with pytest.raises(NumericsError):
            backward(bad.sum())

    def test_nonfinite_gradient_names_node(self):
        x = T([0.0], rg=True)
        with np.errstate(divide="ignore"):
            loss = x.log().sum()  # -inf value caught at loss check
        with pytest.raises(NumericsError):
            backward(loss)

    def test_nonscalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            backward(T([1.0, 2.0]))


class TestFiniteDiff:
    def test_quadratic(self):
        g = dt.finite_diff_grad(lambda x: (x * x).sum(), T([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_constant(self):
        g = dt.finite_diff_grad(lambda x: T([5.0]).sum(), T([1.0, 2.0]))
        np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_matches_backward_on_conv_case(self, rng):
        x = T(rng.standard_normal((1, 8)))
        w = T(rng.standard_normal((2, 1, 3)) + 0.2, rg=True)
        loss = conv1d(x, w, None, 1).relu().sum()
        backward(loss)
        numeric = dt.finite_diff_grad(
            lambda ww: conv1d(x, ww, None, 1).relu().sum(), w)
        assert rel_err(w.grad, numeric) < 1e-6


class TestPrimitiveGradients:
    """Analytic vs central finite differences for each primitive."""

    def test_elementwise_ops(self, rng):
        for name, f in [
            ("add", lambda a, b: (a + b).sum()),
            ("sub", lambda a, b: (a - b).sum()),
            ("mul", lambda a, b: (a * b).sum()),
            ("div", lambda a, b: (a / (b * b + 1.0)).sum()),
        ]:
            a = T(rng.standard_normal(6), rg=True)
            b = T(rng.standard_normal(6), rg=True)
            gradcheck(f, [a, b], tol=1e-6)

    def test_unary_ops(self, rng):
        cases = [
            (lambda a: a.sigmoid().sum(), 0.0),
            (lambda a: a.tanh().sum(), 0.0),
            (lambda a: a.exp().sum(), 0.0),
            (lambda a: (a * a + 1.0).log().sum(), 0.0),
            (lambda a: (a * a + 0.5).sqrt().sum(), 0.0),
            (lambda a: (a ** 3).sum(), 0.0),
            (lambda a: (a + 5.0).relu().sum(), 5.0),
        ]
        for f, shift in cases:
            a = T(rng.standard_normal(8) + shift, rg=True)
            gradcheck(f, [a], tol=1e-5)

    def test_reductions_and_shapes(self, rng):
        a = T(rng.standard_normal((3, 4)), rg=True)
        gradcheck(lambda t: (t.sum(axis=1) ** 2).sum(), [a], tol=1e-6)
        gradcheck(lambda t: (t.mean(axis=0) ** 2).sum(), [a], tol=1e-6)
        gradcheck(lambda t: (t.reshape(12) ** 2).sum(), [a], tol=1e-6)
        gradcheck(lambda t: (t.narrow(1, 1, 2) ** 2).sum(), [a], tol=1e-6)
        gradcheck(lambda t: (t.index_select(0, [2, 0]) ** 2).sum(), [a],
                  tol=1e-6)
        gradcheck(lambda t: (t.pad_last(2, 1) ** 2).sum(), [a], tol=1e-6)
        b = T(rng.standard_normal((2, 4)), rg=True)
        gradcheck(lambda t, u: (dt.concat([t, u], axis=0) ** 3).sum(),
                  [a, b], tol=1e-5)

    def test_clamp_min(self, rng):
        a = T(rng.standard_normal(12) * 2.0, rg=True)
        gradcheck(lambda t: (t.clamp_min(0.3) ** 2).sum(), [a], tol=1e-5)

    def test_conv_gradients(self, rng):
        x = T(rng.standard_normal((2, 11)), rg=True)
        w = T(rng.standard_normal((3, 2, 4)), rg=True)
        b = T(rng.standard_normal(3), rg=True)
        gradcheck(lambda *p: (conv1d(*p, stride=2) ** 2).sum(), [x, w, b],
                  tol=1e-6)

    def test_pointwise_conv_gradients(self, rng):
        x = T(rng.standard_normal((3, 7)), rg=True)
        w = T(rng.standard_normal((5, 3, 1)), rg=True)
        b = T(rng.standard_normal(5), rg=True)
        gradcheck(lambda *p: (conv1d(*p, stride=1) ** 2).sum(), [x, w, b],
                  tol=1e-6)

    def test_tconv_gradients(self, rng):
        x = T(rng.standard_normal((3, 5)), rg=True)
        w = T(rng.standard_normal((3, 2, 4)), rg=True)
        b = T(rng.standard_normal(2), rg=True)
        gradcheck(lambda *p: (conv1d_transposed(*p, stride=3) ** 2).sum(),
                  [x, w, b], tol=1e-6)

    def test_grouped_gru_gradients(self, rng):
        f, m, t = 4, 2, 5
        fg = f // m
        x = T(rng.standard_normal((f, t)), rg=True)
        h0 = T(rng.standard_normal(f), rg=True)
        wi = T(rng.standard_normal((m, 3 * fg, fg)), rg=True)
        wh = T(rng.standard_normal((m, 3 * fg, fg)), rg=True)
        bi = T(rng.standard_normal((m, 3 * fg)), rg=True)
        bh = T(rng.standard_normal((m, 3 * fg)), rg=True)
        gradcheck(lambda *p: (dt.grouped_gru(*p) ** 2).sum(),
                  [x, h0, wi, wh, bi, bh], tol=1e-5)

    def test_diagonal_gru_gradients(self, rng):
        f, t = 3, 6
        x = T(rng.standard_normal((f, t)), rg=True)
        h0 = T(rng.standard_normal(f), rg=True)
        wi = T(rng.standard_normal((3, f)), rg=True)
        wh = T(rng.standard_normal((3, f)), rg=True)
        bi = T(rng.standard_normal((3, f)), rg=True)
        bh = T(rng.standard_normal((3, f)), rg=True)
        gradcheck(lambda *p: (dt.diagonal_gru(*p) ** 2).sum(),
                  [x, h0, wi, wh, bi, bh], tol=1e-5)

    def test_stft_gradients(self, rng):
        x = T(rng.standard_normal(40), rg=True)
        win = np.hanning(16)

        def f(t):
            spec = stft(t, win, 8)
            return (spec.real ** 2).sum() + (spec.imag * 0.5).sum()

        gradcheck(f, [x], tol=1e-6)


class TestBroadcastRules:
    def test_bias_over_time_allowed(self, rng):
        a = T(rng.standard_normal((3, 5)), rg=True)
        b = T(rng.standard_normal((3, 1)), rg=True)
        gradcheck(lambda t, u: ((t + u) ** 2).sum(), [a, b], tol=1e-6)

    def test_scalar_allowed(self, rng):
        a = T(rng.standard_normal(4), rg=True)
        gradcheck(lambda t: ((t * 2.5 + 1.0) ** 2).sum(), [a], tol=1e-6)

    def test_incompatible_shapes_name_axis(self):
        with pytest.raises(ShapeError, match="axis"):
            T(np.zeros((3, 5))) + T(np.zeros((3, 4)))
