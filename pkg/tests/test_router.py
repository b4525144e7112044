"""Router tests: Gumbel sampling oracles, straight-through gradients,
decision resampling, and the trace format."""

import csv

import numpy as np
import pytest

from conftest import rel_err
from dynslim.errors import ShapeError
from dynslim.router import (Router, RoutingTrace, decision_index_map,
                            gumbel_noise, softmax, st_select,
                            upsample_decisions)
from dynslim.tensor import Tensor, backward, finite_diff_grad


class FixedUniform:
    """rng stub returning a preset uniform draw."""

    def __init__(self, value):
        self.value = value

    def random(self, shape):
        return np.full(shape, self.value)


class TestGumbelNoise:
    def test_exp_minus_one_maps_to_zero(self):
        g = gumbel_noise((3,), FixedUniform(np.exp(-1.0)))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_exp_minus_e_maps_to_minus_one(self):
        g = gumbel_noise((2, 2), FixedUniform(np.exp(-np.e)))
        np.testing.assert_allclose(g, -1.0, atol=1e-12)

    def test_empirical_median_matches_gumbel_median(self):
        rng = np.random.default_rng(5)
        draws = gumbel_noise((100_000,), rng)
        expected = -np.log(np.log(2.0))
        assert abs(np.median(draws) - expected) < 0.01

    def test_extreme_uniforms_stay_finite(self):
        assert np.isfinite(gumbel_noise((4,), FixedUniform(0.0))).all()
        assert np.isfinite(gumbel_noise((4,), FixedUniform(1.0))).all()


class TestStSelect:
    def test_infer_argmax(self):
        r = Tensor(np.array([[2.0], [1.0], [0.0], [-1.0]]))
        y = st_select(r, mode="infer")
        np.testing.assert_array_equal(y.data[:, 0], [1, 0, 0, 0])

    def test_tie_breaks_to_lowest_index(self):
        r = Tensor(np.array([[1.0], [1.0], [0.0], [0.0]]))
        y = st_select(r, mode="infer")
        np.testing.assert_array_equal(y.data[:, 0], [1, 0, 0, 0])

    def test_forward_is_one_hot_per_frame(self, rng):
        r = Tensor(rng.standard_normal((4, 50)))
        g = gumbel_noise((4, 50), rng)
        y = st_select(r, g, mode="train")
        np.testing.assert_array_equal(y.data.sum(axis=0), np.ones(50))
        assert set(np.unique(y.data)) <= {0.0, 1.0}

    def test_gradient_matches_softmax_relaxation(self, rng):
        """d(sum(softmax(r) * v))/dr via finite differences equals the
        straight-through backward, while the forward stays one-hot."""
        r = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        v = rng.standard_normal((4, 3))
        out = st_select(r, mode="infer")
        assert set(np.unique(out.data)) <= {0.0, 1.0}
        loss = (out * v).sum()
        backward(loss)

        def relaxed(rr):
            p = softmax(rr.data, axis=0)
            return Tensor(np.array((p * v).sum()))

        numeric = finite_diff_grad(relaxed, r, eps=1e-6)
        assert rel_err(r.grad, numeric) < 1e-6

    def test_train_mode_requires_noise(self, rng):
        with pytest.raises(ValueError):
            st_select(Tensor(np.zeros((2, 2))), None, mode="train")

    def test_sampling_frequencies_match_softmax(self, rng):
        """Monte-Carlo: selection frequencies over Gumbel draws follow
        softmax(r) within 1% absolute at 1e5 draws."""
        scores = np.array([1.0, 0.3, -0.5, 0.0])
        n = 100_000
        r = Tensor(np.tile(scores[:, None], (1, n)))
        g = gumbel_noise((4, n), np.random.default_rng(17))
        y = st_select(r, g, mode="train")
        freq = y.data.mean(axis=1)
        np.testing.assert_allclose(freq, softmax(scores, axis=0), atol=0.01)


class TestUpsampleDecisions:
    def test_zero_order_hold_example(self):
        onehot = np.zeros((4, 2))
        onehot[1, 0] = 1.0
        onehot[3, 1] = 1.0
        gating = upsample_decisions(Tensor(onehot), 4, 8)
        picked = gating.data.argmax(axis=0)
        np.testing.assert_array_equal(picked, [1, 1, 1, 1, 3, 3, 3, 3])

    def test_identity_when_rates_match(self, rng):
        onehot = np.eye(3)[rng.integers(0, 3, size=6)].T
        gating = upsample_decisions(Tensor(onehot), 6, 6)
        np.testing.assert_array_equal(gating.data, onehot)

    def test_constant_decision_constant_gating(self):
        onehot = np.zeros((2, 3))
        onehot[0] = 1.0
        gating = upsample_decisions(Tensor(onehot), 6, 24)
        np.testing.assert_array_equal(gating.data[0], np.ones(24))

    def test_every_sample_gated_once(self, rng):
        onehot = np.eye(4)[rng.integers(0, 4, size=5)].T
        gating = upsample_decisions(Tensor(onehot), 20, 100)
        np.testing.assert_array_equal(gating.data.sum(axis=0), np.ones(100))

    def test_rate_ordering_enforced(self):
        with pytest.raises(ShapeError):
            decision_index_map(10, 5, 100)

    def test_gradient_accumulates_over_held_samples(self, rng):
        onehot = Tensor(np.eye(2)[[0, 1]].T, requires_grad=True)
        gating = upsample_decisions(onehot, 4, 8)
        backward((gating * rng.standard_normal((2, 8))).sum())
        assert onehot.grad.shape == (2, 2)


class TestRouterSubnet:
    def _router(self, seed=0):
        return Router(4, kernel=256, hidden=16,
                      rng=np.random.default_rng(seed))

    def test_score_shape(self, rng):
        router = self._router()
        x = Tensor(rng.standard_normal((1, 1024)))
        scores = router.forward(x)
        assert scores.shape == (4, 4)

    def test_paper_default_shape(self, rng):
        router = Router(4, kernel=256, hidden=64,
                        rng=np.random.default_rng(1))
        scores = router.forward(Tensor(rng.standard_normal((1, 1024))))
        assert scores.shape == (4, 4)

    def test_zero_input_constant_scores_without_biases(self):
        router = self._router()
        for name, p in router.named_parameters():
            if "bias" in name or name.startswith("dgru.b"):
                p.data[...] = 0.0
        scores = router.forward(Tensor(np.zeros((1, 2048))))
        spread = np.abs(scores.data - scores.data[:, :1]).max()
        assert spread < 1e-12

    def test_indivisible_length_rejected(self):
        with pytest.raises(ShapeError):
            self._router().forward(Tensor(np.zeros((1, 1000))))

    def test_inference_deterministic(self, rng):
        router = self._router()
        x = np.ascontiguousarray(rng.standard_normal((1, 2048)))
        s1 = router.scores_np(x)
        s2 = router.scores_np(x)
        assert np.array_equal(s1, s2)

    def test_scores_np_matches_forward(self, rng):
        router = self._router()
        x = np.ascontiguousarray(rng.standard_normal((1, 1024)))
        s1 = router.scores_np(x)
        s2 = router.forward(Tensor(x)).data
        np.testing.assert_allclose(s1, s2, atol=1e-12)

    def test_causal_scores(self, rng):
        """Perturbing samples inside frame k leaves frames < k unchanged."""
        router = self._router()
        x = np.ascontiguousarray(rng.standard_normal((1, 2048)))
        x2 = x.copy()
        x2[0, 1024:] += 5.0
        s1 = router.scores_np(x)
        s2 = router.scores_np(np.ascontiguousarray(x2))
        np.testing.assert_allclose(s1[:, :4], s2[:, :4], atol=1e-12)


class TestRoutingTrace:
    def test_occurrence_and_mean_utilization(self):
        trace = RoutingTrace(np.zeros((4, 8)),
                             [0, 0, 1, 1, 2, 2, 3, 3],
                             (0.125, 0.25, 0.5, 1.0))
        np.testing.assert_allclose(trace.occurrence, 0.25)
        assert abs(trace.mean_utilization - 0.46875) < 1e-12

    def test_csv_format(self, tmp_path, rng):
        scores = rng.standard_normal((4, 5))
        trace = RoutingTrace(scores, scores.argmax(axis=0),
                             (0.125, 0.25, 0.5, 1.0))
        path = tmp_path / "trace.csv"
        trace.write_csv(str(path))
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["frame", "score_1", "score_2", "score_3",
                           "score_4", "decision", "uf_value"]
        assert len(rows) == 6
        assert int(rows[1][5]) == int(scores.argmax(axis=0)[0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            RoutingTrace(np.zeros((4, 3)), [0, 1], (0.125, 0.25, 0.5, 1.0))
