"""Routing subnet: per-frame utilization scores and straight-through
selection.

The subnet (conv with kernel == stride, ReLU, diagonal GRU, pointwise
conv) emits a score matrix over the available utilization factors at one
decision per `kernel` input samples. Training samples hard decisions by
adding Gumbel noise to the scores (argmax forward, softmax gradient);
inference drops the noise, so decisions are the plain argmax. Ties break
toward the lowest index, i.e. the smallest utilization factor.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .kernels.numpy_backend import sigmoid_np
from .layers import DiagonalGRU, Module, SlimConv1d
from .tensor import Tensor

GUMBEL_EPS = 1e-12


def gumbel_noise(shape, rng):
    """i.i.d. standard Gumbel samples: -log(-log(u)), u ~ U(0,1) clamped."""
    u = np.clip(rng.random(shape), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def st_select(scores, noise=None, mode="infer"):
    """One-hot selection with a straight-through softmax gradient.

    scores: Tensor [J, T*] or [B, J, T*]; noise: matching ndarray (ignored
    in infer mode). Forward output is exactly one-hot per frame; the
    gradient w.r.t. the scores is the softmax Jacobian of
    (scores + noise) applied to the upstream gradient.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be train or infer, got {mode!r}")
    axis = scores.ndim - 2
    z = scores.data
    if mode == "train":
        if noise is None:
            raise ValueError("train mode requires Gumbel noise")
        z = z + noise
    if not np.isfinite(z).all():
        raise ShapeError("st_select: non-finite scores")
    hard = np.zeros_like(z)
    winners = z.argmax(axis=axis)  # first occurrence wins ties
    np.put_along_axis(hard, np.expand_dims(winners, axis), 1.0, axis)
    soft = softmax(z, axis)

    def backward(g, needs):
        inner = (g * soft).sum(axis=axis, keepdims=True)
        return (soft * (g - inner),)

    return Tensor._result(hard, (scores,), backward, "st_select")


def decision_index_map(n_decisions, bottleneck_frames, total_samples):
    """Index map composing nearest-neighbor interpolation to the
    bottleneck frame rate with a zero-order hold to sample rate."""
    if not n_decisions <= bottleneck_frames <= total_samples:
        raise ShapeError(
            f"expected n_decisions <= bottleneck_frames <= samples, got "
            f"{n_decisions} / {bottleneck_frames} / {total_samples}")
    mid = (np.arange(bottleneck_frames) * n_decisions
           // bottleneck_frames).astype(np.intp)
    hold = (np.arange(total_samples) * bottleneck_frames
            // total_samples).astype(np.intp)
    return mid[hold]


def upsample_decisions(onehot, bottleneck_frames, total_samples):
    """Expand per-decision one-hot gates [.., J, T*] to per-sample gates
    [.., J, T]: nearest neighbor to the bottleneck rate, zero-order hold
    to the sample rate. Differentiable (gather with scatter-add adjoint).
    """
    idx = decision_index_map(onehot.shape[-1], bottleneck_frames,
                             total_samples)
    return onehot.gather_last(idx)


class Router(Module):
    """Score subnet. Input is the (padded) noisy waveform at sample rate;
    output is a [J, T*] score matrix with T* = T / kernel."""

    def __init__(self, n_choices, kernel=256, hidden=64, rng=None,
                 dtype=np.float64):
        self.n_choices = n_choices
        self.kernel = kernel
        self.hidden = hidden
        self.conv = SlimConv1d(1, hidden, kernel, kernel, rng=rng,
                               dtype=dtype)
        self.dgru = DiagonalGRU(hidden, rng=rng, dtype=dtype)
        self.pw = SlimConv1d(hidden, n_choices, 1, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        """x: Tensor [1, T] or [B, 1, T] with kernel | T -> scores."""
        t = x.shape[-1]
        if t % self.kernel != 0:
            raise ShapeError(f"router: input length {t} not divisible by "
                             f"decision kernel {self.kernel}")
        h = self.conv.forward(x).relu()
        h, _ = self.dgru.forward(h)
        return self.pw.forward(h)

    def scores_np(self, x):
        """Inference scores on a raw [1, T] array (no graph)."""
        from . import kernels
        t = x.shape[-1]
        if t % self.kernel != 0:
            raise ShapeError(f"router: input length {t} not divisible by "
                             f"decision kernel {self.kernel}")
        h = kernels.conv1d_fwd(np.ascontiguousarray(x[None]),
                               self.conv.weight.data, self.kernel)
        h += self.conv.bias.data[:, None]
        np.maximum(h, 0.0, out=h)
        h0 = np.zeros((1, self.hidden), dtype=h.dtype)
        h, _ = kernels.diag_gru_fwd(h, h0, self.dgru.w_ih.data,
                                    self.dgru.w_hh.data, self.dgru.b_ih.data,
                                    self.dgru.b_hh.data)
        y = kernels.conv1d_fwd(h, self.pw.weight.data, 1)
        return y[0] + self.pw.bias.data[:, None]


@dataclass
class RoutingTrace:
    """Per-frame routing record of one utterance.

    scores: [J, T*]; decisions: [T*] indices into uf_values; occurrence is
    the relative frequency of each utilization factor over the trace.
    """

    scores: np.ndarray
    decisions: np.ndarray
    uf_values: tuple

    def __post_init__(self):
        self.scores = np.asarray(self.scores)
        self.decisions = np.asarray(self.decisions, dtype=np.intp)
        if self.scores.shape != (len(self.uf_values),
                                 len(self.decisions)):
            raise ShapeError(
                f"trace: scores {self.scores.shape} do not match "
                f"{len(self.uf_values)} factors x {len(self.decisions)} "
                f"decisions")

    @property
    def n_frames(self):
        return len(self.decisions)

    @property
    def occurrence(self):
        counts = np.bincount(self.decisions, minlength=len(self.uf_values))
        return counts / max(1, len(self.decisions))

    @property
    def mean_utilization(self):
        return float(np.dot(self.occurrence, np.asarray(self.uf_values)))

    def uf_per_frame(self):
        return np.asarray(self.uf_values)[self.decisions]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            j = len(self.uf_values)
            writer.writerow(["frame"] + [f"score_{i + 1}" for i in range(j)]
                            + ["decision", "uf_value"])
            for t in range(self.n_frames):
                writer.writerow(
                    [t] + [f"{self.scores[i, t]:.8g}" for i in range(j)]
                    + [int(self.decisions[t]),
                       f"{self.uf_values[self.decisions[t]]:g}"])
