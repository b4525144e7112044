"""Slimmable building blocks.

A slimmable conv maps a utilization factor uf in (0, 1] to the first
ceil(C * uf) channels of a shared weight tensor, along the output axis, the
input axis, or (for the decoder pointwise conv) a paired start+middle row
selection that keeps the GLU gating half aligned with its activation half.
Slices for a smaller uf are always a prefix (or the paired two-segment
pattern) of the slices for a larger one; no weights are duplicated per uf.

Encoder block:  pad -> Conv1D (out-slimmed) -> ReLU -> PWConv1D (in-slimmed,
full output) -> GLU. Decoder block: (x + skip) -> PWConv1D (row-selected
output) -> GLU -> TranspConv1D (in-slimmed, full output) -> ReLU (omitted in
the last block). Block input/output shapes do not depend on uf.

GLU convention (frozen; checkpoints depend on it): the first half of the
channel axis is the activation, the second half is the gate.

Convolution padding is explicit: encoder blocks left-pad kernel-stride
zeros (causal) so T maps to T/stride; decoder blocks crop kernel-stride
samples from the right of the transposed conv for the same reason.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as dt
from .errors import ShapeError
from .tensor import Tensor, conv1d, conv1d_transposed


@dataclass(frozen=True)
class UtilizationSet:
    """Discrete set of available utilization factors, sorted ascending.

    The largest factor must be exactly 1 (full width) and the set needs at
    least two entries for routing to be meaningful.
    """

    values: tuple = (0.125, 0.25, 0.5, 1.0)

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 2:
            raise ValueError("utilization set needs at least 2 factors")
        if any(not 0.0 < v <= 1.0 for v in vals):
            raise ValueError(f"utilization factors must lie in (0, 1]: {vals}")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"utilization factors must be strictly "
                             f"increasing: {vals}")
        if vals[-1] != 1.0:
            raise ValueError("largest utilization factor must be 1.0")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def index_of(self, uf):
        for i, v in enumerate(self.values):
            if abs(v - uf) < 1e-9:
                return i
        raise ValueError(f"utilization factor {uf} not in set {self.values}")


def slim_count(channels, uf):
    """Active channel count at utilization uf: ceil(channels * uf)."""
    if channels < 1:
        raise ValueError(f"channel count must be positive, got {channels}")
    if not 0.0 < uf <= 1.0:
        raise ValueError(f"utilization factor must lie in (0, 1], got {uf}")
    return int(math.ceil(channels * uf - 1e-12))


def decoder_pw_rows(out_rows_full, uf):
    """Row indices for the decoder pointwise conv at utilization uf.

    ceil(out_rows_full * uf) rows, rounded up to even so both GLU halves
    stay equal; the first half comes from offset 0 (activations) and the
    second from the middle of the tensor (gates).
    """
    if out_rows_full % 2 != 0:
        raise ShapeError(f"decoder pointwise output rows must be even, got "
                         f"{out_rows_full}")
    n = slim_count(out_rows_full, uf)
    if n % 2 == 1:
        n += 1
    half = n // 2
    mid = out_rows_full // 2
    if half > mid:
        raise ShapeError(f"row selection of {half} exceeds half size {mid}")
    return np.concatenate([np.arange(half), np.arange(mid, mid + half)])


def glu(x):
    """Gated linear unit over the channel axis (second-to-last).

    First half of the channels is the activation, second half the gate.
    """
    if x.ndim < 2:
        raise ShapeError(f"glu: need a channel axis, got shape {x.shape}")
    c = x.shape[-2]
    if c % 2 != 0:
        raise ShapeError(f"glu: odd channel count {c}")
    axis = x.ndim - 2
    act = x.narrow(axis, 0, c // 2)
    gate = x.narrow(axis, c // 2, c // 2)
    return act * gate.sigmoid()


def _glu_np(x):
    c = x.shape[-2]
    half = c // 2
    from .kernels.numpy_backend import sigmoid_np
    return x[..., :half, :] * sigmoid_np(x[..., half:, :])


def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal parameter container with named traversal."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=f"{path}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(
                            prefix=f"{path}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class SlimConv1d(Module):
    """1D conv with optional prefix slimming of output or input channels.

    Weights are initialized uniformly with a bound from the fan-in of the
    full (unslimmed) tensor, so small-uf slices are neither louder nor
    quieter than the full layer.
    """

    def __init__(self, c_in, c_out, kernel, stride, slim=None, rng=None,
                 dtype=np.float64):
        if slim not in (None, "out", "in"):
            raise ValueError(f"slim must be None, 'out' or 'in': {slim}")
        rng = rng or np.random.default_rng()
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.slim = slim
        self.weight = Tensor(_uniform(rng, (c_out, c_in, kernel), bound,
                                      dtype), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out,), bound, dtype),
                           requires_grad=True)

    def active(self, uf):
        """Active channel count on the slimmed axis."""
        c = self.c_out if self.slim == "out" else self.c_in
        return slim_count(c, uf)

    def forward(self, x, uf=1.0):
        w, b = self.weight, self.bias
        if self.slim == "out":
            n = self.active(uf)
            w = w.narrow(0, 0, n)
            b = b.narrow(0, 0, n)
        elif self.slim == "in":
            n = self.active(uf)
            if x.shape[-2] != n:
                raise ShapeError(
                    f"in-slimmed conv at uf={uf} expects {n} input channels "
                    f"(axis -2), got {x.shape[-2]}")
            w = w.narrow(1, 0, n)
        return conv1d(x, w, b, self.stride)


class SlimConvTranspose1d(Module):
    """Transposed 1D conv with optional prefix slimming of input channels."""

    def __init__(self, c_in, c_out, kernel, stride, slim=None, rng=None,
                 dtype=np.float64):
        if slim not in (None, "in"):
            raise ValueError(f"slim must be None or 'in': {slim}")
        rng = rng or np.random.default_rng()
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.slim = slim
        self.weight = Tensor(_uniform(rng, (c_in, c_out, kernel), bound,
                                      dtype), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out,), bound, dtype),
                           requires_grad=True)

    def active(self, uf):
        return slim_count(self.c_in, uf)

    def forward(self, x, uf=1.0):
        w = self.weight
        if self.slim == "in":
            n = self.active(uf)
            if x.shape[-2] != n:
                raise ShapeError(
                    f"in-slimmed transposed conv at uf={uf} expects {n} "
                    f"input channels (axis -2), got {x.shape[-2]}")
            w = w.narrow(0, 0, n)
        return conv1d_transposed(x, w, self.bias, self.stride)


class DecoderPointwise(Module):
    """Pointwise conv whose output rows follow the start+middle selection."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float64):
        if c_out % 2 != 0:
            raise ShapeError(f"decoder pointwise needs even output rows, "
                             f"got {c_out}")
        rng = rng or np.random.default_rng()
        bound = 1.0 / math.sqrt(c_in)
        self.c_in = c_in
        self.c_out = c_out
        self.weight = Tensor(_uniform(rng, (c_out, c_in, 1), bound, dtype),
                             requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out,), bound, dtype),
                           requires_grad=True)

    def forward(self, x, uf=1.0):
        rows = decoder_pw_rows(self.c_out, uf)
        if len(rows) == self.c_out:
            return conv1d(x, self.weight, self.bias, 1)
        w = self.weight.index_select(0, rows)
        b = self.bias.index_select(0, rows)
        return conv1d(x, w, b, 1)


class GroupedGRU(Module):
    """M independent GRUs over equal feature blocks, outputs concatenated.

    Equivalent to one full GRU whose weight matrices are block-diagonal.
    Biases start at zero; weights are fan-in uniform per group.
    """

    def __init__(self, features, groups, rng=None, dtype=np.float64):
        if features % groups != 0:
            raise ShapeError(f"feature count {features} not divisible by "
                             f"{groups} groups")
        rng = rng or np.random.default_rng()
        fg = features // groups
        bound = 1.0 / math.sqrt(fg)
        self.features = features
        self.groups = groups
        self.w_ih = Tensor(_uniform(rng, (groups, 3 * fg, fg), bound, dtype),
                           requires_grad=True)
        self.w_hh = Tensor(_uniform(rng, (groups, 3 * fg, fg), bound, dtype),
                           requires_grad=True)
        self.b_ih = Tensor(np.zeros((groups, 3 * fg), dtype=dtype),
                           requires_grad=True)
        self.b_hh = Tensor(np.zeros((groups, 3 * fg), dtype=dtype),
                           requires_grad=True)

    def initial_state(self, x):
        shape = (x.shape[0], self.features) if x.ndim == 3 else \
            (self.features,)
        return Tensor(np.zeros(shape, dtype=x.dtype))

    def forward(self, x, h0=None):
        if h0 is None:
            h0 = self.initial_state(x)
        y = dt.grouped_gru(x, h0, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
        h_last = y.narrow(y.ndim - 1, y.shape[-1] - 1, 1)
        h_last = h_last.reshape(y.shape[:-1])
        return y, h_last

    def forward_np(self, x, h0=None):
        """Inference path on raw arrays (no autodiff graph)."""
        x3 = x[None] if x.ndim == 2 else x
        if h0 is None:
            h0 = np.zeros((x3.shape[0], self.features), dtype=x.dtype)
        y, _ = kernels.gru_fwd(x3, h0, self.w_ih.data, self.w_hh.data,
                               self.b_ih.data, self.b_hh.data)
        return y[0] if x.ndim == 2 else y


class DiagonalGRU(Module):
    """Grouped GRU taken to one feature per group: every projection is an
    elementwise product."""

    def __init__(self, features, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng()
        self.features = features
        self.w_ih = Tensor(_uniform(rng, (3, features), 1.0, dtype),
                           requires_grad=True)
        self.w_hh = Tensor(_uniform(rng, (3, features), 1.0, dtype),
                           requires_grad=True)
        self.b_ih = Tensor(np.zeros((3, features), dtype=dtype),
                           requires_grad=True)
        self.b_hh = Tensor(np.zeros((3, features), dtype=dtype),
                           requires_grad=True)

    def initial_state(self, x):
        shape = (x.shape[0], self.features) if x.ndim == 3 else \
            (self.features,)
        return Tensor(np.zeros(shape, dtype=x.dtype))

    def forward(self, x, h0=None):
        if h0 is None:
            h0 = self.initial_state(x)
        y = dt.diagonal_gru(x, h0, self.w_ih, self.w_hh, self.b_ih,
                            self.b_hh)
        h_last = y.narrow(y.ndim - 1, y.shape[-1] - 1, 1)
        h_last = h_last.reshape(y.shape[:-1])
        return y, h_last


class EncoderBlock(Module):
    """Slimmable encoder block; [C, T] -> [c_hidden, T/stride]."""

    def __init__(self, c_in, c_hidden, kernel, stride, rng=None,
                 dtype=np.float64):
        self.c_in = c_in
        self.c_hidden = c_hidden
        self.kernel = kernel
        self.stride = stride
        self.conv = SlimConv1d(c_in, c_hidden, kernel, stride, slim="out",
                               rng=rng, dtype=dtype)
        self.pw = SlimConv1d(c_hidden, 2 * c_hidden, 1, 1, slim="in",
                             rng=rng, dtype=dtype)

    def _check_time(self, t):
        if t % self.stride != 0:
            raise ShapeError(f"encoder block: time axis {t} not divisible "
                             f"by stride {self.stride}")

    def forward(self, x, uf=1.0):
        self._check_time(x.shape[-1])
        xp = x.pad_last(self.kernel - self.stride, 0)
        h = self.conv.forward(xp, uf).relu()
        h = self.pw.forward(h, uf)
        return glu(h)

    def forward_switched(self, x, uf_frames, uset):
        """Per-frame utilization switching on raw arrays.

        x: [C, T] ndarray; uf_frames: int indices into uset, one per output
        frame (length T/stride). Frames with the same uf are processed in
        contiguous runs with exactly that uf's weight slices.
        """
        self._check_time(x.shape[-1])
        t_out = x.shape[-1] // self.stride
        if len(uf_frames) != t_out:
            raise ShapeError(f"switched encoder: {len(uf_frames)} frame "
                             f"decisions for {t_out} output frames")
        xp = np.pad(x[None], ((0, 0), (0, 0),
                              (self.kernel - self.stride, 0)))
        w1, b1 = self.conv.weight.data, self.conv.bias.data
        w2, b2 = self.pw.weight.data, self.pw.bias.data
        hidden = np.zeros((1, self.c_hidden, t_out), dtype=x.dtype)
        out = np.empty((1, 2 * self.c_hidden, t_out), dtype=x.dtype)
        for start, stop, j in _runs(uf_frames):
            n = slim_count(self.c_hidden, uset.values[j])
            seg = np.ascontiguousarray(
                xp[:, :, start * self.stride:
                   (stop - 1) * self.stride + self.kernel])
            y = kernels.conv1d_fwd(seg, np.ascontiguousarray(w1[:n]),
                                   self.stride) + b1[:n, None]
            hidden[:, :n, start:stop] = np.maximum(y, 0.0)
            out[:, :, start:stop] = kernels.conv1d_fwd(
                np.ascontiguousarray(hidden[:, :n, start:stop]),
                np.ascontiguousarray(w2[:, :n]), 1) + b2[:, None]
        return _glu_np(out)[0]


class DecoderBlock(Module):
    """Slimmable decoder block; ([c_hidden,T], skip) -> [c_out, T*stride]."""

    def __init__(self, c_hidden, c_out, kernel, stride, last=False, rng=None,
                 dtype=np.float64):
        self.c_hidden = c_hidden
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.last = last
        self.pw = DecoderPointwise(c_hidden, 2 * c_hidden, rng=rng,
                                   dtype=dtype)
        self.tconv = SlimConvTranspose1d(c_hidden, c_out, kernel, stride,
                                         slim="in", rng=rng, dtype=dtype)

    def forward(self, x, skip, uf=1.0):
        if x.shape != skip.shape:
            raise ShapeError(f"decoder block: skip shape {skip.shape} does "
                             f"not match input {x.shape}")
        h = x + skip
        h = self.pw.forward(h, uf)
        h = glu(h)
        y = self.tconv.forward(h, uf)
        crop = self.kernel - self.stride
        if crop:
            y = y.narrow(y.ndim - 1, 0, y.shape[-1] - crop)
        return y if self.last else y.relu()

    def forward_switched(self, x, skip, uf_frames, uset):
        """Per-frame switched decoder on raw arrays. x, skip: [C, T]."""
        if x.shape != skip.shape:
            raise ShapeError(f"decoder block: skip shape {skip.shape} does "
                             f"not match input {x.shape}")
        t_in = x.shape[-1]
        if len(uf_frames) != t_in:
            raise ShapeError(f"switched decoder: {len(uf_frames)} frame "
                             f"decisions for {t_in} input frames")
        h = (x + skip)[None]
        w_pw, b_pw = self.pw.weight.data, self.pw.bias.data
        w_t = self.tconv.weight.data
        raw_len = (t_in - 1) * self.stride + self.kernel
        raw = np.zeros((1, self.c_out, raw_len), dtype=x.dtype)
        for start, stop, j in _runs(uf_frames):
            rows = decoder_pw_rows(2 * self.c_hidden, uset.values[j])
            seg = np.ascontiguousarray(h[:, :, start:stop])
            g = kernels.conv1d_fwd(seg, np.ascontiguousarray(w_pw[rows]),
                                   1) + b_pw[rows, None]
            g = _glu_np(g)
            n = g.shape[1]
            contrib = kernels.tconv1d_fwd(np.ascontiguousarray(g),
                                          np.ascontiguousarray(w_t[:n]),
                                          self.stride)
            raw[:, :, start * self.stride:
                (stop - 1) * self.stride + self.kernel] += contrib
        raw += self.tconv.bias.data[:, None]
        y = raw[:, :, :t_in * self.stride]
        return y[0] if self.last else np.maximum(y[0], 0.0)


def _runs(indices):
    """Yield (start, stop, value) for maximal constant runs of an int array."""
    indices = np.asarray(indices)
    if len(indices) == 0:
        return
    boundaries = np.flatnonzero(np.diff(indices)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [len(indices)]])
    for a, b in zip(starts, stops):
        yield int(a), int(b), int(indices[a])
