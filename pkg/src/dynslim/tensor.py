"""Dense-tensor engine with reverse-mode automatic differentiation.

Covers exactly the primitives the model needs: elementwise arithmetic and
activations, reductions, slicing/concat/padding, strided and transposed 1D
convolution, grouped/diagonal GRU sequences, and an STFT that
differentiates through its real and imaginary parts.

Storage is dense row-major (C-contiguous numpy arrays). Tests and oracles
run in float64; float32 is supported for training speed. Tensors are
treated as immutable after construction except for in-place parameter
updates between steps (optimizer), which must not happen while a graph
referencing them is alive.

Broadcasting is restricted: binary ops accept equal shapes, scalars, or a
size-1-axis operand (bias-over-time style); anything else raises
ShapeError naming the axis.

Backward closures receive (grad, needs) where needs flags which parents
require a gradient; expensive kernels (convs, GRUs, STFT) skip the unused
directions. The sweep prunes subgraphs that contain no differentiable
leaves, so constant branches (e.g. the input resampling filter) cost
nothing on the way back.
"""

import math
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import NumericsError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the context (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- construction of graph nodes ------------------------------------

    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = op
        if _GRAD_ENABLED and any(p.requires_grad or p._parents
                                 for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape "
                             f"{self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"op={self._op}, requires_grad={self.requires_grad})")

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    # -- binary elementwise ops --------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        arr = np.asarray(other, dtype=self.data.dtype)
        return Tensor(arr)

    @staticmethod
    def _check_broadcast(a, b, op):
        if a.shape == b.shape:
            return
        if a.size == 1 or b.size == 1:
            return
        sa, sb = a.shape, b.shape
        la, lb = len(sa), len(sb)
        for i in range(1, max(la, lb) + 1):
            da = sa[-i] if i <= la else 1
            db = sb[-i] if i <= lb else 1
            if da != db and da != 1 and db != 1:
                raise ShapeError(
                    f"{op}: shapes {sa} and {sb} differ on axis {-i} "
                    f"({da} vs {db}) and neither is 1")

    @staticmethod
    def _unbroadcast(grad, shape):
        if grad.shape == shape:
            return grad
        extra = grad.ndim - len(shape)
        if extra > 0:
            grad = grad.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, d in enumerate(shape) if d == 1
                     and grad.shape[i] != 1)
        if axes:
            grad = grad.sum(axis=axes, keepdims=True)
        return grad.reshape(shape)

    def _binary(self, other, op, fwd, bwd_a, bwd_b):
        other = self._coerce(other)
        Tensor._check_broadcast(self, other, op)
        data = fwd(self.data, other.data)

        def backward(g, needs):
            ga = Tensor._unbroadcast(bwd_a(g, self.data, other.data),
                                     self.shape) if needs[0] else None
            gb = Tensor._unbroadcast(bwd_b(g, self.data, other.data),
                                     other.shape) if needs[1] else None
            return ga, gb

        return Tensor._result(data, (self, other), backward, op)

    def __add__(self, other):
        return self._binary(other, "add", lambda a, b: a + b,
                            lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, "sub", lambda a, b: a - b,
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, "mul", lambda a, b: a * b,
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, "div", lambda a, b: a / b,
                            lambda g, a, b: g / b,
                            lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return Tensor._result(-self.data, (self,),
                              lambda g, needs: (-g,), "neg")

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        e = float(exponent)
        data = self.data ** e

        def backward(g, needs):
            return (g * e * self.data ** (e - 1.0),)

        return Tensor._result(data, (self,), backward, "pow")

    # -- unary ops -----------------------------------------------------------

    def relu(self):
        mask = self.data > 0
        return Tensor._result(np.where(mask, self.data, 0.0), (self,),
                              lambda g, needs: (g * mask,), "relu")

    def sigmoid(self):
        from .kernels.numpy_backend import sigmoid_np
        out = sigmoid_np(self.data)
        return Tensor._result(out, (self,),
                              lambda g, needs: (g * out * (1.0 - out),),
                              "sigmoid")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._result(out, (self,),
                              lambda g, needs: (g * (1.0 - out * out),),
                              "tanh")

    def exp(self):
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g, needs: (g * out,),
                              "exp")

    def log(self):
        return Tensor._result(np.log(self.data), (self,),
                              lambda g, needs: (g / self.data,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,),
                              lambda g, needs: (g / (2.0 * out),), "sqrt")

    def clamp_min(self, floor):
        """max(x, floor); subgradient 0 on the clamped region."""
        mask = self.data > floor
        out = np.where(mask, self.data, floor)
        return Tensor._result(out, (self,), lambda g, needs: (g * mask,),
                              "clamp_min")

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None):
        data = self.data.sum(axis=axis)
        shape = self.shape

        def backward(g, needs):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(self.data.dtype),)
            gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return Tensor._result(np.asarray(data), (self,), backward, "sum")

    def mean(self, axis=None):
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        data = self.data.reshape(shape)
        return Tensor._result(data, (self,),
                              lambda g, needs: (g.reshape(orig),), "reshape")

    def narrow(self, axis, start, length):
        """Contiguous slice [start, start+length) along axis."""
        if not (0 <= start and start + length <= self.shape[axis]):
            raise ShapeError(
                f"narrow: [{start}, {start + length}) out of range for axis "
                f"{axis} of size {self.shape[axis]}")
        index = [slice(None)] * self.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        data = np.ascontiguousarray(self.data[index])
        shape = self.shape

        def backward(g, needs):
            gx = np.zeros(shape, dtype=g.dtype)
            gx[index] = g
            return (gx,)

        return Tensor._result(data, (self,), backward, "narrow")

    def index_select(self, axis, indices):
        """Gather along axis. Indices must be unique."""
        idx = np.asarray(indices, dtype=np.intp)
        data = np.ascontiguousarray(np.take(self.data, idx, axis=axis))
        shape = self.shape

        def backward(g, needs):
            gx = np.zeros(shape, dtype=g.dtype)
            sl = [slice(None)] * len(shape)
            sl[axis] = idx
            gx[tuple(sl)] = g  # unique indices: plain scatter is exact
            return (gx,)

        return Tensor._result(data, (self,), backward, "index_select")

    def gather_last(self, indices):
        """y[..., t] = x[..., idx[t]]; indices may repeat (zero-order
        hold); the backward pass scatter-adds."""
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError("gather_last: indices must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= self.shape[-1]):
            raise ShapeError(f"gather_last: index out of range for last "
                             f"axis of size {self.shape[-1]}")
        data = np.ascontiguousarray(self.data[..., idx])
        shape = self.shape

        def backward(g, needs):
            gx = np.zeros(shape, dtype=g.dtype)
            lead = int(np.prod(shape[:-1], dtype=np.int64)) \
                if len(shape) > 1 else 1
            gxf = gx.reshape(lead, shape[-1])
            gf = g.reshape(lead, idx.size)
            np.add.at(gxf, (np.arange(lead)[:, None], idx[None, :]), gf)
            return (gx,)

        return Tensor._result(data, (self,), backward, "gather_last")

    def pad_last(self, left, right):
        """Zero-pad the last axis; the explicit-padding companion of conv."""
        if left < 0 or right < 0:
            raise ShapeError("pad_last: negative padding")
        width = [(0, 0)] * (self.ndim - 1) + [(left, right)]
        data = np.pad(self.data, width)
        t = self.shape[-1]

        def backward(g, needs):
            return (np.ascontiguousarray(g[..., left:left + t]),)

        return Tensor._result(data, (self,), backward, "pad_last")


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, needs):
        grads = []
        sl = [slice(None)] * g.ndim
        for i in range(len(sizes)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(grads)

    return Tensor._result(data, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# convolution primitives (kernel-backed)
# ---------------------------------------------------------------------------

def _batched(x, op):
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"{op}: expected [C,T] or [B,C,T], got {x.shape}")


def conv1d(x, w, b, stride):
    """Strided valid cross-correlation, no implicit padding.

    x: [C_in,T] or [B,C_in,T]; w: [C_out,C_in,K]; b: [C_out] or None.
    Output time length is (T - K)//stride + 1.
    """
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    x3, squeeze = _batched(x, "conv1d")
    c_out, c_in, kernel = w.shape
    if x3.shape[1] != c_in:
        raise ShapeError(f"conv1d: channel axis mismatch: input has "
                         f"{x3.shape[1]} channels (axis -2), weight expects "
                         f"{c_in}")
    t_in = x3.shape[2]
    if t_in < kernel:
        raise ShapeError(f"conv1d: time axis too short: {t_in} < kernel "
                         f"{kernel}")
    y = kernels.conv1d_fwd(x3.data, w.data, stride)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias axis mismatch: {b.shape} vs "
                             f"({c_out},)")
        y = y + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g, needs):
        g = np.ascontiguousarray(g if not squeeze else g[None])
        gx = gw = gb = None
        if needs[0]:
            gx = kernels.conv1d_bwd_x(g, w.data, stride, t_in)
            if squeeze:
                gx = gx[0]
        if needs[1]:
            gw = kernels.conv1d_bwd_w(x3.data, g, stride, kernel)
        if b is None:
            return gx, gw
        if needs[2]:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    if squeeze:
        y = y[0]
    return Tensor._result(y, parents, backward, "conv1d")


def conv1d_transposed(x, w, b, stride):
    """Adjoint of conv1d (bias aside). w: [C_in,C_out,K].

    Output time length is (T-1)*stride + K.
    """
    if stride < 1:
        raise ShapeError(f"conv1d_transposed: stride must be >= 1, got "
                         f"{stride}")
    x3, squeeze = _batched(x, "conv1d_transposed")
    c_in, c_out, kernel = w.shape
    if x3.shape[1] != c_in:
        raise ShapeError(f"conv1d_transposed: channel axis mismatch: input "
                         f"has {x3.shape[1]} channels (axis -2), weight "
                         f"expects {c_in}")
    t_in = x3.shape[2]
    y = kernels.tconv1d_fwd(x3.data, w.data, stride)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d_transposed: bias axis mismatch: "
                             f"{b.shape} vs ({c_out},)")
        y = y + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g, needs):
        g = np.ascontiguousarray(g if not squeeze else g[None])
        gx = gw = gb = None
        if needs[0]:
            gx = kernels.tconv1d_bwd_x(g, w.data, stride)
            if squeeze:
                gx = gx[0]
        if needs[1]:
            gw = kernels.tconv1d_bwd_w(x3.data, g, stride, kernel)
        if b is None:
            return gx, gw
        if needs[2]:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    if squeeze:
        y = y[0]
    return Tensor._result(y, parents, backward, "conv1d_transposed")


# ---------------------------------------------------------------------------
# recurrent primitives (kernel-backed, one graph node per sequence)
# ---------------------------------------------------------------------------

def _gru_common(x, h0, w_ih, w_hh, b_ih, b_hh, fwd, bwd, op):
    x3, squeeze = _batched(x, op)
    h0d = h0.data.reshape(x3.shape[0], x3.shape[1])
    y, cache = fwd(x3.data, h0d, w_ih.data, w_hh.data, b_ih.data, b_hh.data)

    def backward(g, needs):
        g = np.ascontiguousarray(g if not squeeze else g[None])
        gx, gh0, gw_ih, gw_hh, gb_ih, gb_hh = bwd(g, cache)
        if squeeze:
            gx, gh0 = gx[0], gh0[0]
        return (gx if needs[0] else None,
                gh0.reshape(h0.shape) if needs[1] else None,
                gw_ih, gw_hh, gb_ih, gb_hh)

    if squeeze:
        y = y[0]
    return Tensor._result(y, (x, h0, w_ih, w_hh, b_ih, b_hh), backward, op)


def grouped_gru(x, h0, w_ih, w_hh, b_ih, b_hh):
    """Grouped GRU over the whole sequence.

    x: [F,T] or [B,F,T]; h0: matching [F] or [B,F]; weights [M,3Fg,Fg],
    biases [M,3Fg]. Returns the hidden-state sequence, same layout as x.
    """
    m, g3, fg = w_ih.shape
    f = x.shape[-2]
    if m * fg != f:
        raise ShapeError(f"grouped_gru: feature axis {f} does not match "
                         f"M={m} groups of size {fg}")
    return _gru_common(x, h0, w_ih, w_hh, b_ih, b_hh, kernels.gru_fwd,
                       kernels.gru_bwd, "grouped_gru")


def diagonal_gru(x, h0, w_ih, w_hh, b_ih, b_hh):
    """Per-feature scalar GRU; all projections elementwise.

    x: [F,T] or [B,F,T]; weights/biases [3,F].
    """
    f = x.shape[-2]
    if w_ih.shape != (3, f):
        raise ShapeError(f"diagonal_gru: weight shape {w_ih.shape} does not "
                         f"match feature axis {f}")
    return _gru_common(x, h0, w_ih, w_hh, b_ih, b_hh, kernels.diag_gru_fwd,
                       kernels.diag_gru_bwd, "diagonal_gru")


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

class ComplexSpectrogram:
    """STFT output: real/imag tensors of shape [..., n_frames, n_bins].

    n_bins == n_fft//2 + 1 and n_frames == 1 + (padded_length - win)//hop.
    """

    def __init__(self, real, imag, n_fft, hop, n_frames, n_bins,
                 padded_length):
        self.real = real
        self.imag = imag
        self.n_fft = n_fft
        self.hop = hop
        self.n_frames = n_frames
        self.n_bins = n_bins
        self.padded_length = padded_length


def stft(x, window, hop):
    """Short-time Fourier transform, differentiable through real/imag.

    x: [T] or [B,T]; window: 1-D array or Tensor (treated as constant);
    hop > 0 and hop <= len(window). The signal is zero-padded on the right
    so that frames cover every sample; n_fft equals the window length.
    """
    win = window.data if isinstance(window, Tensor) else np.asarray(window)
    n_fft = win.shape[0]
    if hop <= 0:
        raise ShapeError(f"stft: hop must be positive, got {hop}")
    if hop > n_fft:
        raise ShapeError(f"stft: hop {hop} exceeds window length {n_fft}")
    if x.size == 0:
        raise ShapeError("stft: empty signal")
    t = x.shape[-1]
    n_frames = max(1, -(-(t - n_fft) // hop) + 1)
    t_pad = (n_frames - 1) * hop + n_fft
    xp = x.pad_last(0, t_pad - t)
    win = win.astype(xp.dtype)

    def frame(arr):
        shape = arr.shape[:-1] + (n_frames, n_fft)
        strides = arr.strides[:-1] + (arr.strides[-1] * hop,
                                      arr.strides[-1])
        return np.lib.stride_tricks.as_strided(arr, shape, strides)

    frames = frame(xp.data) * win
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    data = np.stack([spec.real, spec.imag], axis=-3).astype(xp.dtype)
    n_bins = n_fft // 2 + 1

    def backward(g, needs):
        gc = np.ascontiguousarray(g[..., 0, :, :]) + \
            1j * np.ascontiguousarray(g[..., 1, :, :])
        # the imaginary parts of DC (and Nyquist, for even n_fft) are
        # identically zero in the forward map; drop their cotangents
        gc[..., 0] = gc[..., 0].real
        if n_fft % 2 == 0:
            gc[..., -1] = gc[..., -1].real
        acc = n_fft * np.fft.irfft(gc, n=n_fft, axis=-1)
        acc += gc[..., 0:1].real
        if n_fft % 2 == 0:
            alt = np.where(np.arange(n_fft) % 2 == 0, 1.0, -1.0)
            acc += gc[..., -1:].real * alt
        gframes = (acc * 0.5).astype(xp.dtype) * win
        gx = np.zeros(xp.shape, dtype=xp.dtype)
        for l in range(n_frames):
            gx[..., l * hop:l * hop + n_fft] += gframes[..., l, :]
        return (gx,)

    out = Tensor._result(data, (xp,), backward, "stft")
    real = out.narrow(out.ndim - 3, 0, 1).reshape(data.shape[:-3]
                                                  + data.shape[-2:])
    imag = out.narrow(out.ndim - 3, 1, 1).reshape(data.shape[:-3]
                                                  + data.shape[-2:])
    return ComplexSpectrogram(real, imag, n_fft, hop, n_frames, n_bins,
                              t_pad)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss, params=None, check_finite=True):
    """Reverse-mode sweep from a scalar loss.

    Populates .grad on every differentiable tensor reachable from `loss`;
    branches without differentiable leaves are pruned. Parameters listed
    in `params` that the graph never touched receive zero gradients. Two
    runs over the same graph produce bit-identical grads (fixed
    topological order, ordered accumulation). With check_finite, the
    first non-finite gradient raises, naming the producing node.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape "
                         f"{loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericsError("backward: loss is not finite")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    # a node is relevant iff its subtree contains a differentiable leaf
    relevant = set()
    for node in topo:  # parents precede children
        if node.requires_grad or any(id(p) in relevant
                                     for p in node._parents):
            relevant.add(id(node))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        needs = tuple(id(p) in relevant for p in node._parents)
        if not any(needs):
            continue
        grads = node._backward(node.grad, needs)
        for parent, g, need in zip(node._parents, grads, needs):
            if g is None or not need:
                continue
            if check_finite and not np.isfinite(g).all():
                raise NumericsError(
                    f"backward: non-finite gradient flowing from node "
                    f"'{node._op}' into '{parent._op}'")
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient oracle for scalar f(Tensor x).

    Deterministic f assumed; returns an ndarray shaped like x. Used by
    tests to check every analytic gradient independently.
    """
    base = x.data.astype(np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for sign in (+1.0, -1.0):
            probe = base.copy().reshape(-1)
            probe[i] += sign * eps
            val = f(Tensor(probe.reshape(base.shape)))
            v = float(val.data.reshape(-1)[0]) if isinstance(val, Tensor) \
                else float(val)
            if not math.isfinite(v):
                raise NumericsError("finite_diff_grad: non-finite value of f")
            flat[i] += sign * v
        flat[i] /= (2.0 * eps)
    return grad
