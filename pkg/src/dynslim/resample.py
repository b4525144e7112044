"""Windowed-sinc polyphase resampling, differentiable via the conv
primitives.

Both directions use the same 64-tap Kaiser-windowed sinc lowpass, applied
at the high rate: upsampling is a strided transposed conv (zero insertion +
filtering), downsampling a strided conv. The filter is linear-phase; the
half-filter group delay is compensated by cropping, which leaves a fixed
lookahead of taps//(2*factor) input samples per direction. Upsampler
polyphase branches are normalized to unit sum so a constant signal is
reproduced exactly.
"""

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor, conv1d, conv1d_transposed

TAPS = 64
KAISER_BETA = 6.0

_filter_cache = {}


def lowpass_filter(factor, dtype=np.float64):
    """Sinc lowpass with cutoff pi/factor, unit DC gain per polyphase
    branch. Returns a [taps] array (peak at index taps//2)."""
    key = (int(factor), np.dtype(dtype).name)
    if key not in _filter_cache:
        n = np.arange(TAPS) - TAPS // 2
        win = np.kaiser(TAPS + 1, KAISER_BETA)[:-1]
        h = np.sinc(n / factor) * win
        for p in range(factor):
            branch = h[p::factor]
            h[p::factor] = branch / branch.sum()
        _filter_cache[key] = h.astype(dtype)
    return _filter_cache[key]


def _check_factor(factor):
    if factor < 1:
        raise ShapeError(f"resample factor must be >= 1, got {factor}")
    if factor > TAPS // 2:
        raise ShapeError(f"resample factor {factor} too large for "
                         f"{TAPS}-tap filter")


def upsample(x, factor):
    """x: Tensor [..., 1, T] -> [..., 1, factor*T]."""
    _check_factor(factor)
    if factor == 1:
        return x
    h = lowpass_filter(factor, x.dtype)
    w = Tensor(h.reshape(1, 1, TAPS))
    y = conv1d_transposed(x, w, None, factor)
    return y.narrow(y.ndim - 1, TAPS // 2, factor * x.shape[-1])


def downsample(x, factor):
    """x: Tensor [..., 1, T] with factor | T -> [..., 1, T/factor]."""
    _check_factor(factor)
    if factor == 1:
        return x
    t = x.shape[-1]
    if t % factor != 0:
        raise ShapeError(f"downsample: length {t} not divisible by "
                         f"{factor}")
    h = lowpass_filter(factor, x.dtype) / factor
    w = Tensor(h.reshape(1, 1, TAPS))
    xp = x.pad_last(TAPS // 2, TAPS // 2 - factor)
    return conv1d(xp, w, None, factor)


def resample(x, factor, direction):
    """Spec-facing entry point; direction is 'up' or 'down'."""
    if direction == "up":
        return upsample(x, factor)
    if direction == "down":
        return downsample(x, factor)
    raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")


def upsample_np(x, factor):
    """Raw-array upsampler for the no-autodiff inference path. x: [C, T]."""
    _check_factor(factor)
    if factor == 1:
        return x
    h = lowpass_filter(factor, x.dtype)
    y = kernels.tconv1d_fwd(x[None], h.reshape(1, 1, TAPS), factor)
    return np.ascontiguousarray(
        y[0, :, TAPS // 2:TAPS // 2 + factor * x.shape[-1]])


def downsample_np(x, factor):
    """Raw-array downsampler. x: [C, T], factor | T."""
    _check_factor(factor)
    if factor == 1:
        return x
    t = x.shape[-1]
    if t % factor != 0:
        raise ShapeError(f"downsample: length {t} not divisible by "
                         f"{factor}")
    h = (lowpass_filter(factor, x.dtype) / factor).reshape(1, 1, TAPS)
    xp = np.pad(x[None], ((0, 0), (0, 0), (TAPS // 2, TAPS // 2 - factor)))
    return kernels.conv1d_fwd(xp, h, factor)[0]
