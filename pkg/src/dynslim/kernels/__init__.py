"""Kernel backend selection.

At import time the compiled extension is preferred; if it is missing (the
package was installed without a C toolchain) the NumPy implementations are
used. Set DYNSLIM_KERNELS=py or =c to force a backend; forcing `c` raises
if the extension is absent.

Both backends expose the same API; transposed convolutions are derived from
the three conv primitives here so each backend implements only those.
"""

import os

from . import numpy_backend

_choice = os.environ.get("DYNSLIM_KERNELS", "auto").lower()
if _choice not in ("auto", "c", "py"):
    raise ValueError(f"DYNSLIM_KERNELS must be auto, c, or py, got {_choice!r}")

if _choice == "py":
    _impl = numpy_backend
else:
    try:
        from . import cython_backend as _impl
    except ImportError:
        if _choice == "c":
            raise
        _impl = numpy_backend

BACKEND = _impl.NAME

conv1d_fwd = _impl.conv1d_fwd
conv1d_bwd_x = _impl.conv1d_bwd_x
conv1d_bwd_w = _impl.conv1d_bwd_w
gru_fwd = _impl.gru_fwd
gru_bwd = _impl.gru_bwd
diag_gru_fwd = _impl.diag_gru_fwd
diag_gru_bwd = _impl.diag_gru_bwd


def tconv1d_fwd(x, w, stride):
    """Transposed conv forward. w is [C_in, C_out, K]; output length
    (T-1)*stride + K. Scatter form of conv1d_bwd_x."""
    t_out = (x.shape[2] - 1) * stride + w.shape[2]
    return conv1d_bwd_x(x, w, stride, t_out)


def tconv1d_bwd_x(gy, w, stride):
    return conv1d_fwd(gy, w, stride)


def tconv1d_bwd_w(x, gy, stride, kernel):
    return conv1d_bwd_w(gy, x, stride, kernel)
