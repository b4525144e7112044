"""NumPy reference implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable and
the ground truth the Cython backend is tested against. Convolutions are
BLAS-backed (im2col + matmul); the GRU kernels step through time with
vectorized gate math.

Conventions shared by every backend:
  * arrays are batched: x is [B, C, T], conv weights are [C_out, C_in, K],
    transposed-conv weights are [C_in, C_out, K]
  * no implicit padding; callers pad explicitly
  * GRU gate order is (reset, update, candidate) with two bias vectors,
    candidate computed as tanh(x_n + r * (U h + b_hh_n))
  * grouped GRU weights are [M, 3*Fg, Fg] with Fg = F // M
"""

import numpy as np

NAME = "numpy"


def _as_cols(x, kernel, stride):
    """im2col: [B, C, T] -> contiguous [B, C*K, T_out]."""
    b, c, t = x.shape
    t_out = (t - kernel) // stride + 1
    sb, sc, st = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, kernel, t_out), strides=(sb, sc, st, st * stride))
    return np.ascontiguousarray(view).reshape(b, c * kernel, t_out), t_out


def conv1d_fwd(x, w, stride):
    """Strided cross-correlation. y[b,o,t] = sum_{i,k} w[o,i,k] x[b,i,t*s+k]."""
    c_out, c_in, kernel = w.shape
    cols, _ = _as_cols(x, kernel, stride)
    return np.matmul(w.reshape(c_out, c_in * kernel), cols)


def conv1d_bwd_x(gy, w, stride, t_in):
    """Gradient of conv1d_fwd w.r.t. x (also the transposed-conv forward)."""
    b, c_out, t_out = gy.shape
    c_out2, c_in, kernel = w.shape
    gcols = np.matmul(w.reshape(c_out, c_in * kernel).T, gy)
    gcols = gcols.reshape(b, c_in, kernel, t_out)
    gx = np.zeros((b, c_in, t_in), dtype=gy.dtype)
    span = (t_out - 1) * stride + 1
    for k in range(kernel):
        gx[:, :, k:k + span:stride] += gcols[:, :, k, :]
    return gx


def conv1d_bwd_w(x, gy, stride, kernel):
    """Gradient of conv1d_fwd w.r.t. w, accumulated over batch and time."""
    b, c_out, t_out = gy.shape
    cols, _ = _as_cols(x, kernel, stride)
    gw = np.matmul(gy, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(c_out, x.shape[1], kernel)


def sigmoid_np(a):
    """Numerically stable logistic function."""
    from scipy.special import expit
    return expit(a)


def gru_fwd(x, h0, w_ih, w_hh, b_ih, b_hh):
    """Grouped GRU over a sequence.

    x: [B, F, T], h0: [B, F]; returns (y [B, F, T], cache for gru_bwd).
    """
    b, f, t = x.shape
    m, g3, fg = w_ih.shape
    xg = x.reshape(b, m, fg, t)
    # input projections for all steps at once: [B, M, 3Fg, T]
    xproj = np.einsum("mij,bmjt->bmit", w_ih, xg, optimize=True)
    xproj += b_ih[None, :, :, None]
    h = h0.reshape(b, m, fg).copy()
    h_seq = np.empty((t + 1, b, m, fg), dtype=x.dtype)
    h_seq[0] = h
    rs = np.empty((t, b, m, fg), dtype=x.dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    hns = np.empty_like(rs)
    for step in range(t):
        hproj = np.einsum("mij,bmj->bmi", w_hh, h, optimize=True)
        hproj += b_hh[None, :, :]
        xr, xz, xn = (xproj[:, :, 0:fg, step], xproj[:, :, fg:2 * fg, step],
                      xproj[:, :, 2 * fg:, step])
        hr, hz, hn = (hproj[:, :, 0:fg], hproj[:, :, fg:2 * fg],
                      hproj[:, :, 2 * fg:])
        r = sigmoid_np(xr + hr)
        z = sigmoid_np(xz + hz)
        n = np.tanh(xn + r * hn)
        h = (1.0 - z) * n + z * h
        rs[step], zs[step], ns[step], hns[step] = r, z, n, hn
        h_seq[step + 1] = h
    y = h_seq[1:].transpose(1, 2, 3, 0).reshape(b, f, t)
    cache = (x, h_seq, rs, zs, ns, hns, w_ih, w_hh)
    return y, cache


def gru_bwd(gy, cache):
    """BPTT for gru_fwd. Returns (gx, gh0, gw_ih, gw_hh, gb_ih, gb_hh)."""
    x, h_seq, rs, zs, ns, hns, w_ih, w_hh = cache
    b, f, t = gy.shape
    m, g3, fg = w_ih.shape
    gyg = gy.reshape(b, m, fg, t)
    da_ih = np.empty((t, b, m, g3), dtype=gy.dtype)
    da_hh = np.empty_like(da_ih)
    gh = np.zeros((b, m, fg), dtype=gy.dtype)
    for step in range(t - 1, -1, -1):
        gh = gh + gyg[:, :, :, step]
        r, z, n, hn = rs[step], zs[step], ns[step], hns[step]
        h_prev = h_seq[step]
        dn = gh * (1.0 - z)
        dz = gh * (h_prev - n)
        gh_prev = gh * z
        dan = dn * (1.0 - n * n)
        dr = dan * hn
        dhn = dan * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        da_ih[step, :, :, 0:fg] = dar
        da_ih[step, :, :, fg:2 * fg] = daz
        da_ih[step, :, :, 2 * fg:] = dan
        da_hh[step, :, :, 0:fg] = dar
        da_hh[step, :, :, fg:2 * fg] = daz
        da_hh[step, :, :, 2 * fg:] = dhn
        gh_prev += np.einsum("mij,bmi->bmj", w_hh, da_hh[step], optimize=True)
        gh = gh_prev
    xg = x.reshape(b, m, fg, t)
    # [T,B,M,3Fg] -> [B,M,3Fg,T]
    da_ih_t = da_ih.transpose(1, 2, 3, 0)
    da_hh_t = da_hh.transpose(1, 2, 3, 0)
    gx = np.einsum("mij,bmit->bmjt", w_ih, da_ih_t, optimize=True)
    gw_ih = np.einsum("bmit,bmjt->mij", da_ih_t, xg, optimize=True)
    h_prev_t = h_seq[:-1].transpose(1, 2, 3, 0)
    gw_hh = np.einsum("bmit,bmjt->mij", da_hh_t, h_prev_t, optimize=True)
    gb_ih = da_ih.sum(axis=(0, 1))
    gb_hh = da_hh.sum(axis=(0, 1))
    return (gx.reshape(b, f, t), gh.reshape(b, f), gw_ih, gw_hh, gb_ih, gb_hh)


def diag_gru_fwd(x, h0, w_ih, w_hh, b_ih, b_hh):
    """Per-feature scalar GRU: all projections are elementwise products.

    x: [B, F, T], weights/biases: [3, F]; returns (y, cache).
    """
    b, f, t = x.shape
    h = h0.copy()
    h_seq = np.empty((t + 1, b, f), dtype=x.dtype)
    h_seq[0] = h
    rs = np.empty((t, b, f), dtype=x.dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    hns = np.empty_like(rs)
    for step in range(t):
        xt = x[:, :, step]
        r = sigmoid_np(w_ih[0] * xt + b_ih[0] + w_hh[0] * h + b_hh[0])
        z = sigmoid_np(w_ih[1] * xt + b_ih[1] + w_hh[1] * h + b_hh[1])
        hn = w_hh[2] * h + b_hh[2]
        n = np.tanh(w_ih[2] * xt + b_ih[2] + r * hn)
        h = (1.0 - z) * n + z * h
        rs[step], zs[step], ns[step], hns[step] = r, z, n, hn
        h_seq[step + 1] = h
    y = h_seq[1:].transpose(1, 2, 0)
    cache = (x, h_seq, rs, zs, ns, hns, w_ih, w_hh)
    return y, cache


def diag_gru_bwd(gy, cache):
    """BPTT for diag_gru_fwd. Same return layout as gru_bwd."""
    x, h_seq, rs, zs, ns, hns, w_ih, w_hh = cache
    b, f, t = gy.shape
    gx = np.empty_like(x)
    gw_ih = np.zeros((3, f), dtype=gy.dtype)
    gw_hh = np.zeros((3, f), dtype=gy.dtype)
    gb_ih = np.zeros((3, f), dtype=gy.dtype)
    gb_hh = np.zeros((3, f), dtype=gy.dtype)
    gh = np.zeros((b, f), dtype=gy.dtype)
    for step in range(t - 1, -1, -1):
        gh = gh + gy[:, :, step]
        r, z, n, hn = rs[step], zs[step], ns[step], hns[step]
        h_prev = h_seq[step]
        xt = x[:, :, step]
        dn = gh * (1.0 - z)
        dz = gh * (h_prev - n)
        gh_prev = gh * z
        dan = dn * (1.0 - n * n)
        dr = dan * hn
        dhn = dan * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        gx[:, :, step] = dar * w_ih[0] + daz * w_ih[1] + dan * w_ih[2]
        gw_ih[0] += (dar * xt).sum(axis=0)
        gw_ih[1] += (daz * xt).sum(axis=0)
        gw_ih[2] += (dan * xt).sum(axis=0)
        gw_hh[0] += (dar * h_prev).sum(axis=0)
        gw_hh[1] += (daz * h_prev).sum(axis=0)
        gw_hh[2] += (dhn * h_prev).sum(axis=0)
        gb_ih[0] += dar.sum(axis=0)
        gb_ih[1] += daz.sum(axis=0)
        gb_ih[2] += dan.sum(axis=0)
        gb_hh[0] += dar.sum(axis=0)
        gb_hh[1] += daz.sum(axis=0)
        gb_hh[2] += dhn.sum(axis=0)
        gh_prev += dar * w_hh[0] + daz * w_hh[1] + dhn * w_hh[2]
        gh = gh_prev
    return gx, gh, gw_ih, gw_hh, gb_ih, gb_hh
