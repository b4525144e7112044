"""Compiled-kernel backend: conv kernels run fully in C, GRU recurrences
run in C with the O(F^2*T) projections left to BLAS via numpy.matmul.
"""

import numpy as np

from . import _ckernels as _ck

NAME = "cython"


def conv1d_fwd(x, w, stride):
    return _ck.conv1d_fwd(x, w, stride)


def conv1d_bwd_x(gy, w, stride, t_in):
    return _ck.conv1d_bwd_x(gy, w, stride, t_in)


def conv1d_bwd_w(x, gy, stride, kernel):
    return _ck.conv1d_bwd_w(x, gy, stride, kernel)


def gru_fwd(x, h0, w_ih, w_hh, b_ih, b_hh):
    b, f, t = x.shape
    m, g3, fg = w_ih.shape
    xg = x.reshape(b, m, fg, t)
    xproj = np.matmul(w_ih[None], xg)
    xproj += b_ih[None, :, :, None]
    xproj = np.ascontiguousarray(xproj)
    h_seq = np.empty((t + 1, b, f), dtype=x.dtype)
    rs = np.empty((t, b, f), dtype=x.dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    hns = np.empty_like(rs)
    _ck.gru_fwd_steps(xproj, w_hh, b_hh, np.ascontiguousarray(h0), h_seq,
                      rs, zs, ns, hns)
    y = np.ascontiguousarray(h_seq[1:].transpose(1, 2, 0))
    cache = (x, h_seq, rs, zs, ns, hns, w_ih, w_hh)
    return y, cache


def gru_bwd(gy, cache):
    x, h_seq, rs, zs, ns, hns, w_ih, w_hh = cache
    b, f, t = gy.shape
    m, g3, fg = w_ih.shape
    gy_t = np.ascontiguousarray(gy.transpose(2, 0, 1))
    da_ih = np.empty((b, m, g3, t), dtype=gy.dtype)
    da_hh = np.empty_like(da_ih)
    gh0 = np.empty((b, f), dtype=gy.dtype)
    _ck.gru_bwd_steps(gy_t, w_hh, h_seq, rs, zs, ns, hns, da_ih, da_hh, gh0)
    xg = x.reshape(b, m, fg, t)
    gx = np.matmul(w_ih.transpose(0, 2, 1)[None], da_ih).reshape(b, f, t)
    gw_ih = np.matmul(da_ih, xg.transpose(0, 1, 3, 2)).sum(axis=0)
    h_prev = np.ascontiguousarray(
        h_seq[:t].transpose(1, 2, 0)).reshape(b, m, fg, t)
    gw_hh = np.matmul(da_hh, h_prev.transpose(0, 1, 3, 2)).sum(axis=0)
    gb_ih = da_ih.sum(axis=(0, 3))
    gb_hh = da_hh.sum(axis=(0, 3))
    return gx, gh0, gw_ih, gw_hh, gb_ih, gb_hh


def diag_gru_fwd(x, h0, w_ih, w_hh, b_ih, b_hh):
    b, f, t = x.shape
    h_seq = np.empty((t + 1, b, f), dtype=x.dtype)
    rs = np.empty((t, b, f), dtype=x.dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    hns = np.empty_like(rs)
    _ck.diag_gru_fwd_steps(x, w_ih, w_hh, b_ih, b_hh,
                           np.ascontiguousarray(h0), h_seq, rs, zs, ns, hns)
    y = np.ascontiguousarray(h_seq[1:].transpose(1, 2, 0))
    cache = (x, h_seq, rs, zs, ns, hns, w_ih, w_hh)
    return y, cache


def diag_gru_bwd(gy, cache):
    x, h_seq, rs, zs, ns, hns, w_ih, w_hh = cache
    b, f, t = gy.shape
    gy_t = np.ascontiguousarray(gy.transpose(2, 0, 1))
    gx = np.empty_like(x)
    gw_ih = np.zeros((3, f), dtype=gy.dtype)
    gw_hh = np.zeros((3, f), dtype=gy.dtype)
    gb_ih = np.zeros((3, f), dtype=gy.dtype)
    gb_hh = np.zeros((3, f), dtype=gy.dtype)
    gh0 = np.empty((b, f), dtype=gy.dtype)
    _ck.diag_gru_bwd_steps(gy_t, x, w_ih, w_hh, h_seq, rs, zs, ns, hns,
                           gx, gw_ih, gw_hh, gb_ih, gb_hh, gh0)
    return gx, gh0, gw_ih, gw_hh, gb_ih, gb_hh
