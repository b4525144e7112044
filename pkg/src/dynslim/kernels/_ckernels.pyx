# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: strided conv1d (im2col + BLAS gemm) and GRU
time-stepping loops. Semantics identical to numpy_backend; parity is
enforced by tests/test_kernels.py.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

ctypedef fused floating:
    float
    double

NAME = "cython"


# ---------------------------------------------------------------------------
# BLAS helpers for row-major buffers
# ---------------------------------------------------------------------------

cdef inline void _gemm_nn(floating* a, floating* b, floating* c,
                          int m, int n, int k, floating beta) noexcept nogil:
    # C[m,n] = A[m,k] @ B[k,n] + beta*C, all row-major
    cdef char tn = b'N'
    cdef floating alpha = 1.0
    if floating is float:
        sgemm(&tn, &tn, &n, &m, &k, <float*>&alpha, <float*>b, &n,
              <float*>a, &k, <float*>&beta, <float*>c, &n)
    else:
        dgemm(&tn, &tn, &n, &m, &k, <double*>&alpha, <double*>b, &n,
              <double*>a, &k, <double*>&beta, <double*>c, &n)


cdef inline void _gemm_nt(floating* a, floating* b, floating* c,
                          int m, int n, int k, floating beta) noexcept nogil:
    # C[m,n] = A[m,k] @ B[n,k]^T + beta*C
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef floating alpha = 1.0
    if floating is float:
        sgemm(&tt, &tn, &n, &m, &k, <float*>&alpha, <float*>b, &k,
              <float*>a, &k, <float*>&beta, <float*>c, &n)
    else:
        dgemm(&tt, &tn, &n, &m, &k, <double*>&alpha, <double*>b, &k,
              <double*>a, &k, <double*>&beta, <double*>c, &n)


cdef inline void _gemm_tn(floating* a, floating* b, floating* c,
                          int m, int n, int k, floating beta) noexcept nogil:
    # C[m,n] = A[k,m]^T @ B[k,n] + beta*C
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef floating alpha = 1.0
    if floating is float:
        sgemm(&tn, &tt, &n, &m, &k, <float*>&alpha, <float*>b, &n,
              <float*>a, &m, <float*>&beta, <float*>c, &n)
    else:
        dgemm(&tn, &tt, &n, &m, &k, <double*>&alpha, <double*>b, &n,
              <double*>a, &m, <double*>&beta, <double*>c, &n)


cdef inline floating _sigmoid(floating a) noexcept nogil:
    cdef floating e
    if a >= 0:
        return <floating>(1.0 / (1.0 + exp(-a)))
    e = <floating>exp(a)
    return <floating>(e / (1.0 + e))


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

cdef void _im2col(floating[:, ::1] x, floating[:, ::1] cols,
                  int kernel, int stride, int t_out) noexcept nogil:
    cdef Py_ssize_t ci, k, t
    cdef Py_ssize_t c_in = x.shape[0]
    for ci in range(c_in):
        for k in range(kernel):
            for t in range(t_out):
                cols[ci * kernel + k, t] = x[ci, t * stride + k]


def conv1d_fwd(floating[:, :, ::1] x, floating[:, :, ::1] w, int stride):
    cdef Py_ssize_t b_sz = x.shape[0], c_in = x.shape[1], t_in = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0], kernel = w.shape[2]
    cdef int t_out = <int>((t_in - kernel) // stride + 1)
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((b_sz, c_out, t_out), dtype=dtype)
    cols_arr = np.empty((c_in * kernel, t_out), dtype=dtype)
    cdef floating[:, :, ::1] y = y_arr
    cdef floating[:, ::1] cols = cols_arr
    cdef Py_ssize_t b
    with nogil:
        for b in range(b_sz):
            _im2col(x[b], cols, <int>kernel, stride, t_out)
            _gemm_nn(&w[0, 0, 0], &cols[0, 0], &y[b, 0, 0],
                     <int>c_out, t_out, <int>(c_in * kernel), <floating>0.0)
    return y_arr


def conv1d_bwd_x(floating[:, :, ::1] gy, floating[:, :, ::1] w, int stride,
                 int t_in):
    cdef Py_ssize_t b_sz = gy.shape[0], c_out = gy.shape[1], t_out = gy.shape[2]
    cdef Py_ssize_t c_in = w.shape[1], kernel = w.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((b_sz, c_in, t_in), dtype=dtype)
    gcols_arr = np.empty((c_in * kernel, t_out), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef floating[:, ::1] gcols = gcols_arr
    cdef Py_ssize_t b, ci, k, t
    with nogil:
        for b in range(b_sz):
            # gcols = w2^T @ gy[b]
            _gemm_tn(&w[0, 0, 0], &gy[b, 0, 0], &gcols[0, 0],
                     <int>(c_in * kernel), <int>t_out, <int>c_out,
                     <floating>0.0)
            for ci in range(c_in):
                for k in range(kernel):
                    for t in range(t_out):
                        gx[b, ci, t * stride + k] += gcols[ci * kernel + k, t]
    return gx_arr


def conv1d_bwd_w(floating[:, :, ::1] x, floating[:, :, ::1] gy, int stride,
                 int kernel):
    cdef Py_ssize_t b_sz = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t c_out = gy.shape[1], t_out = gy.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gw_arr = np.zeros((c_out, c_in, kernel), dtype=dtype)
    cols_arr = np.empty((c_in * kernel, t_out), dtype=dtype)
    cdef floating[:, :, ::1] gw = gw_arr
    cdef floating[:, ::1] cols = cols_arr
    cdef Py_ssize_t b
    with nogil:
        for b in range(b_sz):
            _im2col(x[b], cols, <int>kernel, stride, <int>t_out)
            # gw2 += gy[b] @ cols^T
            _gemm_nt(&gy[b, 0, 0], &cols[0, 0], &gw[0, 0, 0],
                     <int>c_out, <int>(c_in * kernel), <int>t_out,
                     <floating>1.0)
    return gw_arr


# ---------------------------------------------------------------------------
# grouped GRU time loops
#
# The O(F^2 * T) projections (input side, and the gradient-side gemms) are
# done by the Python wrapper with BLAS; these loops carry only the
# sequential recurrence.
# ---------------------------------------------------------------------------

def gru_fwd_steps(floating[:, :, :, ::1] xproj, floating[:, :, ::1] w_hh,
                  floating[:, ::1] b_hh, floating[:, ::1] h0,
                  floating[:, :, ::1] h_seq, floating[:, :, ::1] rs,
                  floating[:, :, ::1] zs, floating[:, :, ::1] ns,
                  floating[:, :, ::1] hns):
    """xproj: [B,M,3Fg,T] (input projections, biases already added);
    h_seq: [T+1,B,F] output buffer; rs/zs/ns/hns: [T,B,F] buffers."""
    cdef Py_ssize_t b_sz = xproj.shape[0], m_sz = xproj.shape[1]
    cdef Py_ssize_t fg = xproj.shape[2] // 3, t_len = xproj.shape[3]
    cdef Py_ssize_t b, m, i, j, step, base
    cdef floating hr, hz, hn, r, z, n, acc_r, acc_z, acc_n, hp
    with nogil:
        for b in range(b_sz):
            for j in range(m_sz * fg):
                h_seq[0, b, j] = h0[b, j]
        for step in range(t_len):
            for b in range(b_sz):
                for m in range(m_sz):
                    base = m * fg
                    for i in range(fg):
                        acc_r = b_hh[m, i]
                        acc_z = b_hh[m, fg + i]
                        acc_n = b_hh[m, 2 * fg + i]
                        for j in range(fg):
                            hp = h_seq[step, b, base + j]
                            acc_r += w_hh[m, i, j] * hp
                            acc_z += w_hh[m, fg + i, j] * hp
                            acc_n += w_hh[m, 2 * fg + i, j] * hp
                        r = _sigmoid(xproj[b, m, i, step] + acc_r)
                        z = _sigmoid(xproj[b, m, fg + i, step] + acc_z)
                        n = tanh(xproj[b, m, 2 * fg + i, step] + r * acc_n)
                        rs[step, b, base + i] = r
                        zs[step, b, base + i] = z
                        ns[step, b, base + i] = n
                        hns[step, b, base + i] = acc_n
                        h_seq[step + 1, b, base + i] = (
                            (1.0 - z) * n + z * h_seq[step, b, base + i])
    return None


def gru_bwd_steps(floating[:, :, ::1] gy_t, floating[:, :, ::1] w_hh,
                  floating[:, :, ::1] h_seq, floating[:, :, ::1] rs,
                  floating[:, :, ::1] zs, floating[:, :, ::1] ns,
                  floating[:, :, ::1] hns,
                  floating[:, :, :, ::1] da_ih, floating[:, :, :, ::1] da_hh,
                  floating[:, ::1] gh0):
    """gy_t: [T,B,F]; fills da_ih/da_hh: [B,M,3Fg,T] and gh0: [B,F]."""
    cdef Py_ssize_t t_len = gy_t.shape[0], b_sz = gy_t.shape[1]
    cdef Py_ssize_t m_sz = da_ih.shape[1], fg = da_ih.shape[2] // 3
    cdef Py_ssize_t b, m, i, j, step, base
    cdef floating gh, r, z, n, hn, hp, dn, dz, dan, dr, dhn, daz, dar
    gh_buf = np.zeros((b_sz, m_sz * fg), dtype=np.float32 if floating is float
                      else np.float64)
    cdef floating[:, ::1] ghv = gh_buf
    with nogil:
        for step in range(t_len - 1, -1, -1):
            for b in range(b_sz):
                for m in range(m_sz):
                    base = m * fg
                    for i in range(fg):
                        gh = ghv[b, base + i] + gy_t[step, b, base + i]
                        r = rs[step, b, base + i]
                        z = zs[step, b, base + i]
                        n = ns[step, b, base + i]
                        hn = hns[step, b, base + i]
                        hp = h_seq[step, b, base + i]
                        dn = gh * (1.0 - z)
                        dz = gh * (hp - n)
                        ghv[b, base + i] = gh * z
                        dan = dn * (1.0 - n * n)
                        dr = dan * hn
                        dhn = dan * r
                        daz = dz * z * (1.0 - z)
                        dar = dr * r * (1.0 - r)
                        da_ih[b, m, i, step] = dar
                        da_ih[b, m, fg + i, step] = daz
                        da_ih[b, m, 2 * fg + i, step] = dan
                        da_hh[b, m, i, step] = dar
                        da_hh[b, m, fg + i, step] = daz
                        da_hh[b, m, 2 * fg + i, step] = dhn
                # gh_prev += w_hh^T @ da_hh[step]
                for m in range(m_sz):
                    base = m * fg
                    for i in range(fg):
                        for j in range(fg):
                            ghv[b, base + j] += (
                                w_hh[m, i, j] * da_hh[b, m, i, step]
                                + w_hh[m, fg + i, j] * da_hh[b, m, fg + i, step]
                                + w_hh[m, 2 * fg + i, j]
                                * da_hh[b, m, 2 * fg + i, step])
        for b in range(b_sz):
            for j in range(m_sz * fg):
                gh0[b, j] = ghv[b, j]
    return None


# ---------------------------------------------------------------------------
# diagonal GRU time loops (per-feature scalar recurrences)
# ---------------------------------------------------------------------------

def diag_gru_fwd_steps(floating[:, :, ::1] x, floating[:, ::1] w_ih,
                       floating[:, ::1] w_hh, floating[:, ::1] b_ih,
                       floating[:, ::1] b_hh, floating[:, ::1] h0,
                       floating[:, :, ::1] h_seq, floating[:, :, ::1] rs,
                       floating[:, :, ::1] zs, floating[:, :, ::1] ns,
                       floating[:, :, ::1] hns):
    cdef Py_ssize_t b_sz = x.shape[0], f_sz = x.shape[1], t_len = x.shape[2]
    cdef Py_ssize_t b, f, step
    cdef floating r, z, n, hn, hp, xt
    with nogil:
        for b in range(b_sz):
            for f in range(f_sz):
                h_seq[0, b, f] = h0[b, f]
        for step in range(t_len):
            for b in range(b_sz):
                for f in range(f_sz):
                    xt = x[b, f, step]
                    hp = h_seq[step, b, f]
                    r = _sigmoid(w_ih[0, f] * xt + b_ih[0, f]
                                 + w_hh[0, f] * hp + b_hh[0, f])
                    z = _sigmoid(w_ih[1, f] * xt + b_ih[1, f]
                                 + w_hh[1, f] * hp + b_hh[1, f])
                    hn = w_hh[2, f] * hp + b_hh[2, f]
                    n = tanh(w_ih[2, f] * xt + b_ih[2, f] + r * hn)
                    rs[step, b, f] = r
                    zs[step, b, f] = z
                    ns[step, b, f] = n
                    hns[step, b, f] = hn
                    h_seq[step + 1, b, f] = (1.0 - z) * n + z * hp
    return None


def diag_gru_bwd_steps(floating[:, :, ::1] gy_t, floating[:, :, ::1] x,
                       floating[:, ::1] w_ih, floating[:, ::1] w_hh,
                       floating[:, :, ::1] h_seq, floating[:, :, ::1] rs,
                       floating[:, :, ::1] zs, floating[:, :, ::1] ns,
                       floating[:, :, ::1] hns,
                       floating[:, :, ::1] gx, floating[:, ::1] gw_ih,
                       floating[:, ::1] gw_hh, floating[:, ::1] gb_ih,
                       floating[:, ::1] gb_hh, floating[:, ::1] gh0):
    cdef Py_ssize_t t_len = gy_t.shape[0], b_sz = gy_t.shape[1]
    cdef Py_ssize_t f_sz = gy_t.shape[2]
    cdef Py_ssize_t b, f, step
    cdef floating gh, r, z, n, hn, hp, xt, dn, dz, dan, dr, dhn, daz, dar
    with nogil:
        for b in range(b_sz):
            for f in range(f_sz):
                gh0[b, f] = 0.0
        for step in range(t_len - 1, -1, -1):
            for b in range(b_sz):
                for f in range(f_sz):
                    gh = gh0[b, f] + gy_t[step, b, f]
                    r = rs[step, b, f]
                    z = zs[step, b, f]
                    n = ns[step, b, f]
                    hn = hns[step, b, f]
                    hp = h_seq[step, b, f]
                    xt = x[b, f, step]
                    dn = gh * (1.0 - z)
                    dz = gh * (hp - n)
                    gh = gh * z
                    dan = dn * (1.0 - n * n)
                    dr = dan * hn
                    dhn = dan * r
                    daz = dz * z * (1.0 - z)
                    dar = dr * r * (1.0 - r)
                    gx[b, f, step] = (dar * w_ih[0, f] + daz * w_ih[1, f]
                                      + dan * w_ih[2, f])
                    gw_ih[0, f] += dar * xt
                    gw_ih[1, f] += daz * xt
                    gw_ih[2, f] += dan * xt
                    gw_hh[0, f] += dar * hp
                    gw_hh[1, f] += daz * hp
                    gw_hh[2, f] += dhn * hp
                    gb_ih[0, f] += dar
                    gb_ih[1, f] += daz
                    gb_ih[2, f] += dan
                    gb_hh[0, f] += dar
                    gb_hh[1, f] += daz
                    gb_hh[2, f] += dhn
                    gh0[b, f] = gh + (dar * w_hh[0, f] + daz * w_hh[1, f]
                                      + dhn * w_hh[2, f])
    return None
