# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution/pooling/batchnorm kernels.

Dense convolutions run as an im2col pack (typed loops) followed by BLAS GEMM;
3x3 depthwise convolutions and batchnorm use dedicated fused loops. All loops
are serial with a fixed accumulation order, so results are bit-reproducible.
Signatures and layouts mirror ``numpy_backend``.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

NAME = "cython"


cdef void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                   floating alpha, floating* a, int lda, floating* b, int ldb,
                   floating beta, floating* c, int ldc) noexcept nogil:
    # Row-major C(m,n) = alpha*opA(A) @ opB(B) + beta*C via column-major BLAS
    # with swapped operands; lda/ldb/ldc are the row-major column counts.
    cdef char fa = b'T' if tb else b'N'
    cdef char fb = b'T' if ta else b'N'
    if floating is float:
        sgemm(&fa, &fb, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)
    else:
        dgemm(&fa, &fb, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


def _pad(floating[:, :, :, ::1] x, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    xp_arr = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = xp_arr
    cdef Py_ssize_t n, c, h
    with nogil:
        for n in range(N):
            for c in range(C):
                for h in range(H):
                    xp[n, c, h + pad, pad:pad + W] = x[n, c, h, :]
    return xp_arr


cdef void _pack_sample(floating[:, :, :, ::1] xp, floating[:, ::1] cols,
                       Py_ssize_t n, int kh, int kw, int stride,
                       int oh, int ow) noexcept nogil:
    cdef Py_ssize_t c, u, v, i, j, kk
    cdef Py_ssize_t C = xp.shape[1]
    for c in range(C):
        for u in range(kh):
            for v in range(kw):
                kk = (c * kh + u) * kw + v
                for i in range(oh):
                    for j in range(ow):
                        cols[kk, i * ow + j] = xp[n, c, i * stride + u, j * stride + v]


cdef void _unpack_sample(floating[:, ::1] dcols, floating[:, :, :, ::1] dxp,
                         Py_ssize_t n, int kh, int kw, int stride,
                         int oh, int ow) noexcept nogil:
    cdef Py_ssize_t c, u, v, i, j, kk
    cdef Py_ssize_t C = dxp.shape[1]
    for c in range(C):
        for u in range(kh):
            for v in range(kw):
                kk = (c * kh + u) * kw + v
                for i in range(oh):
                    for j in range(ow):
                        dxp[n, c, i * stride + u, j * stride + v] += dcols[kk, i * ow + j]


def _conv2d_fwd(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w, int stride):
    cdef int C = xp.shape[1], HP = xp.shape[2], WP = xp.shape[3]
    cdef int N = xp.shape[0], O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int oh = (HP - kh) // stride + 1
    cdef int ow = (WP - kw) // stride + 1
    cdef int K = C * kh * kw, P = oh * ow
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.empty((K, P), dtype=dtype)
    y_arr = np.empty((N, O, oh, ow), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t n
    with nogil:
        for n in range(N):
            _pack_sample(xp, cols, n, kh, kw, stride, oh, ow)
            _gemm_rm(False, False, O, P, K, <floating>1.0, &w[0, 0, 0, 0], K,
                     &cols[0, 0], P, <floating>0.0, &y[n, 0, 0, 0], P)
    return y_arr


def conv2d_fwd(x, w, int stride, int pad):
    xc = np.ascontiguousarray(x)
    xp = _pad(xc, pad) if pad else xc
    return _conv2d_fwd(xp, np.ascontiguousarray(w), stride)


def _conv2d_bwd(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                floating[:, :, :, ::1] gy, int stride, bint need_dx, bint need_dw):
    cdef int N = xp.shape[0], C = xp.shape[1], HP = xp.shape[2], WP = xp.shape[3]
    cdef int O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int oh = gy.shape[2], ow = gy.shape[3]
    cdef int K = C * kh * kw, P = oh * ow
    dtype = np.float32 if floating is float else np.float64

    cols_arr = np.empty((K, P), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef floating[:, ::1] dcols
    cdef floating[:, :, :, ::1] dwv, dxpv
    cdef Py_ssize_t n

    dw_arr = None
    dxp_arr = None
    if need_dw:
        dw_arr = np.zeros((O, C, kh, kw), dtype=dtype)
        dwv = dw_arr
    if need_dx:
        dcols_arr = np.empty((K, P), dtype=dtype)
        dcols = dcols_arr
        dxp_arr = np.zeros((N, C, HP, WP), dtype=dtype)
        dxpv = dxp_arr

    with nogil:
        for n in range(N):
            if need_dw:
                _pack_sample(xp, cols, n, kh, kw, stride, oh, ow)
                # dw(O,K) += gy_n(O,P) @ cols(K,P)^T
                _gemm_rm(False, True, O, K, P, <floating>1.0, &gy[n, 0, 0, 0], P,
                         &cols[0, 0], P, <floating>1.0, &dwv[0, 0, 0, 0], K)
            if need_dx:
                # dcols(K,P) = w2(O,K)^T @ gy_n(O,P)
                _gemm_rm(True, False, K, P, O, <floating>1.0, &w[0, 0, 0, 0], K,
                         &gy[n, 0, 0, 0], P, <floating>0.0, &dcols[0, 0], P)
                _unpack_sample(dcols, dxpv, n, kh, kw, stride, oh, ow)
    return dxp_arr, dw_arr


def conv2d_bwd(x, w, gy, int stride, int pad, bint need_dx=True, bint need_dw=True):
    xc = np.ascontiguousarray(x)
    xp = _pad(xc, pad) if pad else xc
    h, wd = x.shape[2], x.shape[3]
    dxp, dw = _conv2d_bwd(xp, np.ascontiguousarray(w), np.ascontiguousarray(gy),
                          stride, need_dx, need_dw)
    dx = None
    if dxp is not None:
        dx = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd]) if pad else dxp
    return dx, dw


# -- depthwise -----------------------------------------------------------

cdef void _dw3_fwd_plane(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                         floating[:, :, :, ::1] y, Py_ssize_t n, Py_ssize_t c,
                         int stride) noexcept nogil:
    cdef Py_ssize_t i, j, r
    cdef Py_ssize_t oh = y.shape[2], ow = y.shape[3]
    cdef floating w0 = w[c, 0, 0, 0], w1 = w[c, 0, 0, 1], w2 = w[c, 0, 0, 2]
    cdef floating w3 = w[c, 0, 1, 0], w4 = w[c, 0, 1, 1], w5 = w[c, 0, 1, 2]
    cdef floating w6 = w[c, 0, 2, 0], w7 = w[c, 0, 2, 1], w8 = w[c, 0, 2, 2]
    for i in range(oh):
        r = i * stride
        for j in range(ow):
            y[n, c, i, j] = (
                xp[n, c, r, j * stride] * w0 + xp[n, c, r, j * stride + 1] * w1
                + xp[n, c, r, j * stride + 2] * w2
                + xp[n, c, r + 1, j * stride] * w3 + xp[n, c, r + 1, j * stride + 1] * w4
                + xp[n, c, r + 1, j * stride + 2] * w5
                + xp[n, c, r + 2, j * stride] * w6 + xp[n, c, r + 2, j * stride + 1] * w7
                + xp[n, c, r + 2, j * stride + 2] * w8
            )


cdef void _dw_fwd_plane(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                        floating[:, :, :, ::1] y, Py_ssize_t n, Py_ssize_t c,
                        int stride) noexcept nogil:
    cdef Py_ssize_t i, j, u, v
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = y.shape[2], ow = y.shape[3]
    cdef floating acc
    for i in range(oh):
        for j in range(ow):
            acc = 0
            for u in range(kh):
                for v in range(kw):
                    acc = acc + xp[n, c, i * stride + u, j * stride + v] * w[c, 0, u, v]
            y[n, c, i, j] = acc


def _depthwise_fwd(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w, int stride):
    cdef int N = xp.shape[0], C = xp.shape[1]
    cdef int kh = w.shape[2], kw = w.shape[3]
    cdef int oh = (xp.shape[2] - kh) // stride + 1
    cdef int ow = (xp.shape[3] - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((N, C, oh, ow), dtype=dtype)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t n, c
    with nogil:
        for n in range(N):
            for c in range(C):
                if kh == 3 and kw == 3:
                    _dw3_fwd_plane(xp, w, y, n, c, stride)
                else:
                    _dw_fwd_plane(xp, w, y, n, c, stride)
    return y_arr


def depthwise_fwd(x, w, int stride, int pad):
    xc = np.ascontiguousarray(x)
    xp = _pad(xc, pad) if pad else xc
    return _depthwise_fwd(xp, np.ascontiguousarray(w), stride)


cdef void _dw3_bwd_plane(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                         floating[:, :, :, ::1] gy, floating[:, :, :, ::1] dxp,
                         floating* dwc, Py_ssize_t n, Py_ssize_t c, int stride,
                         bint need_dx) noexcept nogil:
    cdef Py_ssize_t i, j, r, s
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef floating g
    cdef floating w0 = w[c, 0, 0, 0], w1 = w[c, 0, 0, 1], w2 = w[c, 0, 0, 2]
    cdef floating w3 = w[c, 0, 1, 0], w4 = w[c, 0, 1, 1], w5 = w[c, 0, 1, 2]
    cdef floating w6 = w[c, 0, 2, 0], w7 = w[c, 0, 2, 1], w8 = w[c, 0, 2, 2]
    for i in range(oh):
        r = i * stride
        for j in range(ow):
            s = j * stride
            g = gy[n, c, i, j]
            dwc[0] += xp[n, c, r, s] * g
            dwc[1] += xp[n, c, r, s + 1] * g
            dwc[2] += xp[n, c, r, s + 2] * g
            dwc[3] += xp[n, c, r + 1, s] * g
            dwc[4] += xp[n, c, r + 1, s + 1] * g
            dwc[5] += xp[n, c, r + 1, s + 2] * g
            dwc[6] += xp[n, c, r + 2, s] * g
            dwc[7] += xp[n, c, r + 2, s + 1] * g
            dwc[8] += xp[n, c, r + 2, s + 2] * g
            if need_dx:
                dxp[n, c, r, s] += w0 * g
                dxp[n, c, r, s + 1] += w1 * g
                dxp[n, c, r, s + 2] += w2 * g
                dxp[n, c, r + 1, s] += w3 * g
                dxp[n, c, r + 1, s + 1] += w4 * g
                dxp[n, c, r + 1, s + 2] += w5 * g
                dxp[n, c, r + 2, s] += w6 * g
                dxp[n, c, r + 2, s + 1] += w7 * g
                dxp[n, c, r + 2, s + 2] += w8 * g


cdef void _dw_bwd_plane(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                        floating[:, :, :, ::1] gy, floating[:, :, :, ::1] dxp,
                        floating[:, :, :, ::1] dw, Py_ssize_t n, Py_ssize_t c,
                        int stride, bint need_dx) noexcept nogil:
    cdef Py_ssize_t i, j, u, v
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef floating g
    for i in range(oh):
        for j in range(ow):
            g = gy[n, c, i, j]
            for u in range(kh):
                for v in range(kw):
                    dw[c, 0, u, v] += xp[n, c, i * stride + u, j * stride + v] * g
                    if need_dx:
                        dxp[n, c, i * stride + u, j * stride + v] += w[c, 0, u, v] * g


def _depthwise_bwd(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] w,
                   floating[:, :, :, ::1] gy, int stride, bint need_dx):
    cdef int N = xp.shape[0], C = xp.shape[1]
    cdef int kh = w.shape[2], kw = w.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dw_arr = np.zeros((C, 1, kh, kw), dtype=dtype)
    dxp_arr = np.zeros((N, C, xp.shape[2], xp.shape[3]), dtype=dtype) if need_dx \
        else np.empty((1, 1, 1, 1), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef floating[:, :, :, ::1] dxp = dxp_arr
    cdef Py_ssize_t n, c
    with nogil:
        for n in range(N):
            for c in range(C):
                if kh == 3 and kw == 3:
                    _dw3_bwd_plane(xp, w, gy, dxp, &dw[c, 0, 0, 0], n, c, stride, need_dx)
                else:
                    _dw_bwd_plane(xp, w, gy, dxp, dw, n, c, stride, need_dx)
    return (dxp_arr if need_dx else None), dw_arr


def depthwise_bwd(x, w, gy, int stride, int pad, bint need_dx=True):
    xc = np.ascontiguousarray(x)
    xp = _pad(xc, pad) if pad else xc
    h, wd = x.shape[2], x.shape[3]
    dxp, dw = _depthwise_bwd(xp, np.ascontiguousarray(w), np.ascontiguousarray(gy),
                             stride, need_dx)
    dx = None
    if dxp is not None:
        dx = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd]) if pad else dxp
    return dx, dw


# -- max pooling ----------------------------------------------------------

def _maxpool_fwd(floating[:, :, :, ::1] x, int k, int stride):
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int oh = (H - k) // stride + 1
    cdef int ow = (W - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((N, C, oh, ow), dtype=dtype)
    arg_arr = np.empty((N, C, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, c, i, j, u, v, r0, c0, besti
    cdef floating best, val
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(oh):
                    for j in range(ow):
                        r0 = i * stride
                        c0 = j * stride
                        best = x[n, c, r0, c0]
                        besti = r0 * W + c0
                        for u in range(k):
                            for v in range(k):
                                val = x[n, c, r0 + u, c0 + v]
                                if val > best:
                                    best = val
                                    besti = (r0 + u) * W + c0 + v
                        y[n, c, i, j] = best
                        arg[n, c, i, j] = besti
    return y_arr, arg_arr


def maxpool_fwd(x, int k, int stride):
    return _maxpool_fwd(np.ascontiguousarray(x), k, stride)


def _maxpool_bwd(cnp.int64_t[:, :, :, ::1] arg, floating[:, :, :, ::1] gy, int H, int W):
    cdef int N = gy.shape[0], C = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((N, C, H * W), dtype=dtype)
    cdef floating[:, :, ::1] dxf = dx_arr
    cdef Py_ssize_t n, c, i, j
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(oh):
                    for j in range(ow):
                        dxf[n, c, arg[n, c, i, j]] += gy[n, c, i, j]
    return dx_arr.reshape(N, C, H, W)


def maxpool_bwd(arg, gy, int h, int w):
    return _maxpool_bwd(np.ascontiguousarray(arg), np.ascontiguousarray(gy), h, w)


# -- batchnorm ------------------------------------------------------------

def _bn_fwd_train(floating[:, :, :, ::1] x, floating[::1] gamma, floating[::1] beta,
                  double eps):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef double m = N * H * W
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((N, C, H, W), dtype=dtype)
    xhat_arr = np.empty((N, C, H, W), dtype=dtype)
    mean_arr = np.empty(C, dtype=dtype)
    var_arr = np.empty(C, dtype=dtype)
    inv_arr = np.empty(C, dtype=dtype)
    cdef floating[:, :, :, ::1] y = y_arr, xhat = xhat_arr
    cdef floating[::1] mean = mean_arr, var = var_arr, inv = inv_arr
    cdef double acc, acc2, mu
    cdef floating mu_f, inv_f, g_f, b_f, xh
    with nogil:
        for c in range(C):
            acc = 0
            for n in range(N):
                for i in range(H):
                    for j in range(W):
                        acc = acc + x[n, c, i, j]
            mu = acc / m
            acc2 = 0
            for n in range(N):
                for i in range(H):
                    for j in range(W):
                        acc2 = acc2 + (x[n, c, i, j] - mu) * (x[n, c, i, j] - mu)
            mean[c] = <floating>mu
            var[c] = <floating>(acc2 / m)
            inv[c] = <floating>(1.0 / ((acc2 / m + eps) ** 0.5))
            mu_f = mean[c]
            inv_f = inv[c]
            g_f = gamma[c]
            b_f = beta[c]
            for n in range(N):
                for i in range(H):
                    for j in range(W):
                        xh = (x[n, c, i, j] - mu_f) * inv_f
                        xhat[n, c, i, j] = xh
                        y[n, c, i, j] = g_f * xh + b_f
    return y_arr, xhat_arr, inv_arr, mean_arr, var_arr


def bn_fwd_train(x, gamma, beta, eps):
    return _bn_fwd_train(np.ascontiguousarray(x), np.ascontiguousarray(gamma),
                         np.ascontiguousarray(beta), eps)


def _bn_bwd_train(floating[:, :, :, ::1] xhat, floating[::1] inv, floating[::1] gamma,
                  floating[:, :, :, ::1] gy):
    cdef Py_ssize_t N = xhat.shape[0], C = xhat.shape[1], H = xhat.shape[2], W = xhat.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef double m = N * H * W
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((N, C, H, W), dtype=dtype)
    dgamma_arr = np.empty(C, dtype=dtype)
    dbeta_arr = np.empty(C, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef floating[::1] dgamma = dgamma_arr, dbeta = dbeta_arr
    cdef double sg, sgx
    cdef floating k1, k2, scale
    with nogil:
        for c in range(C):
            sg = 0
            sgx = 0
            for n in range(N):
                for i in range(H):
                    for j in range(W):
                        sg = sg + gy[n, c, i, j]
                        sgx = sgx + gy[n, c, i, j] * xhat[n, c, i, j]
            dbeta[c] = <floating>sg
            dgamma[c] = <floating>sgx
            k1 = <floating>(sg / m)
            k2 = <floating>(sgx / m)
            scale = gamma[c] * inv[c]
            for n in range(N):
                for i in range(H):
                    for j in range(W):
                        dx[n, c, i, j] = scale * (gy[n, c, i, j] - k1 - xhat[n, c, i, j] * k2)
    return dx_arr, dgamma_arr, dbeta_arr


def bn_bwd_train(xhat, inv, gamma, gy):
    return _bn_bwd_train(np.ascontiguousarray(xhat), np.ascontiguousarray(inv),
                         np.ascontiguousarray(gamma), np.ascontiguousarray(gy))
