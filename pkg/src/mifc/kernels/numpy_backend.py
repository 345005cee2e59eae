"""Pure-NumPy convolution/pooling kernels (im2col + BLAS matmul).

Fallback backend used when the compiled extension is unavailable. Both
backends implement the same function signatures over contiguous float32 or
float64 NCHW arrays; padding is zero-padding.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (N, C, kh, kw, OH, OW) over the padded input."""
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, ci, _, _ = x.shape
    co, _, kh, kw = w.shape
    win = _windows(_pad(x, pad), kh, kw, stride)
    oh, ow = win.shape[4], win.shape[5]
    cols = win.reshape(n, ci * kh * kw, oh * ow)
    y = np.matmul(w.reshape(co, -1), cols)
    return np.ascontiguousarray(y.reshape(n, co, oh, ow))


def conv2d_bwd(x, w, gy, stride, pad, need_dx=True, need_dw=True):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    _, _, oh, ow = gy.shape
    g = gy.reshape(n, co, oh * ow)

    dw = None
    if need_dw:
        win = _windows(_pad(x, pad), kh, kw, stride)
        cols = win.reshape(n, ci * kh * kw, oh * ow)
        dw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)

    dx = None
    if need_dx:
        dcols = np.matmul(w.reshape(co, -1).T, g)
        dcols = dcols.reshape(n, ci, kh, kw, oh, ow)
        dxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += dcols[
                    :, :, u, v
                ]
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        dx = np.ascontiguousarray(dx)
    return dx, dw


def depthwise_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    _, _, kh, kw = w.shape
    win = _windows(_pad(x, pad), kh, kw, stride)
    y = np.einsum("ncuvhw,cuv->nchw", win, w[:, 0], optimize=True)
    return np.ascontiguousarray(y.astype(x.dtype, copy=False))


def depthwise_bwd(x, w, gy, stride, pad, need_dx=True):
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    _, _, oh, ow = gy.shape
    win = _windows(_pad(x, pad), kh, kw, stride)
    dw = np.einsum("ncuvhw,nchw->cuv", win, gy, optimize=True)[:, None].astype(
        x.dtype, copy=False
    )
    dx = None
    if need_dx:
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                    gy * w[:, 0, u, v][None, :, None, None]
                )
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        dx = np.ascontiguousarray(dx)
    return dx, np.ascontiguousarray(dw)


def maxpool_fwd(x: np.ndarray, k: int, stride: int):
    """Returns (y, arg) where arg holds, per output element, the flat h*W+w
    index of the window maximum (ties to the lowest flat index)."""
    n, c, h, w = x.shape
    win = _windows(x, k, k, stride)  # (N, C, k, k, OH, OW)
    oh, ow = win.shape[4], win.shape[5]
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    u, v = idx // k, idx % k
    rows = np.arange(oh)[:, None] * stride + u
    cols = np.arange(ow)[None, :] * stride + v
    arg = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(y), arg


def maxpool_bwd(arg: np.ndarray, gy: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, oh, ow = gy.shape
    dx = np.zeros((n * c, h * w), dtype=gy.dtype)
    rows = np.repeat(np.arange(n * c), oh * ow)
    np.add.at(dx, (rows, arg.reshape(-1)), gy.reshape(-1))
    return dx.reshape(n, c, h, w)


def bn_fwd_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Batch statistics (biased variance), normalized activations and output."""
    mean = x.mean(axis=(0, 2, 3))
    xc = x - mean[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return (
        y.astype(x.dtype, copy=False),
        xhat.astype(x.dtype, copy=False),
        inv,
        mean.astype(x.dtype, copy=False),
        var.astype(x.dtype, copy=False),
    )


def bn_bwd_train(xhat: np.ndarray, inv: np.ndarray, gamma: np.ndarray, gy: np.ndarray):
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dbeta = gy.sum(axis=(0, 2, 3))
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv)[None, :, None, None]
    dx = scale * (
        gy
        - (dbeta / m)[None, :, None, None]
        - xhat * (dgamma / m)[None, :, None, None]
    )
    return dx.astype(xhat.dtype, copy=False), dgamma, dbeta
