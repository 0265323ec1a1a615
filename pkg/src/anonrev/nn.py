"""Minimal CNN building blocks (forward and backward) for the autoencoder.

All arrays are float64, laid out (N, C, H, W).  Backward passes are derived by
hand; the test suite validates every one of them against central differences.
"""

from __future__ import annotations

import numpy as np


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather sliding windows of a padded input into (N, C, KH, KW, OH, OW)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def _col2im(
    cols: np.ndarray, hp: int, wp: int, stride: int
) -> np.ndarray:
    """Scatter-add (N, C, KH, KW, OH, OW) windows back onto a padded canvas."""
    n, c, kh, kw, oh, ow = cols.shape
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 1):
    """y[n,o] = sum_c w[o,c] * x[n,c] + b[o]; returns (y, cache)."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert ci == c, (ci, c)
    xp = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)]) if pad else x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    y = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # (N, OH, OW, Co)
    y = np.moveaxis(y, -1, 1) + b[None, :, None, None]
    return y, (cols, x.shape, w, stride, pad)


def conv2d_backward(gy: np.ndarray, cache):
    cols, x_shape, w, stride, pad = cache
    n, c, h, wd = x_shape
    gb = gy.sum(axis=(0, 2, 3))
    gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))  # (Co, Ci, KH, KW)
    gcols = np.tensordot(gy, w, axes=([1], [0]))  # (N, OH, OW, Ci, KH, KW)
    gcols = np.moveaxis(gcols, (3, 4, 5), (1, 2, 3))
    gxp = _col2im(gcols, h + 2 * pad, wd + 2 * pad, stride)
    gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
    return gx, gw, gb


def tconv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2, pad: int = 1):
    """Transposed convolution (the adjoint of conv2d); w is (Ci, Co, KH, KW).

    With stride 2, kernel 4, pad 1 the spatial size exactly doubles.
    """
    n, ci, h, wd = x.shape
    wci, co, kh, kw = w.shape
    assert wci == ci, (wci, ci)
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    cols = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, Co, KH, KW)
    cols = np.moveaxis(cols, (3, 4, 5), (1, 2, 3))  # (N, Co, KH, KW, H, W)
    yp = _col2im(cols, oh + 2 * pad, ow + 2 * pad, stride)
    y = yp[:, :, pad : pad + oh, pad : pad + ow] if pad else yp
    return y + b[None, :, None, None], (x, w, stride, pad, (oh, ow))


def tconv2d_backward(gy: np.ndarray, cache):
    x, w, stride, pad, _ = cache
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    gb = gy.sum(axis=(0, 2, 3))
    gyp = np.pad(gy, [(0, 0), (0, 0), (pad, pad), (pad, pad)]) if pad else gy
    gycols = _im2col(gyp, kh, kw, stride, h, wd)  # (N, Co, KH, KW, H, W)
    gx = np.tensordot(gycols, w, axes=([1, 2, 3], [1, 2, 3]))  # (N, H, W, Ci)
    gx = np.moveaxis(gx, -1, 1)
    gw = np.tensordot(x, gycols, axes=([0, 2, 3], [0, 4, 5]))  # (Ci, Co, KH, KW)
    return gx, gw, gb


def maxpool2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(gy: np.ndarray, cache):
    idx, (n, c, h, w) = cache
    g = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(n, c, h, w)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, (x, w)


def linear_backward(gy: np.ndarray, cache):
    x, w = cache
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def leaky_relu_forward(x: np.ndarray, slope: float):
    return np.where(x >= 0.0, x, slope * x), (x >= 0.0, slope)


def leaky_relu_backward(gy: np.ndarray, cache):
    positive, slope = cache
    return np.where(positive, gy, slope * gy)


def sigmoid_forward(x: np.ndarray):
    y = np.empty_like(x)
    pos = x >= 0.0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(gy: np.ndarray, y: np.ndarray):
    return gy * y * (1.0 - y)
