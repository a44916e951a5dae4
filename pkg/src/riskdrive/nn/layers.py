"""Numpy layers with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes ``(dout, cache)``. Images are laid out (N, C, H, W).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    pass


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------- conv


def conv2d_forward(x, w, b):
    """Stride-1 cross-correlation with zero padding that keeps H and W."""
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) input, got shape {x.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("kernels must be square with odd size")
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {cin}")
    n, _, h, wd = x.shape
    p = k // 2
    xp = np.zeros((n, cin, h + 2 * p, wd + 2 * p))
    xp[:, :, p:p + h, p:p + wd] = x
    s = xp.strides
    # (N, H, W, Cin, k, k) view of every patch, copied once by reshape
    win = as_strided(xp, (n, h, wd, cin, k, k), (s[0], s[2], s[3], s[1], s[2], s[3]), writeable=False)
    cols = win.reshape(n * h * wd, cin * k * k)
    out = cols @ w.reshape(cout, -1).T + b
    out = out.reshape(n, h, wd, cout).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, w)


def conv2d_backward(dout, cache):
    cols, xshape, w = cache
    n, cin, h, wd = xshape
    cout, _, k, _ = w.shape
    p = k // 2
    d = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(cout, -1)).reshape(n, h, wd, cin, k, k)
    dcols = np.ascontiguousarray(dcols.transpose(0, 3, 4, 5, 1, 2))  # (N, Cin, k, k, H, W)
    dxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, i, j]
    return dxp[:, :, p:p + h, p:p + wd], dw, db


# ---------------------------------------------------------------- dense


def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# ---------------------------------------------------------------- GRU


def gru_forward(x, h, wx, wh, bx, bh):
    """One GRU step; gates ordered (reset, update, candidate) along the last axis."""
    hs = h.shape[1]
    gx = x @ wx + bx
    gh = h @ wh + bh
    r = sigmoid(gx[:, :hs] + gh[:, :hs])
    z = sigmoid(gx[:, hs:2 * hs] + gh[:, hs:2 * hs])
    n = np.tanh(gx[:, 2 * hs:] + r * gh[:, 2 * hs:])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, gh[:, 2 * hs:], wx, wh)


def gru_backward(dh_new, cache):
    x, h, r, z, n, ghn, wx, wh = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dn_pre = dn * (1.0 - n * n)
    dr = dn_pre * ghn
    dr_pre = dr * r * (1.0 - r)
    dz_pre = dz * z * (1.0 - z)
    dgx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
    dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
    dx = dgx @ wx.T
    dh = dh_new * z + dgh @ wh.T
    return dx, dh, x.T @ dgx, h.T @ dgh, dgx.sum(axis=0), dgh.sum(axis=0)


# ---------------------------------------------------------------- pooling


def global_pool_forward(f):
    """Per-channel max and mean over the spatial axes of (N, C, H, W)."""
    flat = f.reshape(f.shape[0], f.shape[1], -1)
    idx = flat.argmax(axis=2)
    mx = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    return mx, flat.mean(axis=2), (idx, f.shape)


def global_pool_backward(dmx, dav, cache):
    idx, shape = cache
    hw = shape[2] * shape[3]
    dflat = np.repeat((dav / hw)[..., None], hw, axis=2)
    np.add.at(dflat, (np.arange(shape[0])[:, None], np.arange(shape[1])[None, :], idx), dmx)
    return dflat.reshape(shape)


def channel_pool_forward(f):
    """Max and mean across channels, stacked into (N, 2, H, W)."""
    idx = f.argmax(axis=1)
    mx = np.take_along_axis(f, idx[:, None], axis=1)
    return np.concatenate([mx, f.mean(axis=1, keepdims=True)], axis=1), (idx, f.shape)


def channel_pool_backward(dpooled, cache):
    idx, shape = cache
    df = np.repeat(dpooled[:, 1:2] / shape[1], shape[1], axis=1)
    onehot = np.arange(shape[1])[None, :, None, None] == idx[:, None]
    return df + onehot * dpooled[:, 0:1]
