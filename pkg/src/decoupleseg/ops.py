"""Differentiable numpy operators used by the decoupled head.

Every operator is a ``forward(...) -> (out, cache)`` function paired with a
``*_backward(dout, cache)`` function that returns gradients for the
differentiable inputs, in argument order. There is no autodiff graph; the
composite modules chain these by hand.
"""

from __future__ import annotations

import numpy as np

from decoupleseg.errors import DimensionError

LOG_FLOOR = 1e-12


def _require_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (N,C,H,W), got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------- conv2d

def conv2d(x, w, b, stride=1, padding=0, depthwise=False):
    """Cross-correlation of ``x`` with ``w``.

    Regular weights have shape (C_out, C_in, k, k); depthwise weights have
    shape (C, 1, k, k) and filter every channel independently.
    """
    _require_4d(x, "conv2d input")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding!r}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"weight must be (C_out, C_in, k, k), got {w.shape}")
    n, c, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    if depthwise:
        if c_in != 1 or c_out != c:
            raise DimensionError(f"depthwise weight must be ({c}, 1, k, k), got {w.shape}")
    elif c_in != c:
        raise DimensionError(f"weight expects {c_in} input channels, input has {c}")
    if b is not None and b.shape != (c_out,):
        raise DimensionError(f"bias must have shape ({c_out},), got {b.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} with padding {padding} does not fit input {h}x{wd}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1

    if depthwise:
        y = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                y += w[:, 0, i, j][None, :, None, None] * xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
        cols = None
    else:
        patches = [xp[:, :, i : i + span_h : stride, j : j + span_w : stride] for i in range(k) for j in range(k)]
        # (C_in, k*k, N, Ho, Wo) -> (C_in*k*k, N*Ho*Wo), matching w.reshape(C_out, -1)
        cols = np.stack(patches, axis=2).transpose(1, 2, 0, 3, 4).reshape(c * k * k, n * ho * wo)
        y = (w.reshape(c_out, -1) @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
        y = np.ascontiguousarray(y)
    if b is not None:
        y += b[None, :, None, None]
    cache = (x.shape, xp, w, b is not None, stride, padding, depthwise, cols, ho, wo)
    return y, cache


def conv2d_backward(dy, cache):
    """Return (dx, dw, db); db is None when the forward had no bias."""
    x_shape, xp, w, has_bias, stride, padding, depthwise, cols, ho, wo = cache
    n, c, h, wd = x_shape
    c_out, c_in, k, _ = w.shape
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    if depthwise:
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + span_h, stride), slice(j, j + span_w, stride))
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dy, xp[sl])
                dxp[sl] += w[:, 0, i, j][None, :, None, None] * dy
    else:
        dy_mat = dy.transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
        dw = (dy_mat @ cols.T).reshape(w.shape)
        dcols = (w.reshape(c_out, -1).T @ dy_mat).reshape(c, k * k, n, ho, wo).transpose(2, 0, 1, 3, 4)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += dcols[:, :, i * k + j]
    dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def conv2d_flops(in_shape, w_shape, stride, padding, depthwise=False) -> int:
    """Multiply-accumulate count of one conv2d forward (per batch of in_shape)."""
    n, c, h, wd = in_shape
    c_out, c_in, k, _ = w_shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    return int(n * c_out * ho * wo * c_in * k * k)


# ------------------------------------------------------- bilinear resize

def interp_matrix(in_size: int, out_size: int, align_corners: bool) -> np.ndarray:
    """Dense (out_size, in_size) matrix of 1-D linear interpolation weights."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    dst = np.arange(out_size, dtype=np.float64)
    if align_corners:
        src = dst * ((in_size - 1) / (out_size - 1)) if out_size > 1 else np.zeros_like(dst)
    else:
        src = np.maximum((dst + 0.5) * (in_size / out_size) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x, out_h, out_w, align_corners=False):
    _require_4d(x, "bilinear_resize input")
    if int(out_h) < 1 or int(out_w) < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    my = interp_matrix(h, out_h, align_corners).astype(x.dtype)
    mx = interp_matrix(w, out_w, align_corners).astype(x.dtype)
    y = np.matmul(np.matmul(my, x), mx.T)
    return y, (my, mx)


def bilinear_resize_backward(dy, cache):
    my, mx = cache
    return (np.matmul(np.matmul(my.T, dy), mx),)


# -------------------------------------------------------------- concat

def concat_channels(a, b):
    _require_4d(a, "concat operand a")
    _require_4d(b, "concat operand b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"cannot concat {a.shape} with {b.shape}: batch/spatial mismatch")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_channels_backward(dy, ca):
    return np.ascontiguousarray(dy[:, :ca]), np.ascontiguousarray(dy[:, ca:])


# --------------------------------------------------------- elementwise

def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    return a + b, None


def add_backward(dy, cache):
    return dy, dy


def sub(a, b):
    _same_shape(a, b, "sub")
    return a - b, None


def sub_backward(dy, cache):
    return dy, -dy


def mul(a, b):
    _same_shape(a, b, "mul")
    return a * b, (a, b)


def mul_backward(dy, cache):
    a, b = cache
    return dy * b, dy * a


def relu(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dy, mask):
    return (np.where(mask, dy, 0).astype(dy.dtype, copy=False),)


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, y


def sigmoid_backward(dy, y):
    return (dy * y * (1.0 - y),)


def log(x, floor=LOG_FLOOR):
    """Natural log with inputs clamped from below at ``floor``."""
    clamped = x < floor
    y = np.log(np.where(clamped, floor, x))
    return y, (x, clamped)


def log_backward(dy, cache):
    x, clamped = cache
    return (np.where(clamped, 0.0, dy / np.where(clamped, 1.0, x)).astype(dy.dtype, copy=False),)


def softmax_channel(x):
    _require_4d(x, "softmax input")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return y, y


def softmax_channel_backward(dy, y):
    return (y * (dy - (dy * y).sum(axis=1, keepdims=True)),)


def log_softmax_channel(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
