"""Backward warping of feature maps along a per-pixel flow field.

Flow has shape (N, 2, H, W): channel 0 is the x offset and channel 1 the
y offset, both in pixels of the feature map being warped. Output pixel
(y, x) samples the input bilinearly at (x + dx, y + dy); source points
outside the image are clamped onto the border.
"""

from __future__ import annotations

import numpy as np

from decoupleseg.errors import DimensionError


def _check(feature: np.ndarray, flow: np.ndarray) -> None:
    if feature.ndim != 4:
        raise DimensionError(f"feature must be (N,C,H,W), got {feature.shape}")
    n, _, h, w = feature.shape
    if flow.shape != (n, 2, h, w):
        raise DimensionError(f"flow must have shape {(n, 2, h, w)}, got {flow.shape}")


def _axis_coords(raw: np.ndarray, size: int):
    """Clamp sample coordinates along one axis and split into cell + fraction."""
    s = np.clip(raw, 0, size - 1)
    i0 = np.minimum(np.floor(s).astype(np.int64), max(size - 2, 0))
    i1 = np.minimum(i0 + 1, size - 1)
    frac = s - i0
    # derivative w.r.t. the offset vanishes only strictly outside the image
    inside = (raw >= 0) & (raw <= size - 1)
    return i0, i1, frac, inside


def sample_points(flow: np.ndarray):
    """Raw (unclamped) source coordinates for every output pixel."""
    _, _, h, w = flow.shape
    sx = np.arange(w, dtype=flow.dtype)[None, None, :] + flow[:, 0]
    sy = np.arange(h, dtype=flow.dtype)[None, :, None] + flow[:, 1]
    return sx, sy


def bilinear_warp(feature: np.ndarray, flow: np.ndarray):
    """Warp ``feature`` by ``flow``; returns ``(out, cache)``."""
    _check(feature, flow)
    n, c, h, w = feature.shape
    sx, sy = sample_points(flow)
    x0, x1, ax, in_x = _axis_coords(sx, w)
    y0, y1, ay, in_y = _axis_coords(sy, h)

    flat = feature.reshape(n, c, h * w)
    idx = [(y0 * w + x0), (y0 * w + x1), (y1 * w + x0), (y1 * w + x1)]
    idx = [i.reshape(n, 1, h * w) for i in idx]
    f00, f01, f10, f11 = (np.take_along_axis(flat, np.broadcast_to(i, (n, c, h * w)), axis=2) for i in idx)

    ax_ = ax.reshape(n, 1, h * w).astype(feature.dtype, copy=False)
    ay_ = ay.reshape(n, 1, h * w).astype(feature.dtype, copy=False)
    top = (1 - ax_) * f00 + ax_ * f01
    bot = (1 - ax_) * f10 + ax_ * f11
    out = ((1 - ay_) * top + ay_ * bot).reshape(n, c, h, w)
    cache = (feature.shape, idx, ax_, ay_, (f00, f01, f10, f11), in_x, in_y)
    return out, cache


def bilinear_warp_backward(dout: np.ndarray, cache, flip_flow_sign: bool = False):
    """Gradients w.r.t. (feature, flow).

    ``flip_flow_sign`` negates the flow gradient; it exists only as a
    deliberately broken variant for negative-control gradient checks.
    """
    shape, idx, ax, ay, (f00, f01, f10, f11), in_x, in_y = cache
    n, c, h, w = shape
    hw = h * w
    g = dout.reshape(n, c, hw)

    weights = [(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay]
    base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * hw
    flat_idx = np.concatenate([np.broadcast_to(base + i, (n, c, hw)).reshape(-1) for i in idx])
    vals = np.concatenate([(g * wt).reshape(-1) for wt in weights])
    dfeat = np.bincount(flat_idx, weights=vals, minlength=n * c * hw).astype(dout.dtype).reshape(shape)

    dsx = np.sum(g * ((1 - ay) * (f01 - f00) + ay * (f11 - f10)), axis=1).reshape(n, h, w)
    dsy = np.sum(g * ((1 - ax) * (f10 - f00) + ax * (f11 - f01)), axis=1).reshape(n, h, w)
    dflow = np.stack([np.where(in_x, dsx, 0), np.where(in_y, dsy, 0)], axis=1).astype(dout.dtype)
    if flip_flow_sign:
        dflow = -dflow
    return dfeat, dflow


def warp_reference(feature: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Per-pixel scalar loop implementation of the same sampling rule."""
    n, c, h, w = feature.shape
    out = np.empty_like(feature)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                px = min(max(x + float(flow[b, 0, y, x]), 0.0), w - 1.0)
                py = min(max(y + float(flow[b, 1, y, x]), 0.0), h - 1.0)
                acc = np.zeros(c)
                for qy in range(h):
                    ky = max(0.0, 1.0 - abs(py - qy))
                    if ky == 0.0:
                        continue
                    for qx in range(w):
                        kx = max(0.0, 1.0 - abs(px - qx))
                        if kx:
                            acc += ky * kx * feature[b, :, qy, qx]
                out[b, :, y, x] = acc
    return out


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_raster(flow: np.ndarray) -> np.ndarray:
    """Colour-wheel rendering: hue encodes direction, saturation magnitude.

    Magnitude is normalised by the per-image maximum, so zero flow renders
    white and opposite directions get complementary hues. Accepts (2,H,W)
    or (N,2,H,W); returns uint8 (H,W,3) or (N,H,W,3).
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim == 3:
        return flow_to_raster(flow[None])[0]
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise DimensionError(f"flow must be (N,2,H,W), got {flow.shape}")
    fx, fy = flow[:, 0], flow[:, 1]
    mag = np.hypot(fx, fy)
    peak = mag.reshape(len(mag), -1).max(axis=1)[:, None, None]
    sat = np.divide(mag, peak, out=np.zeros_like(mag), where=peak > 0)
    hue = np.mod(np.arctan2(fy, fx) / (2 * np.pi), 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
