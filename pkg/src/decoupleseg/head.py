"""Body generation, edge preservation and the decoupled segmentation head.

Parameters live in a :class:`ParamStore` under fixed paths:

* ``bg.enc{i}.w`` (C,1,3,3) / ``bg.enc{i}.b`` - strided depthwise encoder
* ``bg.flow.w`` (2,2C,3,3) / ``bg.flow.b`` - flow predictor
* ``ep.fine.w`` (C_fine,C_f,1,1) / ``ep.fine.b`` - low-level projection
* ``ep.fuse.w`` (C,C+C_fine,1,1) / ``ep.fuse.b`` - fusion conv
* ``head.body``, ``head.final``, ``head.edge`` (``.w``/``.b``) - 1x1 heads

Backward functions accumulate parameter gradients into the store and
return gradients for their tensor inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from decoupleseg import ops
from decoupleseg.errors import DimensionError
from decoupleseg.tensor import ParamStore
from decoupleseg.warp import bilinear_warp, bilinear_warp_backward

# number of forward passes whose additive merge was verified in-op
additive_checks = 0


def _conv(x, store, name, stride=1, padding=0, depthwise=False):
    return ops.conv2d(x, store.value(name + ".w"), store.value(name + ".b"), stride, padding, depthwise)


def _conv_back(dy, cache, store, name):
    dx, dw, db = ops.conv2d_backward(dy, cache)
    store.grad(name + ".w", dw)
    store.grad(name + ".b", db)
    return dx


def encoder_depth(store: ParamStore) -> int:
    depth = 0
    while f"bg.enc{depth}.w" in store:
        depth += 1
    return depth


# ------------------------------------------------------ body generation

def body_generate(f: np.ndarray, store: ParamStore):
    """Warp ``f`` along a flow predicted from ``f`` and its coarse summary.

    Returns ``(f_body, flow, f_low, cache)``.
    """
    n, c, h, w = f.shape
    depth = encoder_depth(store)
    stride = 2 ** depth
    if depth < 1:
        raise DimensionError("body generation needs at least one encoder conv")
    if h % stride or w % stride:
        raise DimensionError(f"feature size {h}x{w} not divisible by encoder stride {stride}")
    if store.value("bg.flow.w").shape[:2] != (2, 2 * c):
        raise DimensionError(f"flow conv expects {store.value('bg.flow.w').shape[1]} input channels, got {2 * c}")

    x = f
    enc_caches = []
    for i in range(depth):
        x, cc = _conv(x, store, f"bg.enc{i}", stride=2, padding=1, depthwise=True)
        enc_caches.append(cc)
    f_low = x
    up, up_cache = ops.bilinear_resize(f_low, h, w, align_corners=False)
    cat, ca = ops.concat_channels(f, up)
    flow, flow_cache = _conv(cat, store, "bg.flow", padding=1)
    f_body, warp_cache = bilinear_warp(f, flow)
    return f_body, flow, f_low, (enc_caches, up_cache, ca, flow_cache, warp_cache)


def body_generate_backward(d_body, d_flow, cache, store: ParamStore, flip_flow_sign=False):
    enc_caches, up_cache, ca, flow_cache, warp_cache = cache
    df, dflow_w = bilinear_warp_backward(d_body, warp_cache, flip_flow_sign=flip_flow_sign)
    if d_flow is not None:
        dflow_w = dflow_w + d_flow
    dcat = _conv_back(dflow_w, flow_cache, store, "bg.flow")
    df_cat, dup = ops.concat_channels_backward(dcat, ca)
    df = df + df_cat
    (dx,) = ops.bilinear_resize_backward(dup, up_cache)
    for i in reversed(range(len(enc_caches))):
        dx = _conv_back(dx, enc_caches[i], store, f"bg.enc{i}")
    return df + dx


# --------------------------------------------------- edge preservation

def edge_preserve(f, f_body, f_fine, store: ParamStore):
    """``fuse(concat(f - f_body, proj(f_fine)))``; ``f_fine=None`` drops the skip."""
    residual, _ = ops.sub(f, f_body)
    fine_cache = None
    if f_fine is not None:
        if f_fine.shape[2:] != f.shape[2:]:
            raise DimensionError(f"f_fine must be resized to {f.shape[2:]} first, got {f_fine.shape[2:]}")
        proj, fine_cache = _conv(f_fine, store, "ep.fine")
        x, ca = ops.concat_channels(residual, proj)
    else:
        x, ca = residual, None
    fuse_w = store.value("ep.fuse.w")
    if fuse_w.shape[1] != x.shape[1] or fuse_w.shape[0] != f.shape[1]:
        raise DimensionError(f"fuse conv {fuse_w.shape} incompatible with {x.shape[1]} inputs / {f.shape[1]} outputs")
    f_edge, fuse_cache = _conv(x, store, "ep.fuse")
    return f_edge, (fine_cache, ca, fuse_cache)


def edge_preserve_backward(d_edge, cache, store: ParamStore):
    """Returns gradients for (f, f_body, f_fine); the last is None without skip."""
    fine_cache, ca, fuse_cache = cache
    dx = _conv_back(d_edge, fuse_cache, store, "ep.fuse")
    dfine = None
    if fine_cache is not None:
        dres, dproj = ops.concat_channels_backward(dx, ca)
        dfine = _conv_back(dproj, fine_cache, store, "ep.fine")
    else:
        dres = dx
    df, dbody = ops.sub_backward(dres, None)
    return df, dbody, dfine


# ------------------------------------------------------ decoupled head

@dataclass
class DecoupleOutput:
    f_body: np.ndarray
    f_edge: np.ndarray
    f_hat: np.ndarray
    flow: np.ndarray
    s_body: np.ndarray
    s_final: np.ndarray
    b_logit: np.ndarray


def decouple_forward(f, f_fine, store: ParamStore):
    """Full head: body generation, edge preservation, additive merge, heads.

    ``f_fine`` is bilinearly resized to the size of ``f`` when needed and may
    be None when the store has no ``ep.fine`` projection.
    """
    f_body, flow, _, bg_cache = body_generate(f, store)
    fine_rs_cache = None
    if f_fine is not None and "ep.fine.w" in store:
        if f_fine.shape[2:] != f.shape[2:]:
            f_fine, fine_rs_cache = ops.bilinear_resize(f_fine, f.shape[2], f.shape[3])
    else:
        f_fine = None
    f_edge, ep_cache = edge_preserve(f, f_body, f_fine, store)
    global additive_checks
    f_hat, _ = ops.add(f_body, f_edge)
    additive_checks += 1
    if not np.array_equal(f_hat, f_body + f_edge):
        raise AssertionError("additive merge violated: f_hat != f_body + f_edge")
    s_body, hb = _conv(f_body, store, "head.body")
    s_final, hf = _conv(f_hat, store, "head.final")
    b_logit, he = _conv(f_edge, store, "head.edge")
    out = DecoupleOutput(f_body, f_edge, f_hat, flow, s_body, s_final, b_logit)
    return out, (bg_cache, fine_rs_cache, ep_cache, hb, hf, he)


def decouple_backward(grads: dict, cache, store: ParamStore, flip_flow_sign=False):
    """Backpropagate gradients of any subset of DecoupleOutput fields.

    Returns ``(df, df_fine)`` where ``df_fine`` matches the *unresized*
    fine input (None when the skip is unused).
    """
    bg_cache, fine_rs_cache, ep_cache, hb, hf, he = cache
    g = lambda k: grads.get(k)  # noqa: E731
    d_hat = g("f_hat")
    if g("s_final") is not None:
        dh = _conv_back(g("s_final"), hf, store, "head.final")
        d_hat = dh if d_hat is None else d_hat + dh
    d_edge = g("f_edge")
    if g("b_logit") is not None:
        de = _conv_back(g("b_logit"), he, store, "head.edge")
        d_edge = de if d_edge is None else d_edge + de
    d_body = g("f_body")
    if g("s_body") is not None:
        db = _conv_back(g("s_body"), hb, store, "head.body")
        d_body = db if d_body is None else d_body + db
    if d_hat is not None:
        d_body = d_hat if d_body is None else d_body + d_hat
        d_edge = d_hat if d_edge is None else d_edge + d_hat

    shape = ep_cache[2][0]  # fuse conv input shape
    n, _, h, w = shape
    c = store.value("ep.fuse.w").shape[0]
    zero = lambda: np.zeros((n, c, h, w), dtype=store.value("ep.fuse.w").dtype)  # noqa: E731
    if d_edge is None:
        d_edge = zero()
    df, db_ep, dfine = edge_preserve_backward(d_edge, ep_cache, store)
    d_body = db_ep if d_body is None else d_body + db_ep
    df = df + body_generate_backward(d_body, g("flow"), bg_cache, store, flip_flow_sign=flip_flow_sign)
    if dfine is not None and fine_rs_cache is not None:
        (dfine,) = ops.bilinear_resize_backward(dfine, fine_rs_cache)
    return df, dfine
