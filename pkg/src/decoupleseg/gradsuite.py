"""Random-instance gradient checks for every differentiable piece."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from decoupleseg import ops
from decoupleseg.gradcheck import GradCheckReport, check_op, grad_check
from decoupleseg.head import (body_generate, body_generate_backward, decouple_backward,
                              decouple_forward, edge_preserve, edge_preserve_backward)
from decoupleseg.model import ModelConfig, SegNet, init_params, toy_backbone, toy_backbone_backward
from decoupleseg.supervision import LossConfig, total_loss
from decoupleseg.warp import bilinear_warp, bilinear_warp_backward

# composite checks sample this many scalars per instance instead of all
COMPOSITE_COORDS = 48
LOSS_EPS = 1e-4


@dataclass
class SuiteRow:
    name: str
    instances: int
    max_rel_err: float
    passed: bool
    seconds: float


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _fractional_flow(rng, shape, spread=2):
    """Offsets whose fractional part stays clear of the bilinear kinks."""
    return rng.integers(-spread, spread + 1, size=shape) + rng.uniform(0.05, 0.95, size=shape)


def _store_check(rng, store, loss_and_grads, extra_inputs=(), max_coords=COMPOSITE_COORDS, eps=1e-5,
                 kink_aware=False):
    """Grad-check a scalar w.r.t. every parameter in ``store`` plus ``extra_inputs``.

    ``loss_and_grads()`` returns ``(loss, [grads of extra_inputs])`` and
    leaves parameter gradients accumulated in ``store``.
    """
    store.zero_grad()
    _, extra_grads = loss_and_grads()
    names = store.names()
    inputs = [store.value(n) for n in names] + list(extra_inputs)
    analytic = [store[n].grad.copy() for n in names] + list(extra_grads)
    return grad_check(lambda: loss_and_grads(backward=False)[0], inputs, analytic,
                      eps=eps, max_coords=max_coords, rng=rng, kink_aware=kink_aware)


def _small_cfg(**kw) -> ModelConfig:
    base = dict(in_channels=3, channels=4, fine_channels=3, fine_proj=2, num_classes=3,
                encoder_depth=2, upsample_logits=True)
    base.update(kw)
    return ModelConfig(**base)


# ------------------------------------------------------------- entries

def _conv(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    return check_op(ops.conv2d, ops.conv2d_backward, [x, w, b], seed=seed, kink_aware=kink_aware, stride=1, padding=1)


def _conv_strided(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    return check_op(ops.conv2d, ops.conv2d_backward, [x, w, b], seed=seed, kink_aware=kink_aware, stride=2, padding=1)


def _conv_depthwise(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((4, 1, 3, 3)), rng.standard_normal(4)
    return check_op(ops.conv2d, ops.conv2d_backward, [x, w, b], seed=seed, kink_aware=kink_aware, stride=2, padding=1,
                    depthwise=True)


def _resize(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 3, 4))
    align = bool(seed % 2)
    return check_op(ops.bilinear_resize, ops.bilinear_resize_backward, [x], seed=seed, kink_aware=kink_aware,
                    out_h=5, out_w=7, align_corners=align)


def _concat(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    return check_op(ops.concat_channels, ops.concat_channels_backward, [a, b], seed=seed, kink_aware=kink_aware)


def _binary(fwd, bwd):
    def entry(seed, kink_aware=False, **_):
        rng = np.random.default_rng(seed)
        a, b = _away_from_zero(rng, (2, 3, 3, 3)), _away_from_zero(rng, (2, 3, 3, 3))
        return check_op(fwd, bwd, [a, b], seed=seed, kink_aware=kink_aware)
    return entry


def _relu(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    return check_op(ops.relu, ops.relu_backward, [_away_from_zero(rng, (2, 3, 4, 4))], seed=seed, kink_aware=kink_aware)


def _sigmoid(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    return check_op(ops.sigmoid, ops.sigmoid_backward, [rng.standard_normal((2, 3, 4, 4)) * 3], seed=seed, kink_aware=kink_aware)


def _log(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    return check_op(ops.log, ops.log_backward, [rng.uniform(0.2, 3.0, size=(2, 3, 4, 4))], seed=seed, kink_aware=kink_aware)


def _softmax(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    return check_op(ops.softmax_channel, ops.softmax_channel_backward,
                    [rng.standard_normal((2, 4, 3, 3))], seed=seed)


def _warp(seed, inject_bug=False, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    feat = rng.standard_normal((2, 3, 5, 6))
    flow = _fractional_flow(rng, (2, 2, 5, 6))
    bwd = (lambda d, c: bilinear_warp_backward(d, c, flip_flow_sign=True)) if inject_bug else bilinear_warp_backward
    return check_op(bilinear_warp, bwd, [feat, flow], seed=seed, kink_aware=kink_aware)


def _body_generate(seed, inject_bug=False, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    cfg = _small_cfg(channels=4)
    store = init_params(cfg, seed, np.float64)
    store.value("bg.flow.w")[...] *= 2.0  # flows of a few pixels
    f = rng.standard_normal((1, 4, 8, 8))
    r_body, r_flow = rng.standard_normal((1, 4, 8, 8)), rng.standard_normal((1, 2, 8, 8))

    def run(backward=True):
        f_body, flow, _, cache = body_generate(f, store)
        loss = float(np.sum(r_body * f_body) + np.sum(r_flow * flow))
        if not backward:
            return loss, None
        df = body_generate_backward(r_body, r_flow, cache, store, flip_flow_sign=inject_bug)
        return loss, [df]

    return _store_check(rng, store, run, [f], kink_aware=kink_aware)


def _edge_preserve(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    store = init_params(_small_cfg(), seed, np.float64)
    f, f_body = rng.standard_normal((1, 4, 8, 8)), rng.standard_normal((1, 4, 8, 8))
    f_fine = rng.standard_normal((1, 3, 8, 8))
    r = rng.standard_normal((1, 4, 8, 8))

    def run(backward=True):
        f_edge, cache = edge_preserve(f, f_body, f_fine, store)
        loss = float(np.sum(r * f_edge))
        if not backward:
            return loss, None
        return loss, list(edge_preserve_backward(r, cache, store))

    return _store_check(rng, store, run, [f, f_body, f_fine], kink_aware=kink_aware)


def _decouple(seed, inject_bug=False, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    store = init_params(_small_cfg(), seed, np.float64)
    f = rng.standard_normal((1, 4, 8, 8))
    f_fine = rng.standard_normal((1, 3, 16, 16))
    keys = ("f_body", "f_edge", "f_hat", "flow", "s_body", "s_final", "b_logit")
    out0, _ = decouple_forward(f, f_fine, store)
    r = {k: rng.standard_normal(getattr(out0, k).shape) for k in keys}

    def run(backward=True):
        out, cache = decouple_forward(f, f_fine, store)
        loss = float(sum(np.sum(r[k] * getattr(out, k)) for k in keys))
        if not backward:
            return loss, None
        return loss, list(decouple_backward(r, cache, store, flip_flow_sign=inject_bug))

    return _store_check(rng, store, run, [f, f_fine], kink_aware=kink_aware)


def _backbone(seed, kink_aware=False, **_):
    rng = np.random.default_rng(seed)
    cfg = _small_cfg(mode="baseline")
    store = init_params(cfg, seed, np.float64)
    image = rng.standard_normal((1, 3, 8, 8))
    r_f, r_fine = rng.standard_normal((1, 4, 2, 2)), rng.standard_normal((1, 3, 4, 4))

    def run(backward=True):
        f, f_fine, cache = toy_backbone(image, store)
        loss = float(np.sum(r_f * f) + np.sum(r_fine * f_fine))
        if not backward:
            return loss, None
        return loss, [toy_backbone_backward(r_f, r_fine, cache, store)]

    return _store_check(rng, store, run, [image], kink_aware=kink_aware)


def loss_instance(seed: int):
    """Random 1x3x8x8 scene, block labels with an ignore patch, small net."""
    rng = np.random.default_rng(seed)
    cfg = _small_cfg(encoder_depth=1)
    net = SegNet.create(cfg, seed=seed, dtype=np.float64)
    net.store.value("head.edge.b")[...] = 1.5  # some pixels pass the t_b gate
    image = rng.standard_normal((1, 3, 8, 8))
    labels = np.repeat(np.repeat(rng.integers(0, 3, size=(1, 4, 4)), 2, axis=1), 2, axis=2).astype(np.uint8)
    labels[0, rng.integers(0, 8), rng.integers(0, 8)] = 255
    lcfg = LossConfig(relax_radius=1, edge_radius=1, k_ratio=0.25)
    return net, image, labels, lcfg


def _total_loss(seed, inject_bug=False, kink_aware=False, **_):
    net, image, labels, lcfg = loss_instance(seed)
    rng = np.random.default_rng(seed + 1)

    def run(backward=True):
        out, cache = net.forward(image)
        br, grads = total_loss(out, labels, lcfg)
        if not backward:
            return br.total, None
        if inject_bug:
            kind, bb, hcache, ucs = cache
            grads = {k: net._up_back(grads[k], uc) for k, uc in zip(("s_final", "s_body", "b_logit"), ucs)}
            df, dfine = decouple_backward(grads, hcache, net.store, flip_flow_sign=True)
            return br.total, [toy_backbone_backward(df, dfine, bb, net.store)]
        return br.total, [net.backward(grads, cache)]

    # the loss is O(10) and some parameter gradients are O(1e-6); a 1e-5
    # step leaves roundoff of the same order as the tolerance
    return _store_check(rng, net.store, run, [image], eps=LOSS_EPS, kink_aware=kink_aware)


SUITE: dict[str, Callable[..., GradCheckReport]] = {
    "conv2d": _conv,
    "conv2d_strided": _conv_strided,
    "conv2d_depthwise": _conv_depthwise,
    "bilinear_resize": _resize,
    "concat_channels": _concat,
    "add": _binary(ops.add, ops.add_backward),
    "sub": _binary(ops.sub, ops.sub_backward),
    "mul": _binary(ops.mul, ops.mul_backward),
    "relu": _relu,
    "sigmoid": _sigmoid,
    "log": _log,
    "softmax_channel": _softmax,
    "bilinear_warp": _warp,
    "body_generate": _body_generate,
    "edge_preserve": _edge_preserve,
    "decouple_forward": _decouple,
    "toy_backbone": _backbone,
    "total_loss": _total_loss,
}


def run_suite(seed: int = 0, instances: int = 100, tol: float = 1e-4, inject_bug: bool = False,
              names=None, kink_aware: bool = False) -> list[SuiteRow]:
    rows = []
    for name in names or SUITE:
        entry = SUITE[name]
        t0 = time.perf_counter()
        worst = 0.0
        ok = True
        for i in range(instances):
            rep = entry(seed * 100003 + i, inject_bug=inject_bug, kink_aware=kink_aware)
            worst = max(worst, rep.max_rel_err)
            ok = ok and rep.max_rel_err < tol
        rows.append(SuiteRow(name, instances, worst, ok, time.perf_counter() - t0))
    return rows
