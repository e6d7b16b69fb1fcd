"""Toy backbone plus decoupled head, wired into a trainable network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from decoupleseg import ops
from decoupleseg.errors import DimensionError
from decoupleseg.head import DecoupleOutput, decouple_backward, decouple_forward
from decoupleseg.tensor import ParamStore

MODES = ("baseline", "decoupled")


@dataclass
class ModelConfig:
    in_channels: int = 3
    channels: int = 32  # C, width of the feature fed to the head
    fine_channels: int = 24  # C_f, width of the stride-2 backbone tap
    fine_proj: int = 8  # C_fine, projected width in edge preservation
    num_classes: int = 5
    encoder_depth: int = 2
    use_fine: bool = True
    mode: str = "decoupled"
    upsample_logits: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.encoder_depth <= 4:
            raise ValueError("encoder_depth must be between 1 and 4")

    def to_dict(self) -> dict:
        return asdict(self)


def kaiming_uniform(rng: np.random.Generator, shape, depthwise=False) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    c, cf, k = cfg.channels, cfg.fine_channels, cfg.num_classes

    def conv(name, c_out, c_in, ksize):
        store.add(name + ".w", kaiming_uniform(rng, (c_out, c_in, ksize, ksize)).astype(dtype))
        store.add(name + ".b", np.zeros(c_out, dtype=dtype))

    conv("bb.conv1", cf, cfg.in_channels, 3)
    conv("bb.conv2", cf, cf, 3)
    conv("bb.conv3", c, cf, 3)
    conv("bb.conv4", c, c, 3)
    if cfg.mode == "decoupled":
        for i in range(cfg.encoder_depth):
            conv(f"bg.enc{i}", c, 1, 3)
        conv("bg.flow", 2, 2 * c, 3)
        if cfg.use_fine:
            conv("ep.fine", cfg.fine_proj, cf, 1)
            conv("ep.fuse", c, c + cfg.fine_proj, 1)
        else:
            conv("ep.fuse", c, c, 1)
        conv("head.body", k, c, 1)
        conv("head.edge", 1, c, 1)
    conv("head.final", k, c, 1)
    return store


# ---------------------------------------------------------- backbone

_BACKBONE = (("bb.conv1", 2), ("bb.conv2", 1), ("bb.conv3", 2), ("bb.conv4", 1))


def toy_backbone(image: np.ndarray, store: ParamStore):
    """Two conv-relu stages of total stride 4; returns ``(f, f_fine, cache)``.

    ``f_fine`` is tapped after the first (stride-2) stage.
    """
    n, _, h, w = image.shape
    if h % 4 or w % 4:
        raise DimensionError(f"image size {h}x{w} must be divisible by 4")
    x = image
    caches = []
    f_fine = None
    for name, stride in _BACKBONE:
        x, cc = ops.conv2d(x, store.value(name + ".w"), store.value(name + ".b"), stride, 1)
        x, rc = ops.relu(x)
        caches.append((cc, rc))
        if name == "bb.conv2":
            f_fine = x
    return x, f_fine, caches


def toy_backbone_backward(df, dfine, caches, store: ParamStore):
    dx = df
    for (name, _), (cc, rc) in zip(reversed(_BACKBONE), reversed(caches)):
        if name == "bb.conv2" and dfine is not None:
            dx = dx + dfine
        (dx,) = ops.relu_backward(dx, rc)
        dx, dw, db = ops.conv2d_backward(dx, cc)
        store.grad(name + ".w", dw)
        store.grad(name + ".b", db)
    return dx


# ------------------------------------------------------------ network

@dataclass
class NetOutput:
    """Logits at label resolution plus the head internals (None in baseline)."""

    s_final: np.ndarray
    s_body: np.ndarray | None = None
    b_logit: np.ndarray | None = None
    head: DecoupleOutput | None = None


class SegNet:
    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "SegNet":
        return cls(cfg, init_params(cfg, seed, dtype))

    def _up(self, x, h, w):
        if not self.cfg.upsample_logits or x.shape[2:] == (h, w):
            return x, None
        return ops.bilinear_resize(x, h, w)

    def _up_back(self, d, cache):
        return d if cache is None else ops.bilinear_resize_backward(d, cache)[0]

    def forward(self, image: np.ndarray):
        h, w = image.shape[2:]
        f, f_fine, bb_cache = toy_backbone(image, self.store)
        if self.cfg.mode == "baseline":
            s, hc = ops.conv2d(f, self.store.value("head.final.w"), self.store.value("head.final.b"))
            s_up, uc = self._up(s, h, w)
            return NetOutput(s_up), ("baseline", bb_cache, hc, uc)
        head, hcache = decouple_forward(f, f_fine if self.cfg.use_fine else None, self.store)
        ups = [self._up(x, h, w) for x in (head.s_final, head.s_body, head.b_logit)]
        out = NetOutput(ups[0][0], ups[1][0], ups[2][0], head)
        return out, ("decoupled", bb_cache, hcache, [u[1] for u in ups])

    def backward(self, grads: dict, cache) -> np.ndarray:
        """Accumulate parameter gradients from logit gradients; returns d(image)."""
        kind, bb_cache = cache[0], cache[1]
        if kind == "baseline":
            _, _, hc, uc = cache
            d = self._up_back(grads["s_final"], uc)
            df, dw, db = ops.conv2d_backward(d, hc)
            self.store.grad("head.final.w", dw)
            self.store.grad("head.final.b", db)
            return toy_backbone_backward(df, None, bb_cache, self.store)
        _, _, hcache, ucs = cache
        hg = {}
        for key, uc in zip(("s_final", "s_body", "b_logit"), ucs):
            if grads.get(key) is not None:
                hg[key] = self._up_back(grads[key], uc)
        df, dfine = decouple_backward(hg, hcache, self.store)
        return toy_backbone_backward(df, dfine, bb_cache, self.store)

    def predict(self, image: np.ndarray) -> np.ndarray:
        out, _ = self.forward(image)
        return out.s_final.argmax(axis=1).astype(np.uint8)


# -------------------------------------------------------------- FLOPs

def count_flops(cfg: ModelConfig, image_hw: tuple[int, int] = (64, 64)) -> dict:
    """Multiply-accumulate counts per image, split into backbone and BG+EP."""
    h, w = image_hw
    c, cf = cfg.channels, cfg.fine_channels
    conv = ops.conv2d_flops
    backbone = (
        conv((1, cfg.in_channels, h, w), (cf, cfg.in_channels, 3, 3), 2, 1)
        + conv((1, cf, h // 2, w // 2), (cf, cf, 3, 3), 1, 1)
        + conv((1, cf, h // 2, w // 2), (c, cf, 3, 3), 2, 1)
        + conv((1, c, h // 4, w // 4), (c, c, 3, 3), 1, 1)
    )
    fh, fw = h // 4, w // 4
    bg = 0
    sh, sw = fh, fw
    for _ in range(cfg.encoder_depth):
        bg += conv((1, c, sh, sw), (c, 1, 3, 3), 2, 1, depthwise=True)
        sh, sw = (sh + 1) // 2, (sw + 1) // 2
    bg += 4 * c * fh * fw  # bilinear upsample of the coarse map
    bg += conv((1, 2 * c, fh, fw), (2, 2 * c, 3, 3), 1, 1)
    bg += 4 * c * fh * fw  # warp
    ep = c * fh * fw  # residual subtraction
    if cfg.use_fine:
        ep += 4 * cf * fh * fw  # resize of the fine tap
        ep += conv((1, cf, fh, fw), (cfg.fine_proj, cf, 1, 1), 1, 0)
        ep += conv((1, c + cfg.fine_proj, fh, fw), (c, c + cfg.fine_proj, 1, 1), 1, 0)
    else:
        ep += conv((1, c, fh, fw), (c, c, 1, 1), 1, 0)
    ep += c * fh * fw  # additive merge
    return {"backbone": backbone, "body_generation": bg, "edge_preservation": ep,
            "ratio": (bg + ep) / backbone}
