"""Decoupled supervision: body, edge and final losses plus edge ground truth.

Each loss returns its value together with the gradient w.r.t. the logits
it consumes, so callers can feed the result straight into a backward pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from decoupleseg.errors import DimensionError
from decoupleseg.ops import LOG_FLOOR, log_softmax_channel

log = logging.getLogger(__name__)

IGNORE_INDEX = 255
_LOG_FLOOR = math.log(LOG_FLOOR)


@dataclass
class LossConfig:
    lambda_body: float = 1.0
    lambda_edge: float = 1.0
    lambda_final: float = 1.0
    lambda_bce: float = 25.0
    lambda_edge_ce: float = 1.0
    k_ratio: float = 0.10
    t_b: float = 0.8
    relax_radius: int = 2
    edge_radius: int = 2
    weight_mode: str = "uniform"  # or "inverse_freq"
    ohem_norm: str = "selected"  # or "k" for the strict 1/K prefactor
    body_mode: str = "exclude"  # or "relax" (sum of neighbourhood class probabilities)
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not 0 < self.k_ratio <= 1:
            raise ValueError(f"k_ratio must be in (0, 1], got {self.k_ratio}")
        if not 0 < self.t_b < 1:
            raise ValueError(f"t_b must be in (0, 1), got {self.t_b}")
        if self.relax_radius < 1 or self.edge_radius < 1:
            raise ValueError("relax_radius and edge_radius must be >= 1")
        if self.weight_mode not in ("uniform", "inverse_freq"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.ohem_norm not in ("selected", "k"):
            raise ValueError(f"unknown ohem_norm {self.ohem_norm!r}")
        if self.body_mode not in ("exclude", "relax"):
            raise ValueError(f"unknown body_mode {self.body_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    l_body: float
    l_bce: float
    l_edge_ce: float
    l_final: float
    total: float
    selected_count: int
    body_empty: bool = False

    def reconstruct(self, cfg: LossConfig) -> float:
        edge = cfg.lambda_bce * self.l_bce + cfg.lambda_edge_ce * self.l_edge_ce
        return cfg.lambda_body * self.l_body + cfg.lambda_edge * edge + cfg.lambda_final * self.l_final


# ---------------------------------------------------------- label utils

def _as_batch(labels: np.ndarray) -> np.ndarray:
    return labels[None] if labels.ndim == 2 else labels


def align_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resample of an (N,H,W) label map to (N,h,w)."""
    labels = _as_batch(labels)
    H, W = labels.shape[1:]
    if (H, W) == (h, w):
        return labels
    ys = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    return labels[:, ys][:, :, xs]


def _shifted(labels: np.ndarray, dy: int, dx: int, fill: int) -> np.ndarray:
    """labels[y+dy, x+dx] with out-of-image positions set to ``fill``."""
    n, h, w = labels.shape
    out = np.full_like(labels, fill)
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[:, yd, xd] = labels[:, ys, xs]
    return out


def edge_gt_from_labels(labels: np.ndarray, radius: int = 2, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Binary (N,1,H,W) mask of valid pixels within Chebyshev ``radius`` of
    a pixel carrying a different valid label."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    labels = _as_batch(np.asarray(labels))
    valid = labels != ignore_index
    edge = np.zeros(labels.shape, dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            nb = _shifted(labels, dy, dx, ignore_index)
            edge |= (nb != ignore_index) & (nb != labels)
    return (edge & valid).astype(np.uint8)[:, None]


def neighbourhood_classes(labels: np.ndarray, num_classes: int, radius: int,
                          ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """(N,K,H,W) bool: class k occurs within Chebyshev ``radius`` of the pixel."""
    labels = _as_batch(labels)
    present = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nb = _shifted(labels, dy, dx, ignore_index)
            for k in range(num_classes):
                present[:, k] |= nb == k
    return present


def _check_logits(logits: np.ndarray, labels: np.ndarray) -> None:
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")


def pixel_ce(logits: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX):
    """Per-pixel cross entropy (N,H,W) and d(ce)/d(logits) (N,K,H,W).

    Ignored pixels get loss 0 and gradient 0. The log posterior is floored
    at log(1e-12); floored pixels get gradient 0.
    """
    _check_logits(logits, labels)
    n, k, h, w = logits.shape
    valid = labels != ignore_index
    lp = log_softmax_channel(logits)
    tgt = np.where(valid, labels, 0).astype(np.int64)
    onehot = np.arange(k)[None, :, None, None] == tgt[:, None]
    lp_true = np.take_along_axis(lp, tgt[:, None], axis=1)[:, 0]
    floored = lp_true < _LOG_FLOOR
    ce = np.where(valid, -np.maximum(lp_true, _LOG_FLOOR), 0.0)
    grad = np.exp(lp) - onehot
    grad *= (valid & ~floored)[:, None]
    return ce.astype(logits.dtype), grad.astype(logits.dtype), lp_true


# --------------------------------------------------------------- losses

def mean_ce(logits, labels, mask=None, ignore_index=IGNORE_INDEX):
    """Mean CE over valid pixels (optionally restricted to ``mask``).

    Returns ``(loss, grad, count)``; an empty selection gives loss 0.
    """
    ce, g, _ = pixel_ce(logits, labels, ignore_index)
    sel = labels != ignore_index
    if mask is not None:
        sel = sel & mask
    count = int(sel.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits), 0
    loss = float(ce[sel].sum(dtype=np.float64) / count)
    return loss, (g * sel[:, None] / count).astype(logits.dtype), count


def body_relaxation_ce(s_body, labels, edge_mask, ignore_index=IGNORE_INDEX):
    """Mean CE over valid pixels outside the boundary band ``edge_mask``.

    Returns ``(loss, grad, empty)``; ``empty`` flags that no pixel qualified.
    """
    labels = _as_batch(labels)
    interior = edge_mask.reshape(labels.shape) == 0
    loss, grad, count = mean_ce(s_body, labels, interior, ignore_index)
    if count == 0:
        log.warning("body relaxation loss: every valid pixel is in the boundary band")
    return loss, grad, count == 0


def body_label_relaxation(s_body, labels, radius, ignore_index=IGNORE_INDEX):
    """Alternate body loss: -log of the summed probability of every class
    present in the pixel's neighbourhood, averaged over valid pixels."""
    labels = _as_batch(labels)
    _check_logits(s_body, labels)
    n, k, h, w = s_body.shape
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(s_body), True
    allowed = neighbourhood_classes(labels, k, radius, ignore_index)
    p = np.exp(log_softmax_channel(s_body))
    ps = np.maximum((p * allowed).sum(axis=1), LOG_FLOOR)
    loss = float(np.where(valid, -np.log(ps), 0.0).sum(dtype=np.float64) / count)
    grad = p - p * allowed / ps[:, None]
    grad *= valid[:, None] / count
    return loss, grad.astype(s_body.dtype), False


def balanced_bce(b_logit, edge_gt, valid=None):
    """Class-balanced binary cross entropy on ``sigmoid(b_logit)``.

    Each present class gets weight ``N / (n_present * N_class)``, so every
    present class contributes equally and the loss of all-zero logits is
    ln 2 irrespective of imbalance. Returns ``(loss, grad)``.
    """
    if b_logit.shape != edge_gt.shape:
        raise DimensionError(f"b_logit {b_logit.shape} vs edge_gt {edge_gt.shape}")
    y = edge_gt.astype(b_logit.dtype)
    valid = np.ones(b_logit.shape, dtype=bool) if valid is None else valid.reshape(b_logit.shape)
    n_tot = int(valid.sum())
    if n_tot == 0:
        return 0.0, np.zeros_like(b_logit)
    n_pos = int((valid & (y > 0.5)).sum())
    n_neg = n_tot - n_pos
    present = (n_pos > 0) + (n_neg > 0)
    w_pos = n_tot / (present * n_pos) if n_pos else 0.0
    w_neg = n_tot / (present * n_neg) if n_neg else 0.0
    wt = np.where(y > 0.5, w_pos, w_neg) * valid
    z = b_logit
    bce = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float((wt * bce).sum(dtype=np.float64) / n_tot)
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    grad = wt * (sig - y) / n_tot
    return loss, grad.astype(b_logit.dtype)


def ohem_budget(n_valid: int, k_ratio: float) -> int:
    return max(1, int(math.floor(k_ratio * n_valid + 0.5)))


def _class_weights(labels_img, valid_img, num_classes):
    counts = np.bincount(labels_img[valid_img].astype(np.int64), minlength=num_classes)
    present = int((counts > 0).sum())
    per_class = np.divide(valid_img.sum(), present * counts, out=np.zeros(num_classes),
                          where=counts > 0)
    return per_class[np.where(valid_img, labels_img, 0).astype(np.int64)]


def edge_prior_ohem_ce(s_final, labels, b_logit, cfg: LossConfig, return_selection=False):
    """Hard-example CE restricted to predicted boundary pixels.

    Per image, candidates are valid pixels with ``sigmoid(b) > t_b``; the
    ``K = round(k_ratio * n_valid)`` candidates with the smallest posterior
    for their true class are kept (ties broken by pixel index). The edge
    prior is a hard gate: no gradient reaches ``b_logit`` through this loss.

    Returns ``(loss, selected_count, grad)`` and, with ``return_selection``,
    a boolean (N,H,W) mask of the chosen pixels.
    """
    labels = _as_batch(labels)
    _check_logits(s_final, labels)
    n, k, h, w = s_final.shape
    ce, g, lp_true = pixel_ce(s_final, labels, cfg.ignore_index)
    valid = labels != cfg.ignore_index
    gate = 0.5 * (1.0 + np.tanh(0.5 * b_logit.reshape(n, h, w))) > cfg.t_b
    chosen = np.zeros((n, h * w), dtype=bool)
    weights = np.ones((n, h * w))
    norm = 0
    for i in range(n):
        v = valid[i].reshape(-1)
        cand = np.flatnonzero(v & gate[i].reshape(-1))
        budget = ohem_budget(int(v.sum()), cfg.k_ratio) if v.any() else 0
        order = np.argsort(lp_true[i].reshape(-1)[cand], kind="stable")
        chosen[i, cand[order[:budget]]] = True
        if cfg.weight_mode == "inverse_freq":
            weights[i] = _class_weights(labels[i], valid[i], k).reshape(-1)
        norm += budget if cfg.ohem_norm == "k" else min(budget, cand.size)
    chosen = chosen.reshape(n, h, w)
    weights = weights.reshape(n, h, w)
    m = int(chosen.sum())
    if norm == 0 or m == 0:
        loss, grad = 0.0, np.zeros_like(s_final)
    else:
        loss = math.fsum((weights[chosen] * ce[chosen].astype(np.float64)).tolist()) / norm
        grad = (g * (chosen * weights / norm)[:, None]).astype(s_final.dtype)
    if return_selection:
        return loss, m, grad, chosen
    return loss, m, grad


def total_loss(out, labels, cfg: LossConfig, ignore_index: int | None = None):
    """Weighted sum of body, edge and final losses.

    ``out`` carries ``s_final`` and optionally ``s_body`` / ``b_logit``
    (missing heads contribute zero). Labels are nearest-resampled to the
    logit resolution. Returns ``(LossBreakdown, grads)`` with ``grads``
    keyed by ``s_body``, ``s_final``, ``b_logit``.
    """
    ignore = cfg.ignore_index if ignore_index is None else ignore_index
    s_final = out.s_final
    lab = align_labels(np.asarray(labels), *s_final.shape[2:])
    grads = {}
    l_body = l_bce = l_ce = 0.0
    m = 0
    body_empty = False

    l_final, g_final, _ = mean_ce(s_final, lab, None, ignore)
    grads["s_final"] = cfg.lambda_final * g_final
    # accumulated term by term; LossBreakdown.reconstruct recomputes it independently
    total = cfg.lambda_final * l_final

    s_body = getattr(out, "s_body", None)
    if s_body is not None and cfg.lambda_body != 0:
        if cfg.body_mode == "exclude":
            band = edge_gt_from_labels(lab, cfg.relax_radius, ignore)
            l_body, g_body, body_empty = body_relaxation_ce(s_body, lab, band, ignore)
        else:
            l_body, g_body, body_empty = body_label_relaxation(s_body, lab, cfg.relax_radius, ignore)
        grads["s_body"] = cfg.lambda_body * g_body
        total += cfg.lambda_body * l_body

    b_logit = getattr(out, "b_logit", None)
    if b_logit is not None and cfg.lambda_edge != 0:
        edge = edge_gt_from_labels(lab, cfg.edge_radius, ignore)
        if cfg.lambda_bce != 0:
            l_bce, g_bce = balanced_bce(b_logit, edge, (lab != ignore)[:, None])
            grads["b_logit"] = cfg.lambda_edge * cfg.lambda_bce * g_bce
            total += cfg.lambda_edge * cfg.lambda_bce * l_bce
        if cfg.lambda_edge_ce != 0:
            l_ce, m, g_ce = edge_prior_ohem_ce(s_final, lab, b_logit, cfg)
            grads["s_final"] = grads["s_final"] + cfg.lambda_edge * cfg.lambda_edge_ce * g_ce
            total += cfg.lambda_edge * cfg.lambda_edge_ce * l_ce

    return LossBreakdown(l_body, l_bce, l_ce, l_final, float(total), m, body_empty), grads
