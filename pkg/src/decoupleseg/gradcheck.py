"""Central finite-difference gradient checking at 64-bit precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[int, int] | None = None  # (input index, flat index)
    failure: str | None = None


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    loss_fn: Callable[[], float],
    inputs: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    kink_aware: bool = False,
) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``loss_fn`` takes no arguments and reads ``inputs`` by reference; each
    input is perturbed in place and restored. With ``max_coords`` set, that
    many scalars are drawn uniformly (without replacement) from all inputs
    instead of checking every one.

    With ``kink_aware``, a coordinate whose central difference disagrees is
    re-tested against second-order one-sided differences taken separately
    on each side; it passes if either side agrees. This accepts points where
    the step straddles a kink (ReLU, bilinear cell edge, hard selection)
    while still rejecting gradients that match neither side.
    """
    for i, x in enumerate(inputs):
        if x.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs; input {i} is {x.dtype}")
        if analytic[i].shape != x.shape:
            raise ValueError(f"analytic grad {i} has shape {analytic[i].shape}, input has {x.shape}")

    coords = [(i, j) for i, x in enumerate(inputs) for j in range(x.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[p] for p in pick]

    f0 = float(loss_fn()) if kink_aware else None
    worst_err, worst = 0.0, None
    for i, j in coords:
        flat = inputs[i].reshape(-1)
        a = float(analytic[i].reshape(-1)[j])
        orig = flat[j]
        flat[j] = orig + eps
        fp = float(loss_fn())
        flat[j] = orig - eps
        fm = float(loss_fn())
        flat[j] = orig
        numeric = (fp - fm) / (2 * eps)
        if not (np.isfinite(a) and np.isfinite(numeric)):
            return GradCheckReport(np.inf, False, len(coords), (i, j),
                                   f"non-finite gradient at input {i}, index {j}")
        e = rel_err(a, numeric)
        if kink_aware and e >= tol:
            flat[j] = orig + eps / 2
            fp2 = float(loss_fn())
            flat[j] = orig - eps / 2
            fm2 = float(loss_fn())
            flat[j] = orig
            # Richardson: 2 D(h/2) - D(h) cancels the O(h) term of a one-sided difference
            right = 2 * (fp2 - f0) / (eps / 2) - (fp - f0) / eps
            left = 2 * (f0 - fm2) / (eps / 2) - (f0 - fm) / eps
            e = min(e, rel_err(a, right), rel_err(a, left))
        if e > worst_err or worst is None:
            worst_err, worst = e, (i, j)
    return GradCheckReport(worst_err, worst_err < tol, len(coords), worst)


def check_op(
    forward: Callable,
    backward: Callable,
    inputs: Sequence[np.ndarray],
    diff: Sequence[int] | None = None,
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    kink_aware: bool = False,
    **kwargs,
) -> GradCheckReport:
    """Grad-check an operator pair on the scalar ``sum(r * forward(*inputs))``.

    ``r`` is a fixed random projection with entries in +-[0.5, 1.5], so
    every output element contributes and no gradient is accidentally tiny.
    ``diff`` lists which positional inputs to check (default: all); it must
    match the order of the gradients ``backward`` returns.
    """
    diff = list(range(len(inputs))) if diff is None else list(diff)
    out, cache = forward(*inputs, **kwargs)
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    grads = backward(r, cache)
    grads = [grads[k] for k in range(len(diff))]

    def loss():
        return float(np.sum(r * forward(*inputs, **kwargs)[0]))

    return grad_check(loss, [inputs[k] for k in diff], grads, eps=eps, tol=tol, kink_aware=kink_aware)
