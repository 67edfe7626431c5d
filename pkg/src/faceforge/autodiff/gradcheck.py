"""Finite-difference verification of tape gradients.

The oracle re-runs the function under test in float64 (both for the
analytic tape pass and for the central-difference probes), which keeps the
comparison noise near machine precision instead of float32 rounding.
"""

from __future__ import annotations

import numpy as np

from .tensor import AutodiffError, Tape, Tensor


def grad_check(f, points, h: float = 1e-3, max_coords: int | None = None, rng=None) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    Args:
        f: callable taking ``len(points)`` Tensors and returning a scalar Tensor.
        points: a Tensor or sequence of Tensors at which to check.
        h: central-difference step.
        max_coords: if set, probe at most this many randomly chosen coordinates
            per tensor instead of all of them (for large weight tensors).
        rng: numpy Generator used to choose sampled coordinates.

    Returns:
        max over probed coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if isinstance(points, Tensor):
        points = [points]
    pts = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in points]

    with Tape() as tape:
        out = f(*pts)
    if out.size != 1:
        raise AutodiffError(f"grad_check: f must return a scalar, got shape {out.shape}")
    tape.backward(out)
    analytic = [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in pts
    ]

    def eval_at(idx, coord, value):
        probes = []
        for i, p in enumerate(pts):
            data = p.data.copy()
            if i == idx:
                data.reshape(-1)[coord] = value
            probes.append(Tensor(data))
        val = f(*probes)
        v = val.item()
        if not np.isfinite(v):
            raise AutodiffError("grad_check: non-finite function value at probe point")
        return v

    worst = 0.0
    for i, p in enumerate(pts):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic[i].reshape(-1)
        for c in coords:
            x0 = flat[c]
            f_plus = eval_at(i, c, x0 + h)
            f_minus = eval_at(i, c, x0 - h)
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(a_flat[c] - numeric) / max(1.0, abs(a_flat[c]))
            if err > worst:
                worst = err
    return float(worst)
