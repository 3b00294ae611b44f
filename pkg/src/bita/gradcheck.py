"""Central finite-difference audit of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, Tensor, backward

__all__ = ["finite_diff_check", "finite_diff_check_many"]


def _scalar(value: Tensor) -> float:
    if value.data.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {value.shape}")
    return float(value.data.reshape(-1)[0])


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` builds a graph from a leaf tensor and returns a scalar.  With
    ``n_coords`` only that many randomly chosen coordinates are probed.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    _scalar(out)
    backward(out, inputs=[leaf])
    analytic = leaf.grad.reshape(-1)

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=n_coords, replace=False))

    worst = 0.0
    for i in coords:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = _scalar(f(Tensor(plus.reshape(base.shape))))
        fm = _scalar(f(Tensor(minus.reshape(base.shape))))
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


def finite_diff_check_many(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_coords: int = 10,
    rng: np.random.Generator | None = None,
) -> float:
    """Audit a closure over existing parameter tensors.

    Probes ``n_coords`` random coordinates spread across ``params`` by
    perturbing the parameter data in place (restored afterwards).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = f()
    _scalar(out)
    backward(out, inputs=params)
    sizes = np.array([p.size for p in params])
    picks = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat_index in np.sort(picks):
        k = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        p = params[k]
        idx = np.unravel_index(int(flat_index - offsets[k]), p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        fp = _scalar(f())
        p.data[idx] = orig - h
        fm = _scalar(f())
        p.data[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = p.grad[idx]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    for p in params:
        p.grad = None
    return worst
