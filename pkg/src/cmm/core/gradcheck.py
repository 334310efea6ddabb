"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Parameter, Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero gradients from dividing round-off by zero; below
    it the measure degrades gracefully to an absolute error scaled by 1/floor.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], p: Parameter, step: float = 1e-5,
                 entries: Iterable[int] | None = None, order: int = 2) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the entries of ``p``.

    ``order=2`` is the three-point stencil; ``order=4`` the five-point one,
    whose truncation error is small enough to use a larger, round-off-safe step.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    flat = p.data.reshape(-1)
    out = np.zeros(flat.size)

    def at(i, x):
        flat[i] = x
        return f().item()

    for i in range(flat.size) if entries is None else entries:
        x0 = flat[i]
        if order == 2:
            out[i] = (at(i, x0 + step) - at(i, x0 - step)) / (2 * step)
        else:
            out[i] = (
                -at(i, x0 + 2 * step) + 8 * at(i, x0 + step) - 8 * at(i, x0 - step) + at(i, x0 - 2 * step)
            ) / (12 * step)
        flat[i] = x0
    return out.reshape(p.shape)


def analytic_grad(f: Callable[[], Tensor], params: list[Parameter]) -> dict[Parameter, np.ndarray]:
    with Tape() as tape:
        root = f()
    grads = tape.backward(root)
    return {p: grads.get(p, np.zeros_like(p.data)) for p in params}


def check_gradients(f: Callable[[], Tensor], params: list[Parameter], step: float = 1e-5,
                    floor: float = 1e-6, order: int = 2) -> dict[str, float]:
    """Max entrywise relative error per parameter (keyed by name or index)."""
    an = analytic_grad(f, params)
    report = {}
    for k, p in enumerate(params):
        num = numeric_grad(f, p, step, order=order)
        err = relative_error(an[p], num, floor)
        report[p.name or str(k)] = float(err.max()) if err.size else 0.0
    return report
