"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, get_precision


class NonDeterminismError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: list[float] = field(default_factory=list)
    floor: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], tol: float = 1e-4,
               h: float = 1e-5, floor: float = 1e-6, max_coords: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare backward() gradients of the scalar ``f()`` against finite differences.

    ``f`` rebuilds the graph from ``params`` on every call. Requires 64-bit mode.
    With ``max_coords`` each parameter larger than that is checked on a random
    subset of that many coordinates (drawn with ``seed``) instead of all of them.

    A central difference carries round-off of order ``eps * |f| / h``, so an
    entry smaller than that divided by ``tol`` cannot be resolved to ``tol``
    relative accuracy. The denominator floor is therefore raised to
    ``100 * eps * max(|f|, 1) / (h * tol)`` when that exceeds ``floor``; it
    scales with ``f`` (the factor covers cancellation inside ``f``) and amounts
    to an absolute allowance near 2e-8 for O(10) losses.
    """
    if get_precision() != "ref64":
        raise RuntimeError("grad_check requires ref64 precision")
    first = f()
    second = f()
    if not np.array_equal(first.data, second.data):
        raise NonDeterminismError("f() returned different values on two evaluations")
    for p in params:
        p.grad = None
    backward(first)
    noise = np.finfo(np.float64).eps * max(abs(first.item()), 1.0) / h
    floor = max(floor, 100.0 * noise / tol)
    report = GradCheckReport(tol=tol, floor=floor)
    rng = np.random.default_rng(seed)
    for p in params:
        analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size, dtype=p.data.dtype)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * h)
        report.max_rel_error.append(relative_error(analytic[coords], numeric, floor))
    return report
