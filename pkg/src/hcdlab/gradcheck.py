"""Central finite-difference gradient checker for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record_kinks


@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    skipped_kinks: int
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)
    failures: list[tuple[int, int, float, float]] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err <= self.tol


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps vanishing gradients from turning rounding noise into huge
    relative errors; below it the comparison is effectively absolute.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _patterns_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    coords: Sequence[Sequence[int]] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` must rebuild the graph from the current contents of ``inputs`` on
    every call.  ``coords`` optionally restricts the check to a list of flat
    indices per input.  A coordinate is skipped when the ReLU activation
    pattern at ``x + h`` or ``x - h`` differs from the pattern at ``x``.
    """
    for t in inputs:
        t.grad = None
    with record_kinks() as base_pattern:
        loss = f()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    worst, max_err, checked, skipped = None, 0.0, 0, 0
    failures = []
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        todo = range(flat.size) if coords is None else coords[idx]
        for c in todo:
            orig = flat[c]
            flat[c] = orig + h
            with record_kinks() as plus_pattern:
                fp = f().item()
            flat[c] = orig - h
            with record_kinks() as minus_pattern:
                fm = f().item()
            flat[c] = orig
            if not (_patterns_equal(base_pattern, plus_pattern) and _patterns_equal(base_pattern, minus_pattern)):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[idx].reshape(-1)[c])
            err = rel_error(a, numeric, floor)
            checked += 1
            if err > tol:
                failures.append((idx, int(c), a, numeric))
            if err >= max_err:
                max_err, worst = err, (idx, int(c))
    for t in inputs:
        t.grad = None
    return GradCheckReport(max_err, checked, skipped, worst, failures, tol)
