"""Finite-difference verification harness for differentiable operations.

Runs in float64 with central differences (per-element step
``h = 1e-5 * max(1, |x|)``). Non-scalar op outputs are reduced to a
scalar through a fixed random projection so one backward pass covers the
whole Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, weighted_sum

FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    """Max relative error per checked input, plus the overall worst case."""

    per_input: list[float]
    max_rel_error: float

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # relative to the gradient's scale, floored at 1 so near-zero
    # gradients are judged absolutely
    denom = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               check: Sequence[bool] | None = None,
               rng: np.random.Generator | None = None,
               step: float = FD_STEP) -> GradCheckReport:
    """Compare analytic and central-difference gradients of ``fn``.

    ``fn`` maps Tensors built from ``inputs`` (float64 copies) to an
    output tensor of any shape. ``check`` masks which inputs get a
    gradient check (default: all).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if check is None:
        check = [True] * len(inputs)
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]

    def run(tensors: list[Tensor]) -> Tensor:
        out = fn(*tensors)
        if out.data.size == 1:
            return out
        return weighted_sum(out, run.proj)

    # Fixed projection, drawn once so every evaluation sees the same scalar map.
    probe = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
    run.proj = rng.standard_normal(probe.shape)

    tensors = [Tensor(a, requires_grad=c, dtype=np.float64) for a, c in zip(arrays, check)]
    run(tensors).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar_at(arrs: list[np.ndarray]) -> float:
        return run([Tensor(a, dtype=np.float64) for a in arrs]).item()

    errors: list[float] = []
    for i, base in enumerate(arrays):
        if not check[i]:
            continue
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            h = step * max(1.0, abs(flat[j]))
            orig = flat[j]
            work = [a.copy() for a in arrays]
            wflat = work[i].reshape(-1)
            wflat[j] = orig + h
            f_plus = scalar_at(work)
            wflat[j] = orig - h
            f_minus = scalar_at(work)
            nflat[j] = (f_plus - f_minus) / (2.0 * h)
        errors.append(_rel_error(analytic[i], numeric))

    return GradCheckReport(errors, max(errors) if errors else 0.0)
