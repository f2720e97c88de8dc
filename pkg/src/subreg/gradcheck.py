"""Finite-difference certification of analytic gradients.

The checker never calls the analytic gradient code to produce its
reference: it rebuilds the scalar value at perturbed factor entries and
forms central differences coordinate by coordinate. For the kernel
measure the bandwidths are computed once at the base point and frozen
during perturbation, matching the constant-bandwidth differentiation
contract of the measures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapter import LowRankAdapter, subspace_forward
from .regularizers import (
    RegularizerSpec,
    median_bandwidth,
    regularize,
    weight_level_features,
)

__all__ = ["GradReport", "finite_diff", "check"]

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-5
_REL_FLOOR = 1e-8


@dataclass(frozen=True)
class GradReport:
    max_rel_err: float
    max_abs_err: float
    worst_coordinate: tuple[str, int, int]
    passed: bool
    value: float
    step: float
    tol: float

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "max_abs_err": self.max_abs_err,
            "worst_coordinate": list(self.worst_coordinate),
            "passed": self.passed,
            "value": self.value,
            "step": self.step,
            "tol": self.tol,
        }


def finite_diff(
    grad_of: Callable[[np.ndarray, np.ndarray, np.ndarray | None], float],
    at: LowRankAdapter,
    x_batch: np.ndarray | None,
    step: float = DEFAULT_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of ``grad_of(b, a, x_batch)`` at ``at``.

    Perturbs every entry of ``b`` and ``a`` by ``+-step`` and returns
    (grad_b, grad_a). Raises if the function produces a non-finite value,
    naming the offending coordinate.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    grads = []
    for name, base in (("b", at.b), ("a", at.a)):
        g = np.zeros_like(base)
        work = np.array(base)
        rows, cols = base.shape
        for i in range(rows):
            for j in range(cols):
                orig = work[i, j]
                work[i, j] = orig + step
                f_plus = _eval(grad_of, name, work, at, x_batch, i, j)
                work[i, j] = orig - step
                f_minus = _eval(grad_of, name, work, at, x_batch, i, j)
                work[i, j] = orig
                g[i, j] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads[0], grads[1]


def _eval(fn, which, work, at, x_batch, i, j) -> float:
    if which == "b":
        val = fn(work, at.a, x_batch)
    else:
        val = fn(at.b, work, x_batch)
    val = float(val)
    if not np.isfinite(val):
        raise FloatingPointError(
            f"non-finite value {val} while perturbing {which}[{i},{j}]"
        )
    return val


def check(
    measure: RegularizerSpec,
    adapter: LowRankAdapter,
    x_batch: np.ndarray | None,
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    analytic: tuple[np.ndarray, np.ndarray] | None = None,
) -> GradReport:
    """Compare the analytic gradients of a measure against finite differences.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    ``analytic`` overrides the computed gradients (used by fault-injection
    tests); failure is reported, never raised.
    """
    frozen = _frozen_sigmas(measure, adapter, x_batch)
    rv = regularize(adapter, x_batch, measure, frozen_sigmas=frozen)
    if analytic is None:
        analytic = (rv.grad_b, rv.grad_a)

    def value_fn(b, a, x):
        ad = LowRankAdapter(w0=adapter.w0, b=b, a=a)
        return regularize(ad, x, measure, frozen_sigmas=frozen).value

    num_b, num_a = finite_diff(value_fn, adapter, x_batch, step=step)

    max_rel, max_abs, worst = 0.0, 0.0, ("b", 0, 0)
    for name, ana, num in (("b", analytic[0], num_b), ("a", analytic[1], num_a)):
        abs_err = np.abs(ana - num)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), _REL_FLOOR)
        rel_err = abs_err / denom
        idx = np.unravel_index(int(np.argmax(rel_err)), rel_err.shape)
        if rel_err[idx] >= max_rel:
            max_rel = float(rel_err[idx])
            worst = (name, int(idx[0]), int(idx[1]))
        max_abs = max(max_abs, float(np.max(abs_err)))
    return GradReport(
        max_rel_err=max_rel,
        max_abs_err=max_abs,
        worst_coordinate=worst,
        passed=bool(max_rel <= tol),
        value=rv.value,
        step=step,
        tol=tol,
    )


def _frozen_sigmas(
    measure: RegularizerSpec, adapter: LowRankAdapter, x_batch
) -> list[float] | None:
    if measure.measure != "nonlinear" or adapter.rank < 2:
        return None
    if measure.level == "feature":
        feats = subspace_forward(adapter, x_batch).per_subspace
    else:
        feats = weight_level_features(adapter, measure.measure).per_subspace
    return [
        median_bandwidth(f, measure.sigma_fraction, measure.sigma_floor) for f in feats
    ]
