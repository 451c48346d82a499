# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""
Entropic optimal transport between two discrete measures.

The solvers follow the classic Sinkhorn-Knopp scaling: starting from v = 1 they
alternate

    u = a / (K v)        v = b / (Kᵀ u)        with K = exp(-C / λ)

and stop once the mean absolute change of v drops below ``delta`` or after
``max_iter`` rounds. The returned plan is diag(u) K diag(v) and its cost is the
plain transport cost ⟨T, C⟩.

Two implementations share that contract:

- the kernel-domain solver, which evaluates the formula literally and refuses
  to run when the kernel underflows;
- the log-domain solver, which carries log u and log v through logsumexp
  reductions and stays finite for very small λ.

Both accept stacks of independent problems (``solve_batch``). Each problem in a
stack stops on its own criterion, so batching never changes a result.

``exact_ot_uniform`` is an exact oracle for tiny uniform-marginal problems.
"""

from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from clyso.plot.core.numerics import (
    ArrayModel,
    Mat,
    NumericalError,
    PlotError,
    ShapeError,
    Vec64,
    logsumexp,
)

DIVISION_FLOOR = 1e-300
ORACLE_LIMIT = 10


class SinkhornUnderflowError(PlotError):
    """Raised when exp(-C/λ) or a scaling denominator underflows."""

    def __init__(self, message: str, problem: int = 0) -> None:
        self.problem = problem
        super().__init__(
            f"{message}; use a larger lambda or the stabilized solver (--stabilized)"
        )


class OracleTooLargeError(PlotError):
    pass


class DiscreteMeasure(ArrayModel):
    """Probability weights on a finite support."""

    weights: np.ndarray

    @field_validator("weights", mode="before")
    @classmethod
    def _check_weights(cls, value: object) -> Vec64:
        w = np.asarray(value, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError(f"weights must be a non-empty vector, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and strictly positive")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {float(w.sum())!r}")
        return w

    @property
    def size(self) -> int:
        return int(self.weights.size)


class SinkhornConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lam: float = Field(default=0.1, gt=0, description="entropy weight lambda")
    max_iter: int = Field(default=100, ge=1)
    delta: float = Field(
        default=0.01, gt=0, description="stop threshold on mean |v_t - v_(t-1)|"
    )
    stabilized: bool = Field(default=False, description="use the log-domain solver")


class SinkhornResult(ArrayModel):
    plan: np.ndarray
    cost: float
    iterations: int
    converged: bool
    marginal_residual: float


class BatchSinkhornResult(ArrayModel):
    """Results for a stack of problems, indexed along the leading axis."""

    plans: np.ndarray
    costs: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    residuals: np.ndarray

    def __len__(self) -> int:
        return int(self.costs.shape[0])

    def item(self, i: int) -> SinkhornResult:
        return SinkhornResult(
            plan=self.plans[i],
            cost=float(self.costs[i]),
            iterations=int(self.iterations[i]),
            converged=bool(self.converged[i]),
            marginal_residual=float(self.residuals[i]),
        )


def uniform_measure(n: int) -> DiscreteMeasure:
    if n < 1:
        raise PlotError(f"uniform measure needs at least one point, got {n}")
    return DiscreteMeasure(weights=np.full(n, 1.0 / n))


def _cost_stack(costs: Mat) -> Mat:
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 3:
        raise ShapeError(f"cost stack must be 3-dimensional, got shape {c.shape}")
    if np.any(np.isnan(c)):
        raise NumericalError("cost matrix contains NaN")
    if not np.all(np.isfinite(c)):
        raise NumericalError("cost matrix contains infinite entries")
    return c


def transport_cost(t: Mat, c: Mat) -> float:
    t = np.asarray(t, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if t.shape != c.shape:
        raise ShapeError(f"plan shape {t.shape} does not match cost shape {c.shape}")
    return float(np.sum(t * c))


def plan_entropy(t: Mat) -> float:
    """-Σ T log T with 0·log 0 = 0."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise PlotError("transport plan has negative entries")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(t > 0, t * np.log(t), 0.0)
    return float(-np.sum(terms))


def entropic_value(t: Mat, c: Mat, lam: float) -> float:
    return transport_cost(t, c) - lam * plan_entropy(t)


def _residuals(plans: Mat, a: Vec64, b: Vec64) -> Vec64:
    rows = np.sum(np.abs(plans.sum(axis=2) - a), axis=1)
    cols = np.sum(np.abs(plans.sum(axis=1) - b), axis=1)
    return np.maximum(rows, cols)


def _finish(
    plans: Mat,
    costs: Mat,
    a: Vec64,
    b: Vec64,
    iterations: np.ndarray,
    converged: np.ndarray,
) -> BatchSinkhornResult:
    return BatchSinkhornResult(
        plans=plans,
        costs=np.sum(plans * costs, axis=(1, 2)),
        iterations=iterations,
        converged=converged,
        residuals=_residuals(plans, a, b),
    )


def _guard(denominator: Mat, active: np.ndarray, what: str) -> None:
    low = active[:, None] & (denominator < DIVISION_FLOOR)
    if np.any(low):
        problem = int(np.argwhere(low)[0][0])
        raise SinkhornUnderflowError(f"{what} fell below {DIVISION_FLOOR:g}", problem)


def _kernel_scaling(
    costs: Mat, a: Vec64, b: Vec64, cfg: SinkhornConfig
) -> BatchSinkhornResult:
    kernel = np.exp(-costs / cfg.lam)
    dead_rows = np.all(kernel == 0.0, axis=2)
    dead_cols = np.all(kernel == 0.0, axis=1)
    for dead, what in ((dead_rows, "row"), (dead_cols, "column")):
        if np.any(dead):
            problem, index = (int(i) for i in np.argwhere(dead)[0])
            raise SinkhornUnderflowError(
                f"kernel exp(-C/lambda) has an all-zero {what} {index}", problem
            )

    n_problems, _, n = costs.shape
    u = np.ones((n_problems, costs.shape[1]))
    v = np.ones((n_problems, n))
    iterations = np.zeros(n_problems, dtype=np.int64)
    converged = np.zeros(n_problems, dtype=bool)
    active = np.ones(n_problems, dtype=bool)

    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for it in range(1, cfg.max_iter + 1):
            kv = np.matmul(kernel, v[:, :, None])[:, :, 0]
            _guard(kv, active, "K v")
            u_next = a / kv
            ktu = np.matmul(u_next[:, None, :], kernel)[:, 0, :]
            _guard(ktu, active, "K^T u")
            v_next = b / ktu
            change = np.sum(np.abs(v_next - v), axis=1) / n

            u = np.where(active[:, None], u_next, u)
            v = np.where(active[:, None], v_next, v)
            iterations[active] = it
            done = active & (change < cfg.delta)
            converged |= done
            active &= ~done
            if not active.any():
                break

    plans = u[:, :, None] * kernel * v[:, None, :]
    return _finish(plans, costs, a, b, iterations, converged)


def _log_scaling(
    costs: Mat, a: Vec64, b: Vec64, cfg: SinkhornConfig
) -> BatchSinkhornResult:
    # where v itself overflows the stop test cannot fire; the plan stays finite
    scaled = -costs / cfg.lam
    log_a = np.log(a)
    log_b = np.log(b)

    n_problems, m, n = costs.shape
    log_u = np.zeros((n_problems, m))
    log_v = np.zeros((n_problems, n))
    iterations = np.zeros(n_problems, dtype=np.int64)
    converged = np.zeros(n_problems, dtype=bool)
    active = np.ones(n_problems, dtype=bool)

    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, cfg.max_iter + 1):
            log_u_next = log_a - logsumexp(scaled + log_v[:, None, :], axis=2)
            log_v_next = log_b - logsumexp(scaled + log_u_next[:, :, None], axis=1)
            change = np.sum(np.abs(np.exp(log_v_next) - np.exp(log_v)), axis=1) / n

            log_u = np.where(active[:, None], log_u_next, log_u)
            log_v = np.where(active[:, None], log_v_next, log_v)
            iterations[active] = it
            done = active & (change < cfg.delta)
            converged |= done
            active &= ~done
            if not active.any():
                break

    plans = np.exp(scaled + log_u[:, :, None] + log_v[:, None, :])
    return _finish(plans, costs, a, b, iterations, converged)


def _marginals(c: Mat, u: DiscreteMeasure, v: DiscreteMeasure) -> tuple[Vec64, Vec64]:
    if c.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-dimensional, got shape {c.shape}")
    if (u.size, v.size) != c.shape:
        raise ShapeError(
            f"marginals of sizes ({u.size}, {v.size}) do not match cost shape {c.shape}"
        )
    return u.weights, v.weights


def sinkhorn(
    c: Mat, u: DiscreteMeasure, v: DiscreteMeasure, cfg: SinkhornConfig
) -> SinkhornResult:
    c = np.asarray(c, dtype=np.float64)
    a, b = _marginals(c, u, v)
    return _kernel_scaling(_cost_stack(c[None]), a, b, cfg).item(0)


def sinkhorn_log_stabilized(
    c: Mat, u: DiscreteMeasure, v: DiscreteMeasure, cfg: SinkhornConfig
) -> SinkhornResult:
    c = np.asarray(c, dtype=np.float64)
    a, b = _marginals(c, u, v)
    return _log_scaling(_cost_stack(c[None]), a, b, cfg).item(0)


def solve(
    c: Mat, u: DiscreteMeasure, v: DiscreteMeasure, cfg: SinkhornConfig
) -> SinkhornResult:
    if cfg.stabilized:
        return sinkhorn_log_stabilized(c, u, v, cfg)
    return sinkhorn(c, u, v, cfg)


def solve_batch(costs: Mat, cfg: SinkhornConfig) -> BatchSinkhornResult:
    """Solve a B×M×N stack of uniform-marginal problems."""
    costs = _cost_stack(costs)
    _, m, n = costs.shape
    if m < 1 or n < 1:
        raise ShapeError(f"empty cost matrices of shape {m}x{n}")
    a = np.full(m, 1.0 / m)
    b = np.full(n, 1.0 / n)
    if cfg.stabilized:
        return _log_scaling(costs, a, b, cfg)
    return _kernel_scaling(costs, a, b, cfg)


def exact_ot_uniform(c: Mat) -> tuple[float, Mat]:
    """Exact OT cost and plan for uniform marginals.

    Rows are replicated L/M times and columns L/N times, L = lcm(M, N); an
    optimal plan of the square problem is a scaled permutation. The minimum
    over all permutations is found with a dynamic program over the subsets of
    used columns (2^L states) instead of visiting all L! permutations. Ties
    keep the lexicographically first permutation.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or 0 in c.shape:
        raise ShapeError(f"cost matrix must be a non-empty 2-d array, got {c.shape}")
    m, n = c.shape
    size = math.lcm(m, n)
    if size > ORACLE_LIMIT:
        raise OracleTooLargeError(
            f"lcm({m}, {n}) = {size} exceeds the oracle limit of {ORACLE_LIMIT}"
        )

    rows = np.repeat(np.arange(m), size // m)
    cols = np.repeat(np.arange(n), size // n)
    expanded = c[np.ix_(rows, cols)]
    bits = 1 << np.arange(size)

    # rest[mask]: cheapest completion once the columns in mask are taken by
    # the first popcount(mask) rows
    rest = np.full(1 << size, math.inf)
    rest[-1] = 0.0
    for mask in range(len(rest) - 2, -1, -1):
        free = (mask & bits) == 0
        row = mask.bit_count()
        rest[mask] = np.min(expanded[row, free] + rest[mask | bits[free]])

    perm = np.empty(size, dtype=np.intp)
    mask = 0
    for row in range(size):
        free = np.flatnonzero((mask & bits) == 0)
        col = free[int(np.argmin(expanded[row, free] + rest[mask | bits[free]]))]
        perm[row] = col
        mask |= int(bits[col])

    plan = np.zeros((m, n))
    np.add.at(plan, (rows, cols[perm]), 1.0 / size)
    return float(expanded[np.arange(size), perm].sum()) / size, plan
