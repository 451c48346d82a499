# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""Sinkhorn against the exact enumeration oracle on random uniform-marginal instances."""

import math

import numpy as np
from pydantic import BaseModel

from clyso.plot.core.numerics import PlotError, make_rng
from clyso.plot.core.ot import (
    ORACLE_LIMIT,
    OracleTooLargeError,
    SinkhornConfig,
    exact_ot_uniform,
    solve_batch,
)
from clyso.plot.core.result import CheckReport

DOMINANCE_SLACK = 10.0
DEFAULT_MAX_RESIDUAL = 0.01


class OracleStats(BaseModel):
    rows: int
    cols: int
    trials: int
    lam: float
    seed: int
    max_gap: float
    mean_gap: float
    max_residual: float
    mean_residual: float
    mean_iterations: float
    converged: int
    dominance_violations: list[int]


def check_oracle_shape(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise OracleTooLargeError(f"instance must be at least 1x1, got {rows}x{cols}")
    size = math.lcm(rows, cols)
    if size > ORACLE_LIMIT:
        raise OracleTooLargeError(
            f"lcm({rows}, {cols}) = {size} exceeds the oracle limit of {ORACLE_LIMIT}"
        )


def oracle_trials(
    rows: int, cols: int, trials: int, cfg: SinkhornConfig, seed: int = 0
) -> OracleStats:
    """Solve ``trials`` random costs (uniform in [0, 1]) both ways and compare."""
    check_oracle_shape(rows, cols)
    if trials < 1:
        raise PlotError(f"need at least one trial, got {trials}")
    costs = make_rng(seed).random((trials, rows, cols))
    solved = solve_batch(costs, cfg)
    exact = np.array([exact_ot_uniform(c)[0] for c in costs])
    gaps = np.abs(solved.costs - exact)
    slack = DOMINANCE_SLACK * solved.residuals
    violations = np.flatnonzero(solved.costs < exact - slack)
    return OracleStats(
        rows=rows,
        cols=cols,
        trials=trials,
        lam=cfg.lam,
        seed=seed,
        max_gap=float(gaps.max()),
        mean_gap=float(gaps.mean()),
        max_residual=float(solved.residuals.max()),
        mean_residual=float(solved.residuals.mean()),
        mean_iterations=float(solved.iterations.mean()),
        converged=int(solved.converged.sum()),
        dominance_violations=[int(i) for i in violations],
    )


def oracle_report(
    stats: OracleStats,
    max_gap: float | None = None,
    max_residual: float = DEFAULT_MAX_RESIDUAL,
) -> CheckReport:
    report = CheckReport("oracle-check")
    report.set_provenance(seed=stats.seed, rows=stats.rows, cols=stats.cols, lam=stats.lam)
    report.add_section("feasibility")
    report.add_info_result("feasibility", "mean_residual", stats.mean_residual)
    report.add_section("gap")
    for key in ("trials", "max_gap", "mean_gap", "mean_iterations", "converged"):
        report.add_info_result("gap", key, getattr(stats, key))

    report.check(
        "feasibility",
        "marginal_residual",
        stats.max_residual <= max_residual,
        f"max L1 marginal residual {stats.max_residual:.3g} (limit {max_residual:g})",
        [],
    )
    report.check(
        "gap",
        "oracle_dominance",
        not stats.dominance_violations,
        "Sinkhorn cost never undercuts the exact optimum beyond the residual slack",
        [f"trial {i}" for i in stats.dominance_violations],
    )
    if max_gap is not None:
        report.check(
            "gap",
            "max_gap",
            stats.max_gap <= max_gap,
            f"max |Sinkhorn - exact| {stats.max_gap:.3g} (limit {max_gap:g})",
            [],
        )
    return report
