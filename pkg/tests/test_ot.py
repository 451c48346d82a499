# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

import itertools
import math
import time
import unittest

import numpy as np
import numpy.testing as npt
from pydantic import ValidationError

from clyso.plot.core.numerics import NumericalError, PlotError, ShapeError, make_rng
from clyso.plot.core.oracle import oracle_report, oracle_trials
from clyso.plot.core.ot import (
    DiscreteMeasure,
    OracleTooLargeError,
    SinkhornConfig,
    SinkhornUnderflowError,
    entropic_value,
    exact_ot_uniform,
    plan_entropy,
    sinkhorn,
    sinkhorn_log_stabilized,
    solve,
    solve_batch,
    transport_cost,
    uniform_measure,
)

TIGHT = SinkhornConfig(lam=0.1, max_iter=20000, delta=1e-13)


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def solve_uniform(c: np.ndarray, cfg: SinkhornConfig):
    return sinkhorn(c, uniform_measure(c.shape[0]), uniform_measure(c.shape[1]), cfg)


class TestMeasures(unittest.TestCase):
    def test_uniform(self) -> None:
        npt.assert_array_equal(uniform_measure(4).weights, [0.25] * 4)
        npt.assert_array_equal(uniform_measure(1).weights, [1.0])
        self.assertAlmostEqual(float(uniform_measure(49).weights.sum()), 1.0, places=12)
        with self.assertRaises(PlotError):
            uniform_measure(0)

    def test_weights_validated(self) -> None:
        with self.assertRaises(ValidationError):
            DiscreteMeasure(weights=np.array([0.5, 0.6]))
        with self.assertRaises(ValidationError):
            DiscreteMeasure(weights=np.array([1.0, 0.0]))

    def test_config_invariants(self) -> None:
        for bad in ({"lam": 0.0}, {"lam": -1.0}, {"max_iter": 0}, {"delta": 0.0}):
            with self.assertRaises(ValidationError):
                SinkhornConfig(**bad)
        defaults = SinkhornConfig()
        self.assertEqual((defaults.lam, defaults.max_iter, defaults.delta), (0.1, 100, 0.01))


class TestCostAndEntropy(unittest.TestCase):
    def test_transport_cost(self) -> None:
        self.assertAlmostEqual(transport_cost(np.array([[1.0]]), np.array([[0.3]])), 0.3)
        uniform = np.full((2, 2), 0.25)
        self.assertAlmostEqual(transport_cost(uniform, np.array([[0.0, 1.0], [1.0, 0.0]])), 0.5)
        diag = np.array([[0.5, 0.0], [0.0, 0.5]])
        c = np.array([[0.1, 0.9], [0.8, 0.2]])
        self.assertAlmostEqual(transport_cost(diag, c), 0.15)
        with self.assertRaises(ShapeError):
            transport_cost(np.ones((2, 2)), np.ones((2, 3)))

    def test_entropy(self) -> None:
        self.assertEqual(plan_entropy(np.array([[1.0]])), 0.0)
        self.assertAlmostEqual(plan_entropy(np.full((2, 2), 0.25)), math.log(4.0))
        self.assertAlmostEqual(plan_entropy(np.array([[0.5, 0.0], [0.0, 0.5]])), math.log(2.0))
        with self.assertRaises(PlotError):
            plan_entropy(np.array([[1.5, -0.5]]))


class TestSinkhorn(unittest.TestCase):
    def test_single_point(self) -> None:
        res = solve_uniform(np.array([[0.3]]), SinkhornConfig())
        npt.assert_allclose(res.plan, [[1.0]], rtol=1e-12)
        self.assertAlmostEqual(res.cost, 0.3, places=12)
        self.assertTrue(res.converged)
        self.assertLessEqual(res.iterations, 2)

    def test_symmetric_two_by_two_closed_form(self) -> None:
        res = solve_uniform(np.array([[0.0, 1.0], [1.0, 0.0]]), SinkhornConfig(lam=0.1))
        e = math.exp(-10.0)
        a = 0.5 / (1.0 + e)
        npt.assert_allclose(res.plan, [[a, a * e], [a * e, a]], rtol=1e-12)
        self.assertAlmostEqual(res.cost, e / (1.0 + e), places=15)

    def test_small_lambda_close_to_exact(self) -> None:
        c = np.array([[0.1, 0.9], [0.8, 0.2]])
        res = solve_uniform(c, SinkhornConfig(lam=0.01, max_iter=1000, delta=1e-9))
        self.assertLessEqual(abs(res.cost - 0.15), 0.05)

    def test_cost_matches_plan(self) -> None:
        rng = make_rng(0)
        c = 1.0 - unit_rows(rng, 7, 5) @ unit_rows(rng, 3, 5).T
        res = solve_uniform(c, SinkhornConfig())
        self.assertAlmostEqual(res.cost, transport_cost(res.plan, c), places=12)
        self.assertLessEqual(res.iterations, 100)

    def test_feasibility_at_defaults(self) -> None:
        rng = make_rng(1)
        cfg = SinkhornConfig()
        for _ in range(100):
            c = 1.0 - unit_rows(rng, 49, 64) @ unit_rows(rng, 4, 64).T
            res = solve_uniform(c, cfg)
            self.assertLessEqual(res.marginal_residual, 0.01)

    def test_underflow_is_reported(self) -> None:
        c = np.array([[100.0, 100.0], [0.0, 1.0]])
        with self.assertRaises(SinkhornUnderflowError) as ctx:
            solve_uniform(c, SinkhornConfig(lam=0.1))
        self.assertIn("stabilized", str(ctx.exception))

    def test_log_domain_survives_underflow(self) -> None:
        c = np.array([[100.0, 100.0], [0.0, 1.0]])
        res = sinkhorn_log_stabilized(
            c, uniform_measure(2), uniform_measure(2), SinkhornConfig(lam=0.1)
        )
        self.assertTrue(np.all(np.isfinite(res.plan)))

    def test_log_domain_small_lambda_finite(self) -> None:
        c = 2.0 * make_rng(2).random((6, 4))
        res = sinkhorn_log_stabilized(
            c, uniform_measure(6), uniform_measure(4), SinkhornConfig(lam=1e-3)
        )
        self.assertTrue(np.all(np.isfinite(res.plan)))
        self.assertTrue(math.isfinite(res.cost))

    def test_log_domain_agrees_with_kernel(self) -> None:
        c = make_rng(3).random((5, 5))
        u, v = uniform_measure(5), uniform_measure(5)
        cfg = SinkhornConfig(lam=0.1)
        plain = sinkhorn(c, u, v, cfg)
        logd = sinkhorn_log_stabilized(c, u, v, cfg)
        npt.assert_allclose(logd.plan, plain.plan, atol=1e-8, rtol=0)
        self.assertEqual(plain.iterations, logd.iterations)
        one = uniform_measure(1)
        logd_single = sinkhorn_log_stabilized(np.array([[0.3]]), one, one, cfg)
        npt.assert_allclose(logd_single.plan, [[1.0]], rtol=1e-12)

    def test_nan_cost_rejected(self) -> None:
        with self.assertRaises(NumericalError):
            solve_uniform(np.array([[np.nan, 0.0]]), SinkhornConfig())

    def test_shape_mismatch(self) -> None:
        with self.assertRaises(ShapeError):
            sinkhorn(np.ones((2, 3)), uniform_measure(3), uniform_measure(2), SinkhornConfig())

    def test_solve_dispatches_on_stabilized(self) -> None:
        c = np.array([[100.0, 100.0], [0.0, 1.0]])
        u = uniform_measure(2)
        res = solve(c, u, u, SinkhornConfig(lam=0.1, stabilized=True))
        self.assertTrue(np.all(np.isfinite(res.plan)))

    def test_non_uniform_marginals(self) -> None:
        c = make_rng(4).random((3, 2))
        u = DiscreteMeasure(weights=np.array([0.5, 0.3, 0.2]))
        v = DiscreteMeasure(weights=np.array([0.6, 0.4]))
        res = sinkhorn(c, u, v, TIGHT)
        npt.assert_allclose(res.plan.sum(axis=1), u.weights, atol=1e-9)
        npt.assert_allclose(res.plan.sum(axis=0), v.weights, atol=1e-9)


class TestSinkhornProperties(unittest.TestCase):
    def test_scale_equivariance(self) -> None:
        c = make_rng(5).random((6, 4))
        base = solve_uniform(c, SinkhornConfig(lam=0.1))
        for s in (0.5, 2.0, 10.0):
            scaled = solve_uniform(s * c, SinkhornConfig(lam=0.1 * s))
            npt.assert_allclose(scaled.plan, base.plan, atol=1e-9, rtol=0)

    def test_permutation_equivariance(self) -> None:
        rng = make_rng(6)
        c = rng.random((6, 4))
        perm = rng.permutation(6)
        base = solve_uniform(c, SinkhornConfig())
        permuted = solve_uniform(c[perm], SinkhornConfig())
        npt.assert_allclose(permuted.plan, base.plan[perm], atol=1e-9, rtol=0)

    def test_symmetric_instance_gives_symmetric_plan(self) -> None:
        x = make_rng(7).random((5, 5))
        c = (x + x.T) / 2.0
        res = solve_uniform(c, TIGHT)
        npt.assert_allclose(res.plan, res.plan.T, atol=1e-9, rtol=0)

    def test_cost_monotone_in_lambda(self) -> None:
        c = make_rng(8).random((4, 4))
        costs = [
            solve_uniform(c, SinkhornConfig(lam=lam, max_iter=20000, delta=1e-13)).cost
            for lam in (0.05, 0.1, 0.5)
        ]
        for low, high in zip(costs, costs[1:], strict=False):
            self.assertLessEqual(low, high + 1e-9)
        # closed form e/(1+e) with e = exp(-1/λ) is increasing in λ
        sym = np.array([[0.0, 1.0], [1.0, 0.0]])
        closed = [
            solve_uniform(sym, SinkhornConfig(lam=lam)).cost for lam in (0.01, 0.05, 0.1, 0.5)
        ]
        self.assertEqual(closed, sorted(closed))

    def test_cost_monotone_in_lambda_random_costs(self) -> None:
        rng = make_rng(18)
        for rows, cols in ((4, 4), (6, 3), (7, 4)):
            c = 1.0 - unit_rows(rng, rows, 8) @ unit_rows(rng, cols, 8).T
            costs = []
            for lam in (0.01, 0.05, 0.1, 0.5):
                res = solve_uniform(c, SinkhornConfig(lam=lam, max_iter=100000, delta=1e-12))
                self.assertTrue(res.converged, f"{rows}x{cols} at lambda {lam}")
                costs.append(res.cost)
            for low, high in zip(costs, costs[1:], strict=False):
                self.assertLessEqual(low, high + 1e-9, f"{rows}x{cols}: {costs}")

    def test_single_prompt_gives_column_mean(self) -> None:
        rng = make_rng(9)
        c = 1.0 - unit_rows(rng, 49, 8) @ unit_rows(rng, 1, 8).T
        res = solve_uniform(c, SinkhornConfig())
        npt.assert_allclose(res.plan[:, 0], np.full(49, 1.0 / 49), rtol=1e-12)
        self.assertAlmostEqual(res.cost, float(c.mean()), places=12)

    def test_entropic_value_envelope(self) -> None:
        rng = make_rng(10)
        c = rng.random((4, 4))
        cfg = SinkhornConfig(lam=0.1, max_iter=20000, delta=1e-9)
        plan = solve_uniform(c, cfg).plan

        def value(cost: np.ndarray) -> float:
            return entropic_value(solve_uniform(cost, cfg).plan, cost, cfg.lam)

        for _ in range(5):
            m, n = int(rng.integers(4)), int(rng.integers(4))
            step = np.zeros_like(c)
            step[m, n] = 1e-5
            numeric = (value(c + step) - value(c - step)) / 2e-5
            self.assertLessEqual(abs(numeric - plan[m, n]), 1e-3)


class TestBatch(unittest.TestCase):
    def test_batch_matches_individual_solves(self) -> None:
        costs = make_rng(11).random((6, 5, 3))
        costs[2] *= 0.01
        for cfg in (SinkhornConfig(), SinkhornConfig(stabilized=True)):
            batch = solve_batch(costs, cfg)
            self.assertEqual(len(batch), 6)
            for i in range(6):
                single = solve(costs[i], uniform_measure(5), uniform_measure(3), cfg)
                item = batch.item(i)
                npt.assert_allclose(item.plan, single.plan, rtol=1e-12, atol=1e-15)
                self.assertEqual(item.iterations, single.iterations)
                self.assertEqual(item.converged, single.converged)

    def test_underflow_names_problem(self) -> None:
        costs = make_rng(12).random((3, 2, 2))
        costs[1, 0, :] = 100.0
        with self.assertRaises(SinkhornUnderflowError) as ctx:
            solve_batch(costs, SinkhornConfig(lam=0.1))
        self.assertEqual(ctx.exception.problem, 1)


class TestExactOracle(unittest.TestCase):
    def test_two_by_two(self) -> None:
        cost, plan = exact_ot_uniform(np.array([[0.1, 0.9], [0.8, 0.2]]))
        self.assertAlmostEqual(cost, 0.15)
        npt.assert_allclose(plan, [[0.5, 0.0], [0.0, 0.5]])

    def test_degenerate_shapes(self) -> None:
        cost, plan = exact_ot_uniform(np.array([[0.42]]))
        self.assertEqual(cost, 0.42)
        npt.assert_array_equal(plan, [[1.0]])
        cost, plan = exact_ot_uniform(np.array([[0.2, 0.4]]))
        self.assertAlmostEqual(cost, 0.3)
        npt.assert_allclose(plan, [[0.5, 0.5]])

    def test_rectangular_marginals(self) -> None:
        c = make_rng(13).random((2, 4))
        _, plan = exact_ot_uniform(c)
        npt.assert_allclose(plan.sum(axis=1), [0.5, 0.5])
        npt.assert_allclose(plan.sum(axis=0), [0.25] * 4)

    def test_matches_permutation_search(self) -> None:
        rng = make_rng(14)
        for size in (3, 4, 5, 6):
            c = rng.random((size, size))
            best = min(
                sum(c[i, p] for i, p in enumerate(perm))
                for perm in itertools.permutations(range(size))
            )
            cost, plan = exact_ot_uniform(c)
            self.assertAlmostEqual(cost, best / size, places=12)
            npt.assert_allclose(plan.sum(axis=0), 1.0 / size)
            npt.assert_allclose(plan.sum(axis=1), 1.0 / size)
            self.assertAlmostEqual(transport_cost(plan, c), cost, places=12)

    def test_ties_keep_first_permutation(self) -> None:
        _, plan = exact_ot_uniform(np.ones((3, 3)))
        npt.assert_allclose(plan, np.eye(3) / 3.0)

    def test_largest_instances_are_fast(self) -> None:
        rng = make_rng(15)
        for shape in ((10, 10), (2, 5), (5, 10)):
            start = time.perf_counter()
            cost, plan = exact_ot_uniform(rng.random(shape))
            self.assertLess(time.perf_counter() - start, 1.0)
            self.assertAlmostEqual(plan.sum(), 1.0)
            self.assertGreaterEqual(cost, 0.0)

    def test_too_large(self) -> None:
        with self.assertRaises(OracleTooLargeError):
            exact_ot_uniform(np.ones((3, 4)))

    def test_oracle_equivalence(self) -> None:
        start = time.perf_counter()
        sharp = oracle_trials(4, 4, 100, SinkhornConfig(lam=0.01, max_iter=1000, delta=1e-6))
        elapsed = time.perf_counter() - start
        self.assertLessEqual(sharp.max_gap, 0.05)
        self.assertEqual(sharp.dominance_violations, [])
        self.assertLess(elapsed, 2.0)

        blunt = oracle_trials(4, 4, 100, SinkhornConfig(lam=0.1, max_iter=1000, delta=1e-6))
        self.assertLess(sharp.mean_gap, blunt.mean_gap)

    def test_single_point_gap(self) -> None:
        stats = oracle_trials(1, 1, 5, SinkhornConfig())
        self.assertLessEqual(stats.max_gap, 1e-12)

    def test_report_checks(self) -> None:
        stats = oracle_trials(2, 2, 20, SinkhornConfig(lam=0.1, max_iter=1000, delta=1e-9))
        report = oracle_report(stats, max_gap=1.0)
        self.assertTrue(report.passed)
        self.assertEqual([s["id"] for s in report.data["sections"]], ["feasibility", "gap"])
        self.assertEqual(
            [c["id"] for c in report.checks()],
            ["marginal_residual", "oracle_dominance", "max_gap"],
        )
        failing = oracle_report(stats, max_gap=-1.0)
        self.assertFalse(failing.passed)
