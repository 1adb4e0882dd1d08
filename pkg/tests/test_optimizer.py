from dataclasses import replace
from unittest import TestCase

import numpy as np

from breakguard import (ContinuationConfig, CostConfig, DesignProblem,
    IncgOptions, SolveCounter, adaptive_optimize, analytic_solve_count,
    design_gradient, eval_cost, finite_difference_check, incg_solve)
from breakguard.breakguard import DESIGN_EPS
from breakguard.risk_estimators import EigOptions

from tests.utils import BGTestCase


class Quadratic:
    """
    ``1/2 (d - c)^T A (d - c)`` with a diagonal ``A``.
    """
    def __init__(self, a, c):
        self.a = np.asarray(a, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.n_evaluations = 0

    def cost(self, d):
        self.n_evaluations += 1
        r = d - self.c
        return 0.5 * r @ (self.a * r)

    def cost_and_gradient(self, d):
        return self.cost(d), self.a * (d - self.c)


class TestConfigs(TestCase):

    def test_cost(self):
        self.assertRaises(ValueError, lambda: CostConfig(beta_V=-1))
        self.assertRaises(ValueError, lambda: CostConfig(regularizer="l1"))
        self.assertAlmostEqual(CostConfig().smoothing, 4 / 22.5e6)
        self.assertEqual(CostConfig(omega=3.0).smoothing, 3.0)

    def test_continuation(self):
        self.assertRaises(ValueError,
            lambda: ContinuationConfig(sigma_omega=1.0))
        self.assertRaises(ValueError, lambda: ContinuationConfig(k_max=0))

    def test_incg(self):
        self.assertRaises(ValueError, lambda: IncgOptions(bounds=(1, 0)))
        self.assertRaises(ValueError, lambda: IncgOptions(c_armijo=1.5))
        options = IncgOptions(bounds=[0, 1])
        self.assertEqual(options.bounds, (0.0, 1.0))
        np.testing.assert_array_equal(options.project(np.array([-1, 0.5, 2])),
            [0, 0.5, 1])
        d = np.array([-5.0, 5.0])
        self.assertIs(IncgOptions(bounds=None).project(d), d)

    def test_solve_count(self):
        counts = analytic_solve_count(EigOptions(10, 5), EigOptions(4, 2))
        self.assertEqual(counts["value"], 3 + 4 * 15 + 4 * 6)
        self.assertEqual(counts["gradient"], 2 * (10 + 4 + 3))
        self.assertEqual(counts["total"], counts["value"] + counts["gradient"])
        # sketches are capped at the parameter dimension
        counts = analytic_solve_count(EigOptions(10, 5), EigOptions(10, 5), 8)
        self.assertEqual(counts["value"], 3 + 4 * 8 + 4 * 8)
        self.assertEqual(counts["gradient"], 2 * (8 + 8 + 3))


class TestIncg(TestCase):

    def test_interior_minimum(self):
        problem = Quadratic([1.0, 10.0, 100.0], [0.2, 0.5, 0.7])
        result = incg_solve(problem, np.full(3, 0.9), IncgOptions(max_iter=50))
        self.assertTrue(result.converged)
        self.assertFalse(result.stalled)
        np.testing.assert_allclose(result.d, problem.c, atol=1e-4)
        self.assertEqual(result.reason,
            "Norm of the gradient less than tolerance")

    def test_active_bounds(self):
        problem = Quadratic([1.0, 2.0], [1.5, -0.5])
        result = incg_solve(problem, np.full(2, 0.5), IncgOptions(max_iter=50))
        np.testing.assert_allclose(result.d, [1.0, 0.0], atol=1e-10)
        self.assertLess(result.grad_norm, 1e-10)

    def test_unbounded(self):
        problem = Quadratic([1.0, 2.0], [1.5, -0.5])
        result = incg_solve(problem, np.zeros(2),
            IncgOptions(max_iter=50, bounds=None))
        np.testing.assert_allclose(result.d, problem.c, atol=1e-4)

    def test_projects_start(self):
        problem = Quadratic([1.0], [0.5])
        result = incg_solve(problem, np.array([3.0]), IncgOptions(max_iter=1))
        self.assertLessEqual(result.history[0]["cost"], 0.5 * 0.5**2)

    def test_monotone_with_callback(self):
        problem = Quadratic(np.linspace(1, 50, 10), np.linspace(0.1, 0.9, 10))
        entries = []
        result = incg_solve(problem, np.zeros(10), IncgOptions(max_iter=50),
            entries.append)
        costs = [e["cost"] for e in result.history]
        self.assertTrue(np.all(np.diff(costs) < 0))
        self.assertEqual(entries, result.history[1:])

    def test_max_iter(self):
        problem = Quadratic(np.logspace(0, 4, 20), np.full(20, 0.5))
        result = incg_solve(problem, np.zeros(20), IncgOptions(max_iter=1,
            cg_max_iter=1))
        self.assertEqual(result.iterations, 1)
        self.assertFalse(result.converged)
        self.assertEqual(result.reason, "Maximum number of Iteration reached")


class TestDesignProblem(BGTestCase):

    def problem(self, **kwargs):
        bg = self.bg
        sampling = bg.config.sampling
        options = dict(cost=bg.config.cost, eig_q=bg.config.eig,
            eig_f=bg.config.eig_f, n_chance_samples=sampling[
            "n_chance_samples"], seed=sampling["seed"], counter=SolveCounter())
        options.update(kwargs)
        return DesignProblem(self.model, self.field, **options)

    def test_solve_count(self):
        problem = self.problem()
        d = self.bg.design() + 0.01
        evaluation = problem.evaluate(d)
        counts = analytic_solve_count(self.bg.config.eig,
            self.bg.config.eig_f, self.bg.n_param)
        self.assertEqual(evaluation.n_pde_solves, counts["total"])

        # a second evaluation at the same design reuses the Taylor models
        evaluation = problem.evaluate(d)
        self.assertEqual(evaluation.n_pde_solves, counts["gradient"])

    def test_cost_parts(self):
        problem = self.problem()
        d = self.bg.design()
        evaluation = problem.evaluate(d, gradient=False)
        self.assertIsNone(evaluation.gradient)
        cfg = self.bg.config.cost
        parts = evaluation.parts
        self.assertAlmostEqual(evaluation.cost, parts["mean"] + cfg.beta_V *
            parts["variance"] + cfg.beta_R * parts["regularization"] +
            parts["penalty"])
        self.assertGreaterEqual(parts["variance"], 0.0)
        self.assertEqual(eval_cost(problem, d), evaluation.cost)
        self.assertEqual(len(evaluation.constraint_samples),
            self.bg.config.sampling["n_chance_samples"])
        # a constant design has no gradient to regularize
        self.assertAlmostEqual(problem.regularization(np.full(
            self.bg.n_param, 0.5)), 0.0, delta=1e-12)

    def test_mass_regularizer(self):
        cost = replace(self.bg.config.cost, regularizer="mass")
        problem = self.problem(cost=cost)
        self.assertAlmostEqual(problem.regularization(np.ones(
            self.bg.n_param)), 0.5 * 0.9, delta=1e-12)

    def test_design_gradient(self):
        n = self.bg.n_param
        # full sketches make the eigenvalue derivatives exact
        full = EigOptions(10, n - 10, 0)
        problem = self.problem(eig_q=full, eig_f=full)
        d = self.bg.design()
        results = finite_difference_check(problem.cost,
            design_gradient(problem, d), d, self.directions(2, seed=7),
            DESIGN_EPS)
        self.assertLess(max(r.best for r in results), 1e-4)

    def test_design_gradient_active_penalty(self):
        n = self.bg.n_param
        full = EigOptions(10, n - 10, 0)
        cost = self.bg.config.cost
        cost = replace(cost, chance=replace(cost.chance, alpha_c=1e-6))
        problem = self.problem(cost=cost, eig_q=full, eig_f=full)
        d = self.bg.design()
        evaluation = problem.evaluate(d)
        self.assertGreater(evaluation.parts["penalty"], 0.0)
        results = finite_difference_check(problem.cost, evaluation.gradient,
            d, self.directions(1, seed=8), DESIGN_EPS)
        self.assertLess(results[0].best, 1e-4)

    def test_constraint_samples_follow_eigenvectors(self):
        problem = self.problem()
        _, _, tm_f = problem.taylor_models(self.bg.design())
        values, eta, cols = problem._constraint_samples(tm_f)
        np.testing.assert_array_equal(cols, np.arange(tm_f.n_eig))

        # the same eigenpairs in another order give the same samples
        swap = np.arange(tm_f.n_eig)[::-1]
        swapped = replace(tm_f, eigenvalues=tm_f.eigenvalues[swap],
            eigenvectors=tm_f.eigenvectors[:, swap])
        again, eta_swapped, _ = problem._constraint_samples(swapped)
        np.testing.assert_allclose(again, values, rtol=1e-10)
        np.testing.assert_array_equal(eta_swapped, eta[:, swap])

    def test_chance_estimate(self):
        problem = self.problem()
        d = self.bg.design()
        chance = problem.chance_estimate(d)
        self.assertTrue(0.0 <= chance <= 1.0)
        self.assertEqual(chance, self.bg.chance(d))

    def test_rejects_empty_sample_set(self):
        self.assertRaises(ValueError,
            lambda: self.problem(n_chance_samples=0))


class TestContinuation(BGTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.entries = []
        cls.result = cls.bg.optimize(callback=cls.entries.append)

    def test_steps(self):
        cont = self.bg.config.continuation
        steps = self.result.steps
        self.assertTrue(1 <= len(steps) <= cont.k_max)
        self.assertEqual([s.k for s in steps], list(range(1, len(steps) + 1)))
        for a, b in zip(steps, steps[1:]):
            self.assertAlmostEqual(b.omega / a.omega, cont.sigma_omega)
            self.assertAlmostEqual(b.gamma / a.gamma, cont.sigma_gamma)
        self.assertEqual(len(self.result.inner), len(steps))

    def test_inner_decrease(self):
        for inner in self.result.inner:
            costs = [e["cost"] for e in inner.history]
            self.assertLessEqual(costs[-1], costs[0])

    def test_bounds(self):
        lo, hi = self.bg.config.incg.bounds
        self.assertTrue(np.all(self.result.d >= lo))
        self.assertTrue(np.all(self.result.d <= hi))

    def test_callback_tags(self):
        for entry in self.entries:
            self.assertIn("k", entry)
            self.assertIn("omega", entry)
            self.assertIn("n_pde_solves", entry)
        self.assertEqual(len(self.entries),
            sum(len(r.history) - 1 for r in self.result.inner))

    def test_step_dict(self):
        row = self.result.steps[0].to_dict()
        self.assertEqual(set(row), {"k", "omega", "gamma", "chance", "cost",
            "change", "iterations", "stalled"})


class TestContinuationStops(TestCase):

    def test_converged_design_stops(self):
        class Penalized(Quadratic):
            cost_config = CostConfig()

            def set_smoothing(self, omega, gamma):
                self.omega = omega

            def freeze(self):
                pass

            def chance_estimate(self, d):
                return 0.0

        problem = Penalized([1.0, 1.0], [0.3, 0.6])
        result = adaptive_optimize(problem, np.array([0.3, 0.6]),
            ContinuationConfig(k_max=5, eps_out=1e-8))
        self.assertEqual(len(result.steps), 1)
        self.assertEqual(result.steps[0].iterations, 0)


class TestVerify(BGTestCase):

    def test_all_suites_pass(self):
        report = self.bg.verify()
        self.assertEqual(set(report["suites"]), {"gradient", "hessian",
            "eigensolver", "moments", "design_gradient"})
        for name, suite in report["suites"].items():
            with self.subTest(suite=name):
                self.assertTrue(suite["passed"], suite["errors"])
        self.assertTrue(report["passed"])
        self.assertGreater(report["n_pde_solves"], 0)
        self.assertEqual(report["suites"]["design_gradient"]["penalty_active"]
            [-1], True)
