import tempfile
import unittest

import numpy as np
from scipy.optimize import minimize

from errors import DimensionMismatchError, DivergenceError
from mfcalc import FunctionalDescriptor
from models import ParticleEnsemble, TimeGrid
from oracle_variance import VarianceInstance, closed_form_control
from pmp import (hamiltonian, integrate_backward, integrate_forward, interval_costates, maximize_control,
                 maximize_controls, pmp_residual, solve_fbsm, total_cost, triple_from_directory,
                 triple_from_tables, triple_to_tables)
from problem import ControlCost, ControlCostKind, ControlSet, DriftTerm, ProblemSpec, variance_problem
from storage import ArtifactStore
from utils import sample_uniform


def quartic_problem(control_set, d=2):
    return ProblemSpec(d, 1.0, ControlCost(ControlCostKind.QUADRATIC_QUARTIC, 1.0, 1.0), control_set)


class TestMaximization(unittest.TestCase):
    def test_quadratic_projects(self):
        spec = variance_problem(2.0, 1.0, 1.0)
        np.testing.assert_allclose(maximize_control(spec, 1.0), [0.5])
        np.testing.assert_allclose(maximize_control(spec, 3.0), [1.0])
        np.testing.assert_allclose(maximize_control(spec, -3.0), [-1.0])

    def test_costate_shape_checked(self):
        with self.assertRaises(DimensionMismatchError):
            maximize_control(variance_problem(2.0, 1.0, 1.0), [1.0, 2.0])

    def test_quartic_on_ball(self):
        np.testing.assert_allclose(maximize_control(quartic_problem(ControlSet.ball(5.0)), [2.0, 0.0]),
                                   [1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(maximize_control(quartic_problem(ControlSet.ball(0.5)), [0.0, 2.0]),
                                   [0.0, 0.5], atol=1e-12)

    def test_zero_costate_gives_zero_control(self):
        spec = quartic_problem(ControlSet.ball(1.0))
        np.testing.assert_array_equal(maximize_control(spec, [0.0, 0.0]), [0.0, 0.0])

    def test_wide_box_matches_ball(self):
        r = np.random.default_rng(0).standard_normal((6, 2))
        in_box = maximize_controls(quartic_problem(ControlSet.centered_box(10.0, 2)), r)
        in_ball = maximize_controls(quartic_problem(ControlSet.ball(10.0)), r)
        np.testing.assert_allclose(in_box, in_ball, atol=1e-9)

    def test_tight_box_matches_bounded_minimizer(self):
        spec = quartic_problem(ControlSet.centered_box(0.5, 2))
        rng = np.random.default_rng(1)
        for r in 2.0 * rng.standard_normal((5, 2)):
            found = maximize_control(spec, r)
            reference = minimize(lambda u: float(spec.control_cost.value(u) - r @ u), np.zeros(2),
                                 bounds=[(-0.5, 0.5)] * 2, method='L-BFGS-B',
                                 options={'gtol': 1e-12, 'ftol': 1e-15})
            np.testing.assert_allclose(found, reference.x, atol=1e-6)

    def test_hamiltonian_value(self):
        spec = variance_problem(2.0, 1.0, 1.0)
        self.assertAlmostEqual(hamiltonian(spec, 0.0, [0.0], [1.0], [0.5]), 0.25)

    def test_maximizer_beats_grid(self):
        spec = quartic_problem(ControlSet.ball(1.0))
        r = np.array([0.7, -1.3])
        best = maximize_control(spec, r)
        x = np.zeros((1, 2))
        top = hamiltonian(spec, 0.0, x, r[None], best[None])
        for u in spec.control_set.grid(2):
            self.assertLessEqual(hamiltonian(spec, 0.0, x, r[None], u[None]), top + 1e-12)


class TestIntegration(unittest.TestCase):
    def test_free_motion(self):
        spec = variance_problem(2.0, 1.0, 1.0)
        grid = TimeGrid(1.0, 4)
        u = np.full((4, 2, 1), 0.5)
        states = integrate_forward(spec, u, ParticleEnsemble.from_list([0.0, 1.0]), grid)
        np.testing.assert_allclose(states[-1, :, 0], [0.5, 1.5])
        self.assertEqual(states.shape, (5, 2, 1))

    def test_attraction_contracts_spread(self):
        spec = ProblemSpec(1, 1.0, ControlCost(ControlCostKind.QUADRATIC, 1.0), ControlSet.centered_box(1.0, 1),
                           drift=(DriftTerm.attraction_to_mean(1.0),))
        grid = TimeGrid(1.0, 50)
        x0 = ParticleEnsemble.from_list([-1.0, 0.0, 2.0])
        states = integrate_forward(spec, np.zeros((50, 3, 1)), x0, grid)
        np.testing.assert_allclose(states.mean(axis=1)[:, 0], 1.0 / 3.0, atol=1e-13)
        spread = states[-1, :, 0] - 1.0 / 3.0
        np.testing.assert_allclose(spread, (x0.positions[:, 0] - 1.0 / 3.0) * np.exp(-1.0), rtol=1e-8)

    def test_divergence_reported(self):
        spec = ProblemSpec(1, 1.0, ControlCost(ControlCostKind.QUADRATIC, 1.0), ControlSet.centered_box(1.0, 1),
                           drift=(DriftTerm.linear_field([[1e100]]),))
        with np.errstate(over='ignore', invalid='ignore'):
            with self.assertRaises(DivergenceError):
                integrate_forward(spec, np.zeros((1, 1, 1)), ParticleEnsemble.from_list([1.0]), TimeGrid(1.0, 1))

    def test_costate_constant_without_drift_or_running_cost(self):
        spec = variance_problem(2.0, 1.0, 1.0)
        grid = TimeGrid(1.0, 3)
        states = integrate_forward(spec, np.zeros((3, 2, 1)), ParticleEnsemble.from_list([-1.0, 1.0]), grid)
        costates = integrate_backward(spec, states, np.zeros((3, 2, 1)), grid)
        np.testing.assert_allclose(costates[:, :, 0], np.tile([-1.0, 1.0], (4, 1)))

    def test_costate_constant_under_translation(self):
        spec = ProblemSpec(1, 1.0, ControlCost(ControlCostKind.QUADRATIC, 2.0), ControlSet.centered_box(1.0, 1),
                           final_cost=FunctionalDescriptor.variance(-0.5),
                           drift=(DriftTerm.constant_field([0.3]),))
        grid = TimeGrid(1.0, 5)
        u = np.zeros((5, 2, 1))
        states = integrate_forward(spec, u, ParticleEnsemble.from_list([-1.0, 1.0]), grid)
        costates = integrate_backward(spec, states, u, grid)
        np.testing.assert_allclose(costates[:, :, 0], np.tile([-1.0, 1.0], (6, 1)), atol=1e-14)

    def test_running_cost_drives_costate(self):
        # L = int |x|^2, no drift: r' = 2x, so r(0) = -2 int_0^T x dt for static particles
        spec = ProblemSpec(1, 1.0, ControlCost(ControlCostKind.QUADRATIC, 1.0), ControlSet.centered_box(1.0, 1),
                           running_cost=FunctionalDescriptor.potential('quadratic', 2.0))
        grid = TimeGrid(1.0, 8)
        u = np.zeros((8, 1, 1))
        states = integrate_forward(spec, u, ParticleEnsemble.from_list([0.5]), grid)
        costates = integrate_backward(spec, states, u, grid)
        self.assertAlmostEqual(costates[0, 0, 0], -1.0, places=12)
        self.assertAlmostEqual(costates[-1, 0, 0], 0.0)


class TestForwardBackwardSweep(unittest.TestCase):
    def test_coercive_variance_problem(self):
        spec = variance_problem(2.0, 1.0, 1.0)
        result = solve_fbsm(spec, ParticleEnsemble.from_list([-0.5, 0.5]), TimeGrid(1.0, 10))
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.triple.controls[:, :, 0], np.tile([-0.5, 0.5], (10, 1)), atol=1e-8)
        self.assertAlmostEqual(result.cost, -0.25, places=8)
        self.assertLess(pmp_residual(spec, result.triple), 1e-8)

    def test_bang_controls(self):
        spec = variance_problem(0.8, 1.0, 1.0)
        result = solve_fbsm(spec, ParticleEnsemble.from_list([-0.5, 0.5]), TimeGrid(1.0, 10))
        self.assertTrue(result.converged)
        np.testing.assert_allclose(result.triple.controls[:, :, 0], np.tile([-1.0, 1.0], (10, 1)), atol=1e-8)

    def test_single_particle_stays_put(self):
        result = solve_fbsm(variance_problem(2.0, 1.0, 1.0), ParticleEnsemble.from_list([0.3]), TimeGrid(1.0, 4))
        self.assertTrue(result.converged)
        self.assertEqual(result.iterations, 1)
        self.assertFalse(np.any(result.triple.controls))

    def test_iteration_cap_returns_best_iterate(self):
        result = solve_fbsm(variance_problem(2.0, 1.0, 1.0), ParticleEnsemble.from_list([-0.5, 0.5]),
                            TimeGrid(1.0, 10), max_iters=3)
        self.assertFalse(result.converged)
        self.assertEqual(result.iterations, 3)
        self.assertEqual(result.residual, min(result.residual_history))
        self.assertEqual(len(result.cost_history), 3)

    def test_relaxation_range(self):
        spec = variance_problem(2.0, 1.0, 1.0)
        with self.assertRaises(ValueError):
            solve_fbsm(spec, ParticleEnsemble.from_list([0.0]), TimeGrid(1.0, 2), relaxation=0.0)

    def test_grid_must_cover_horizon(self):
        with self.assertRaises(ValueError):
            solve_fbsm(variance_problem(2.0, 1.0, 1.0), ParticleEnsemble.from_list([0.0]), TimeGrid(2.0, 2))

    def test_attraction_with_kernel_converges(self):
        spec = ProblemSpec(
            2, 0.5, ControlCost(ControlCostKind.QUADRATIC_QUARTIC, 1.0, 0.5), ControlSet.ball(1.0),
            final_cost=FunctionalDescriptor.potential('gaussian', -1.0, [0.5, 0.0], 0.7),
            running_cost=FunctionalDescriptor.potential('quadratic', 0.1),
            drift=(DriftTerm.attraction_to_mean(0.5), DriftTerm.kernel_interaction(0.3, 0.5)))
        x0 = ParticleEnsemble(np.random.default_rng(2).uniform(-0.5, 0.5, size=(4, 2)))
        result = solve_fbsm(spec, x0, TimeGrid(0.5, 10), tol=1e-9)
        self.assertTrue(result.converged)
        self.assertLess(pmp_residual(spec, result.triple), 1e-6)
        self.assertTrue(spec.control_set.contains(result.triple.controls))

    def test_total_cost_is_minimal_among_perturbations(self):
        spec = variance_problem(2.0, 1.0, 1.0)
        grid = TimeGrid(1.0, 10)
        x0 = ParticleEnsemble.from_list([-0.5, 0.1, 0.4])
        result = solve_fbsm(spec, x0, grid)
        rng = np.random.default_rng(3)
        for _ in range(5):
            u = result.triple.controls + 0.05 * rng.standard_normal(result.triple.controls.shape)
            states = integrate_forward(spec, u, x0, grid)
            self.assertGreater(total_cost(spec, states, u, grid), result.cost)

    def test_cost_non_increasing_under_damping(self):
        x0 = ParticleEnsemble(sample_uniform(8, 1))
        for lam in (1.5, 2.0, 3.0):
            for relaxation in (0.3, 0.5):
                result = solve_fbsm(variance_problem(lam, 1.0, 1.0), x0, TimeGrid(1.0, 10), relaxation=relaxation)
                with self.subTest(lam=lam, relaxation=relaxation):
                    self.assertTrue(result.converged)
                    self.assertGreater(len(result.cost_history), 5)
                    self.assertLessEqual(np.diff(result.cost_history).max(), 1e-12)

    def test_hamiltonian_maximized_along_converged_triple(self):
        spec = ProblemSpec(
            2, 0.5, ControlCost(ControlCostKind.QUADRATIC_QUARTIC, 1.0, 0.5), ControlSet.ball(1.0),
            final_cost=FunctionalDescriptor.potential('gaussian', -1.0, [0.5, 0.0], 0.7),
            drift=(DriftTerm.attraction_to_mean(0.5), DriftTerm.kernel_interaction(0.3, 0.5)))
        x0 = ParticleEnsemble(np.random.default_rng(2).uniform(-0.5, 0.5, size=(4, 2)))
        grid = TimeGrid(0.5, 10)
        triple = solve_fbsm(spec, x0, grid, tol=1e-11).triple
        means = interval_costates(spec, triple.states, triple.costates, grid)
        rng = np.random.default_rng(6)
        for k in range(grid.M):
            t, x, r, u = k * grid.step, triple.states[k], means[k], triple.controls[k]
            best = hamiltonian(spec, t, x, r, u)
            for scale in (1.5, 0.01):
                v = spec.control_set.project(u + scale * rng.standard_normal(u.shape))
                self.assertGreaterEqual(best, hamiltonian(spec, t, x, r, v) - 1e-10)

    def test_reproduces_closed_form_on_fine_grid(self):
        for lam in (1.5, 3.0):
            for n in (32, 64):
                x0 = ParticleEnsemble(sample_uniform(n, 1))
                result = solve_fbsm(variance_problem(lam, 1.0, 1.0), x0, TimeGrid(1.0, 200))
                expected = closed_form_control(VarianceInstance(x0, lam, 1.0, 1.0))
                with self.subTest(lam=lam, n=n):
                    self.assertTrue(result.converged)
                    np.testing.assert_allclose(result.triple.controls, np.broadcast_to(expected, (200, n, 1)),
                                               atol=1e-6)


def relaxing_variance_problem():
    """x' = -x/2 + u with final cost -Var/2 and lambda = 2; the box never binds"""
    return ProblemSpec(1, 1.0, ControlCost(ControlCostKind.QUADRATIC, 2.0), ControlSet.centered_box(100.0, 1),
                       final_cost=FunctionalDescriptor.variance(-0.5), drift=(DriftTerm.linear_field([[-0.5]]),))


def piecewise_constant_optimum(x0, M, a=-0.5, lam=2.0, T=1.0):
    """Exact minimizer over controls constant on each interval, shape (M, N)"""
    h = T / M
    t = np.arange(M + 1) * h
    weights = (np.exp(a * (T - t[:-1])) - np.exp(a * (T - t[1:]))) / a
    spread = x0 - x0.mean()
    final_spread = np.exp(a * T) * spread / (1.0 - np.sum(weights ** 2) / (h * lam))
    return np.outer(weights, final_spread) / (h * lam)


class TestGridRefinement(unittest.TestCase):
    x0 = np.array([-0.6, -0.1, 0.2, 0.5])

    def solve(self, M):
        result = solve_fbsm(relaxing_variance_problem(), ParticleEnsemble.from_list(list(self.x0)),
                            TimeGrid(1.0, M), tol=1e-13)
        self.assertTrue(result.converged)
        return result.triple.controls[:, :, 0]

    def test_fourth_order_against_piecewise_constant_optimum(self):
        errors = [np.abs(self.solve(M) - piecewise_constant_optimum(self.x0, M)).max() for M in (8, 16)]
        self.assertLess(errors[1], 1e-7)
        self.assertGreaterEqual(np.log2(errors[0] / errors[1]), 3.5)

    def test_piecewise_constant_controls_refine_at_second_order(self):
        controls = {M: self.solve(M) for M in (8, 16, 32)}
        gaps = [np.abs(controls[M] - controls[2 * M].reshape(M, 2, -1).mean(axis=1)).max() for M in (8, 16)]
        order = np.log2(gaps[0] / gaps[1])
        self.assertGreater(order, 1.8)
        self.assertLess(order, 2.2)


class TestTripleTables(unittest.TestCase):
    def test_tables_restore_the_triple(self):
        result = solve_fbsm(variance_problem(2.0, 1.0, 1.0), ParticleEnsemble.from_list([-0.5, 0.5]),
                            TimeGrid(1.0, 4))
        tables = triple_to_tables(result.triple)
        self.assertTrue(tables['states'].startswith("4 2 1\n"))
        self.assertEqual(len(tables['controls'].splitlines()), 5)
        restored = triple_from_tables(tables)
        np.testing.assert_array_equal(restored.states, result.triple.states)
        np.testing.assert_array_equal(restored.controls, result.triple.controls)
        self.assertEqual(restored.grid.M, 4)

    def test_directory_round_trip(self):
        result = solve_fbsm(variance_problem(2.0, 1.0, 1.0), ParticleEnsemble.from_list([-0.5, 0.5]),
                            TimeGrid(1.0, 4))
        with tempfile.TemporaryDirectory() as tmp:
            with ArtifactStore(tmp) as store:
                path = store.write_triple('trajectory', result.triple)
            restored = triple_from_directory(path)
        np.testing.assert_array_equal(restored.costates, result.triple.costates)
        self.assertEqual(sorted(store.written), ['trajectory/controls.txt', 'trajectory/costates.txt',
                                                 'trajectory/states.txt'])

    def test_header_disagreement(self):
        result = solve_fbsm(variance_problem(2.0, 1.0, 1.0), ParticleEnsemble.from_list([0.0]), TimeGrid(1.0, 2))
        tables = triple_to_tables(result.triple)
        tables['controls'] = tables['controls'].replace("2 1 1", "2 2 1", 1)
        with self.assertRaises(ValueError):
            triple_from_tables(tables)


if __name__ == '__main__':
    unittest.main()
