import json
import os
import tempfile
import unittest
from pathlib import Path

from cli import EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, load_config, main
from errors import ConfigError

CONFIG_DIR = Path(__file__).parent / 'configs'

VARIANCE = """\
# small final-variance instance
grid.T = 1.0
grid.M = 8
problem.final_cost = variance
problem.final_cost.weight = -0.5
problem.control_cost = quadratic
problem.control_cost.weight = 2.0
problem.control_set = box
problem.control_set.bound = 1.0
ensemble.N = 4
"""


class TestLoadConfig(unittest.TestCase):
    def assertDiagnostic(self, text, expected):
        with self.assertRaises(ConfigError) as ctx:
            load_config(text)
        self.assertIn(expected, ctx.exception.diagnostics)

    def test_shipped_configs_load(self):
        for path in sorted(CONFIG_DIR.glob('*.cfg')):
            with self.subTest(config=path.name):
                config = load_config(path.read_text())
                self.assertGreater(config.grid.M, 0)

    def test_variance_config(self):
        config = load_config((CONFIG_DIR / 'pv_lambda2.cfg').read_text())
        self.assertEqual(config.problem.variance_parameters(), (2.0, 1.0))
        self.assertEqual(config.get('ensemble.N'), 32)
        self.assertEqual(config.get('analysis.run'), ['coercivity', 'lipschitz', 'oracle'])
        self.assertEqual(len(config.sha256), 64)

    def test_drift_parameters_nest(self):
        config = load_config((CONFIG_DIR / 'kernel_attraction.cfg').read_text())
        kernel = config.problem.drift[1]
        self.assertEqual(kernel.params['width'], 0.5)
        self.assertEqual(kernel.schedule.factor(0.75), 0.5)

    def test_defaults(self):
        config = load_config(VARIANCE)
        self.assertEqual(config.get('ensemble.sampler'), 'uniform')
        self.assertEqual(config.get('coercivity.mode'), 'auto')
        self.assertIsNone(config.x0)

    def test_unknown_key(self):
        self.assertDiagnostic(VARIANCE + "solver.method = newton\n", "11: solver.method: unknown key")

    def test_type_error(self):
        text = VARIANCE.replace("grid.M = 8", "grid.M = 1.5")
        self.assertDiagnostic(text, "3: grid.M: expected an integer, got 1.5")

    def test_range_error(self):
        text = VARIANCE.replace("grid.T = 1.0", "grid.T = -1")
        self.assertDiagnostic(text, "2: grid.T: must be positive")

    def test_required_key(self):
        text = VARIANCE.replace("grid.T = 1.0\n", "")
        self.assertDiagnostic(text, "0: grid.T: required key missing")

    def test_duplicate_key(self):
        self.assertDiagnostic(VARIANCE + "grid.M = 16\n", "11: grid.M: duplicate key (first set on line 3)")

    def test_unknown_sampler(self):
        self.assertDiagnostic(VARIANCE + "ensemble.sampler = sobol\n",
                              "11: ensemble.sampler: unknown value(s) ['sobol'], expected one of "
                              "['gaussian', 'uniform']")

    def test_non_convex_control_cost(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config(VARIANCE.replace("control_cost = quadratic", "control_cost = abs"))
        self.assertTrue(any(d.startswith("6: problem.control_cost: (H)(ii)") for d in ctx.exception.diagnostics))

    def test_positions_dimension(self):
        self.assertDiagnostic(VARIANCE + "problem.x0 = [[0.0, 1.0]]\n",
                              "11: problem.x0: positions have dimension 2, problem.d is 1")

    def test_explicit_positions(self):
        config = load_config(VARIANCE + "problem.x0 = [-0.5, 0.5]\n")
        self.assertEqual(config.initial_ensemble(0).n, 2)


class TestMain(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def run_main(self, command, text, *extra, out='out'):
        config = self.root / 'experiment.cfg'
        config.write_text(text)
        status = main([command, '--config', str(config), '--out', str(self.root / out), *extra])
        return status, self.root / out

    def summary(self, out):
        return json.loads((out / 'summary.json').read_text())

    def test_solve_writes_trajectory(self):
        status, out = self.run_main('solve', VARIANCE)
        self.assertEqual(status, EXIT_OK)
        for name in ('states', 'costates', 'controls'):
            self.assertTrue((out / 'trajectory' / f'{name}.txt').exists())
        self.assertTrue((out / 'trajectory' / 'states.txt').read_text().startswith("8 4 1\n"))
        summary = self.summary(out)
        self.assertEqual(summary['schema'], 1)
        self.assertEqual(summary['exit_status'], 0)
        self.assertTrue(summary['solve']['converged'])
        self.assertTrue(summary['hypotheses']['passed'])

    def test_summary_is_reproducible(self):
        _, first = self.run_main('solve', VARIANCE, out='a')
        _, second = self.run_main('solve', VARIANCE, out='b')
        self.assertEqual((first / 'summary.json').read_text(), (second / 'summary.json').read_text())

    def test_run_with_analyses(self):
        text = VARIANCE + 'analysis.run = ["coercivity", "lipschitz", "oracle"]\n'
        status, out = self.run_main('run', text)
        self.assertEqual(status, EXIT_OK)
        self.assertTrue((out / 'coercivity.txt').exists())
        self.assertTrue((out / 'lipschitz_profile.csv').exists())
        summary = self.summary(out)
        self.assertAlmostEqual(summary['coercivity']['rho_hat'], 1.0, places=6)
        self.assertEqual(summary['coercivity']['verdict'], 'holds')
        self.assertLess(summary['oracle']['max_control_gap'], 1e-7)
        self.assertAlmostEqual(summary['lipschitz']['lip_hat'], 1.0, places=6)

    def test_coercivity_fails_below_horizon(self):
        text = VARIANCE.replace("weight = 2.0", "weight = 0.8")
        status, out = self.run_main('coercivity', text)
        self.assertEqual(status, EXIT_OK)
        self.assertEqual(self.summary(out)['coercivity']['verdict'], 'fails')

    def test_sweep(self):
        status, out = self.run_main('sweep', VARIANCE + "sweep.N_list = [2, 4]\n", '--threads', '2')
        self.assertEqual(status, EXIT_OK)
        lines = (out / 'sweep.csv').read_text().splitlines()
        self.assertEqual(lines[0], "N,cost,lip_hat,w1_to_ref,r_t,l_t,converged")
        self.assertEqual(len(lines), 3)

    def test_sweep_needs_particle_counts(self):
        status, _ = self.run_main('sweep', VARIANCE)
        self.assertEqual(status, EXIT_INVALID)

    def test_not_converged(self):
        status, out = self.run_main('solve', VARIANCE + "solver.max_iters = 2\n")
        self.assertEqual(status, EXIT_NOT_CONVERGED)
        self.assertFalse(self.summary(out)['solve']['converged'])
        self.assertTrue((out / 'trajectory' / 'controls.txt').exists())

    def test_invalid_config(self):
        status, out = self.run_main('solve', VARIANCE.replace("grid.M = 8", "grid.M = many"))
        self.assertEqual(status, EXIT_INVALID)
        self.assertFalse(out.exists())

    def test_zero_horizon(self):
        status, _ = self.run_main('solve', VARIANCE.replace("grid.T = 1.0", "grid.T = 0"))
        self.assertEqual(status, EXIT_INVALID)

    def test_oracle_needs_variance_instance(self):
        text = VARIANCE.replace("problem.final_cost = variance\nproblem.final_cost.weight = -0.5\n", "")
        status, out = self.run_main('oracle', text)
        self.assertEqual(status, EXIT_INVALID)
        self.assertIn('error', self.summary(out))

    def test_check(self):
        status, out = self.run_main('check', VARIANCE)
        self.assertEqual(status, EXIT_OK)
        self.assertTrue(self.summary(out)['fd_check']['final_cost']['passed'])

    def test_bad_seed(self):
        status, _ = self.run_main('solve', VARIANCE, '--seed', '-1')
        self.assertEqual(status, EXIT_INVALID)

    def test_missing_config_file(self):
        status = main(['solve', '--config', os.path.join(self.tmp.name, 'absent.cfg')])
        self.assertEqual(status, EXIT_INVALID)


if __name__ == '__main__':
    unittest.main()
