#!/usr/bin/env python3
"""
Smoke script to verify the solver environment and configuration
"""
import sys
import tempfile
from pathlib import Path


def test_imports():
    """Test if all required modules can be imported"""
    print("Testing imports...")
    try:
        import numpy
        print(f" [OK] numpy {numpy.__version__} installed")
    except ImportError:
        print(" [NO] numpy not installed")
        return False

    try:
        import scipy
        print(f" [OK] scipy {scipy.__version__} installed")
    except ImportError:
        print(" [NO] scipy not installed")
        return False

    try:
        import dotenv
        print(" [OK] python-dotenv installed")
    except ImportError:
        print(" [NO] python-dotenv not installed")
        return False

    return True


def test_config():
    """Test configuration"""
    print("\nTesting configuration...")

    try:
        from config import DENSE_EIGEN_CAP, FBSM_RELAXATION, FBSM_TOL, OUTPUT_DIR

        if 0 < FBSM_RELAXATION <= 1:
            print(f" [OK] FBSM relaxation {FBSM_RELAXATION}, tolerance {FBSM_TOL:.0e}")
        else:
            print(f" [NO] MFC_FBSM_RELAXATION must lie in (0, 1], got {FBSM_RELAXATION}")
            return False

        print(f" [OK] Dense eigen cap {DENSE_EIGEN_CAP}, output directory '{OUTPUT_DIR}'")
        return True

    except (ImportError, ValueError) as e:
        print(f" [NO] Error loading config: {e}")
        return False


def test_experiment_configs():
    """Every shipped experiment config passes the strict schema"""
    print("\nTesting experiment configs...")

    from cli import load_config
    from errors import ConfigError

    all_passed = True
    for path in sorted(Path(__file__).parent.joinpath('configs').glob('*.cfg')):
        try:
            config = load_config(path.read_text())
            print(f" [OK] {path.name}: d={config.problem.dimension}, M={config.grid.M}")
        except ConfigError as e:
            print(f" [NO] {path.name}:")
            for diagnostic in e.diagnostics:
                print(f"      {diagnostic}")
            all_passed = False
    return all_passed


def test_solver():
    """Tiny variance-maximization solve against its closed form"""
    print("\nTesting solver...")

    try:
        from models import ParticleEnsemble, TimeGrid
        from oracle_variance import closed_form_control, from_problem
        from pmp import solve_fbsm
        from problem import variance_problem
        from storage import ArtifactStore

        spec = variance_problem(2.0, 1.0, 1.0)
        x0 = ParticleEnsemble.from_list([-0.5, 0.5])
        result = solve_fbsm(spec, x0, TimeGrid(1.0, 8))
        if not result.converged:
            print(f" [NO] FBSM did not converge (residual {result.residual:.3e})")
            return False
        print(f" [OK] FBSM converged in {result.iterations} iterations, cost {result.cost:.6f}")

        gap = abs(result.triple.controls[0] - closed_form_control(from_problem(spec, x0))).max()
        if gap < 1e-7:
            print(f" [OK] Controls match the closed form (gap {gap:.1e})")
        else:
            print(f" [NO] Controls differ from the closed form by {gap:.3e}")
            return False

        with tempfile.TemporaryDirectory() as tmp:
            with ArtifactStore(tmp) as store:
                store.write_triple('trajectory', result.triple)
            print(f" [OK] Trajectory written ({len(store.written)} files)")

        return True

    except Exception as e:
        print(f" [NO] Solver error: {e}")
        return False


def main():
    """Run all checks"""
    print(" Mean-field control solver setup test\n")

    tests = [
        ("Imports", test_imports),
        ("Configuration", test_config),
        ("Experiment configs", test_experiment_configs),
        ("Solver", test_solver),
    ]

    results = []
    for test_name, test_func in tests:
        print(f"\n{'='*50}")
        success = test_func()
        results.append((test_name, success))

    print(f"\n{'='*50}")
    print("\n Test Summary:\n")

    all_passed = True
    for test_name, success in results:
        status = "PASSED" if success else "FAILED"
        print(f"{test_name}: {status}")
        if not success:
            all_passed = False

    if all_passed:
        print("\n All checks passed! The solver is ready.")
        print("\nTo run an experiment:")
        print("  python cli.py run --config configs/pv_lambda2.cfg")
    else:
        print("\n [NO] Some checks failed. Please fix the issues before running experiments.")
        sys.exit(1)


if __name__ == "__main__":
    main()
