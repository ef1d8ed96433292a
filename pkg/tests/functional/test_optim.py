"""
Functional tests for the CEM and CMA-ES minimizers.
"""

import math

import numpy as np
import pytest

from offroad_planner.errors import OptimizerError
from offroad_planner.optim import (
    BoxProblem,
    CemConfig,
    CmaConfig,
    benchmark_suite,
    cem_minimize,
    cma_minimize,
    minimize,
    rosenbrock,
    sphere,
)

START_4D = [3.0, -2.0, 4.0, 1.0]


def box(dim: int, half_width: float = 5.0):
    return np.full(dim, -half_width), np.full(dim, half_width)


class TestBoxProblem:
    """Test suite for box problem validation."""

    def test_inverted_bounds_rejected(self):
        """Test that lower >= upper is rejected."""
        with pytest.raises(OptimizerError):
            BoxProblem(np.array([1.0, 0.0]), np.array([1.0, 1.0]), objective=sphere)

    def test_shape_mismatch_rejected(self):
        """Test that bounds of different length are rejected."""
        with pytest.raises(OptimizerError):
            BoxProblem(np.zeros(2), np.ones(3), objective=sphere)

    def test_budget_below_population_rejected(self):
        """Test that CEM refuses a budget smaller than one generation."""
        problem = BoxProblem(*box(2), objective=sphere, budget=10)
        with pytest.raises(OptimizerError):
            cem_minimize(problem, CemConfig(population=16))

    def test_vectorized_objective_length_checked(self):
        """Test that a vectorized objective returning the wrong count fails."""
        problem = BoxProblem(*box(2), objective=lambda pop: np.zeros(3), vectorized=True)
        with pytest.raises(OptimizerError):
            cem_minimize(problem, CemConfig(population=8, elite_frac=0.25, iters=1))


@pytest.mark.smoke
class TestCem:
    """Test suite for the cross-entropy method."""

    def test_sphere_converges(self):
        """Test that CEM finds the origin of a 4-D sphere in 50 iterations."""
        problem = BoxProblem(*box(4), objective=sphere, seed=0)
        result = cem_minimize(
            problem, CemConfig(population=64, elite_frac=0.1, iters=50, init_mean=START_4D, init_std=2.0, min_std=1e-9)
        )

        assert np.linalg.norm(result.best_x) < 1e-3, f"Expected ||x|| < 1e-3, got {np.linalg.norm(result.best_x)}"
        assert len(result.trace) == 50
        assert result.evaluations == 64 * 50

    def test_full_elite_refit_is_population_mean(self):
        """Test that elite_frac = 1 refits the mean to the sample mean."""
        seen = []

        def objective(population):
            seen.append(population.copy())
            return np.sum(population ** 2, axis=1)

        problem = BoxProblem(*box(3), objective=objective, vectorized=True, seed=4)
        result = cem_minimize(problem, CemConfig(population=20, elite_frac=1.0, iters=1, init_std=1.5))

        assert len(seen) == 1
        np.testing.assert_allclose(result.mean, seen[0].mean(axis=0), rtol=0, atol=1e-12)

    def test_boundary_optimum(self):
        """Test that an optimum outside the box is found on the boundary."""
        problem = BoxProblem(np.array([0.0]), np.array([3.0]), objective=lambda x: float((x[0] - 4.0) ** 2), seed=1)
        result = cem_minimize(problem, CemConfig(population=32, elite_frac=0.25, iters=20, init_std=1.0))

        assert result.best_x[0] == pytest.approx(3.0, abs=1e-6)
        assert result.best_f == pytest.approx(1.0, abs=1e-5)

    def test_non_finite_objective_never_selected(self):
        """Test that NaN and inf values are treated as +inf."""

        def objective(x):
            if x[0] > 0:
                return math.nan
            if x[1] > 0:
                return math.inf
            return float(np.sum(x ** 2))

        problem = BoxProblem(*box(2), objective=objective, seed=2)
        result = cem_minimize(problem, CemConfig(population=32, elite_frac=0.25, iters=10, init_std=2.0))

        assert math.isfinite(result.best_f)
        assert result.best_x[0] <= 0.0 and result.best_x[1] <= 0.0

    def test_same_seed_bit_identical(self):
        """Test that identical seeds reproduce the incumbent exactly."""
        config = CemConfig(population=32, elite_frac=0.2, iters=15, init_mean=START_4D, init_std=2.0)
        a = cem_minimize(BoxProblem(*box(4), objective=rosenbrock, seed=9), config)
        b = cem_minimize(BoxProblem(*box(4), objective=rosenbrock, seed=9), config)

        assert np.array_equal(a.best_x, b.best_x)
        assert a.trace == b.trace

    def test_trace_monotone_and_in_box(self):
        """Test the incumbent never worsens and stays inside the box."""
        lower, upper = np.array([-1.0, 2.0, 0.0]), np.array([1.0, 4.0, 0.5])
        problem = BoxProblem(lower, upper, objective=rosenbrock, seed=5)
        result = cem_minimize(problem, CemConfig(population=24, elite_frac=0.25, iters=30, init_std=3.0))

        assert all(b <= a for a, b in zip(result.trace, result.trace[1:])), "Trace must be non-increasing"
        assert np.all(result.best_x >= lower) and np.all(result.best_x <= upper)

    def test_bad_elite_fraction(self):
        """Test that elite_frac outside (0, 1] and empty elites are rejected."""
        problem = BoxProblem(*box(2), objective=sphere)
        with pytest.raises(OptimizerError):
            cem_minimize(problem, CemConfig(elite_frac=0.0))
        with pytest.raises(OptimizerError):
            cem_minimize(problem, CemConfig(population=8, elite_frac=0.1))

    def test_budget_caps_evaluations(self):
        """Test that CEM stops at the evaluation budget."""
        problem = BoxProblem(*box(2), objective=sphere, budget=100)
        result = cem_minimize(problem, CemConfig(population=32, elite_frac=0.25, iters=50))

        assert result.evaluations == 96
        assert len(result.trace) == 3


class TestCma:
    """Test suite for CMA-ES."""

    def test_sphere_converges(self):
        """Test that CMA-ES reaches 1e-10 on a 4-D sphere within 3000 evaluations."""
        problem = BoxProblem(*box(4), objective=sphere, budget=3000, seed=0)
        result = cma_minimize(problem, CmaConfig(init_mean=START_4D, init_sigma=2.0))

        assert result.best_f < 1e-10, f"Expected f < 1e-10, got {result.best_f}"
        assert result.evaluations <= 3000

    def test_rosenbrock_converges(self):
        """Test that CMA-ES solves 2-D Rosenbrock within 5000 evaluations."""
        problem = BoxProblem(*box(2), objective=rosenbrock, budget=5000, seed=0)
        result = cma_minimize(problem, CmaConfig(init_mean=[-1.5, 2.0], init_sigma=0.5))

        assert result.best_f < 1e-6, f"Expected f < 1e-6, got {result.best_f}"
        np.testing.assert_allclose(result.best_x, [1.0, 1.0], atol=1e-2)

    def test_default_lambda(self):
        """Test lambda = 4 + floor(3 ln n) via the evaluation count."""
        problem = BoxProblem(*box(4), objective=sphere, seed=0)
        result = cma_minimize(problem, CmaConfig(iters=1))

        assert result.evaluations == 4 + int(math.floor(3 * math.log(4)))

    def test_zero_sigma_rejected(self):
        """Test that init_sigma = 0 violates the precondition."""
        with pytest.raises(OptimizerError):
            cma_minimize(BoxProblem(*box(2), objective=sphere), CmaConfig(init_sigma=0.0))

    def test_small_lambda_rejected(self):
        """Test that lambda < 4 is rejected."""
        with pytest.raises(OptimizerError):
            cma_minimize(BoxProblem(*box(2), objective=sphere), CmaConfig(lam=3))

    def test_same_seed_bit_identical(self):
        """Test that identical seeds reproduce the incumbent exactly."""
        config = CmaConfig(init_mean=[-1.5, 2.0], init_sigma=0.5, iters=40)
        a = cma_minimize(BoxProblem(*box(2), objective=rosenbrock, seed=3), config)
        b = cma_minimize(BoxProblem(*box(2), objective=rosenbrock, seed=3), config)

        assert np.array_equal(a.best_x, b.best_x)

    def test_trace_monotone_and_in_box(self):
        """Test the incumbent never worsens and stays inside a tight box."""
        lower, upper = np.array([2.0, 2.0]), np.array([3.0, 3.0])
        problem = BoxProblem(lower, upper, objective=rosenbrock, seed=1)
        result = cma_minimize(problem, CmaConfig(init_sigma=1.0, iters=60))

        assert all(b <= a for a, b in zip(result.trace, result.trace[1:]))
        assert np.all(result.best_x >= lower) and np.all(result.best_x <= upper)


class TestDispatch:
    """Test suite for config-driven optimizer selection."""

    def test_cem_settings(self):
        """Test that an optimizer config section selects CEM."""
        settings = {"method": "cem", "population": 16, "elite_frac": 0.25, "iters": 3, "init_std": 1.0, "min_std": 1e-6}
        result = minimize(BoxProblem(*box(2), objective=sphere), settings)

        assert result.method == "cem"
        assert result.evaluations == 48

    def test_cma_settings(self):
        """Test that an optimizer config section selects CMA-ES with warm start."""
        settings = {"method": "cma", "lambda": 6, "init_sigma": 0.2, "iters": 2}
        result = minimize(BoxProblem(*box(2), objective=sphere), settings, init_mean=[1.0, 1.0])

        assert result.method == "cma"
        assert result.evaluations == 12

    def test_unknown_method(self):
        """Test that an unknown method name is rejected."""
        with pytest.raises(OptimizerError):
            minimize(BoxProblem(*box(2), objective=sphere), {"method": "pso"})


class TestBenchmarkSuite:
    """Test suite for the reference benchmark runs."""

    def test_rows_meet_targets(self):
        """Test that each reference run reaches its acceptance target."""
        rows = {(r.name, r.method): r for r in benchmark_suite(seed=0)}

        assert np.linalg.norm(rows[("sphere", "cem")].best_x) < 1e-3
        assert rows[("boundary", "cem")].best_x[0] == pytest.approx(3.0, abs=1e-6)
        assert rows[("sphere", "cma")].best_f < 1e-10
        assert rows[("rosenbrock", "cma")].best_f < 1e-6
