"""
Derivative-free box-bounded minimizers: cross-entropy method and CMA-ES.

Both draw a whole generation from their seeded generator before any
objective is evaluated, so results do not depend on evaluation parallelism.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from offroad_planner.errors import OptimizerError
from offroad_planner.parallel import map_ordered

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]


@dataclass
class BoxProblem:
    """Minimize objective over lower <= x <= upper."""

    lower: np.ndarray
    upper: np.ndarray
    objective: Callable
    budget: int = 10 ** 9
    seed: int = 0
    # When True, objective maps an (N, dim) population to N values in one call.
    vectorized: bool = False

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise OptimizerError(f"Bounds shapes differ: {self.lower.shape} vs {self.upper.shape}")
        if not np.all(self.lower < self.upper):
            raise OptimizerError("Every lower bound must be strictly below its upper bound")
        if self.budget < 1:
            raise OptimizerError(f"budget must be positive, got {self.budget}")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)


@dataclass
class OptimResult:
    best_x: np.ndarray
    best_f: float
    trace: List[float]
    evaluations: int
    mean: np.ndarray
    method: str


@dataclass(frozen=True)
class CemConfig:
    population: int = 64
    elite_frac: float = 0.1
    iters: int = 50
    init_mean: Optional[ArrayLike] = None
    init_std: ArrayLike = 1.0
    min_std: float = 1e-6


@dataclass(frozen=True)
class CmaConfig:
    lam: Optional[int] = None
    init_mean: Optional[ArrayLike] = None
    init_sigma: float = 0.3
    iters: int = 1000
    max_resample: int = 100


def evaluate_population(problem: BoxProblem, population: np.ndarray) -> np.ndarray:
    """Evaluate a population; non-finite objective values become +inf."""
    if problem.vectorized:
        values = np.asarray(problem.objective(population), dtype=np.float64).reshape(-1)
        if values.shape[0] != population.shape[0]:
            raise OptimizerError(f"Vectorized objective returned {values.shape[0]} values for {population.shape[0]} samples")
    else:
        values = np.asarray(map_ordered(problem.objective, list(population)), dtype=np.float64)
    return np.where(np.isfinite(values), values, np.inf)


def _initial_mean(problem: BoxProblem, init_mean: Optional[ArrayLike]) -> np.ndarray:
    if init_mean is None:
        return 0.5 * (problem.lower + problem.upper)
    mean = np.broadcast_to(np.asarray(init_mean, dtype=np.float64), (problem.dim,)).copy()
    if not np.all(np.isfinite(mean)):
        raise OptimizerError("init_mean must be finite")
    return problem.clip(mean)


def cem_minimize(problem: BoxProblem, config: CemConfig = CemConfig()) -> OptimResult:
    """
    Cross-entropy method with a diagonal Gaussian clipped to the box.

    Each iteration samples `population` points, refits mean/std to the elite
    fraction and floors the std at min_std. The best point ever evaluated is
    returned.
    """
    if not 0.0 < config.elite_frac <= 1.0:
        raise OptimizerError(f"elite_frac must lie in (0, 1], got {config.elite_frac}")
    n_elite = int(math.floor(config.population * config.elite_frac))
    if n_elite < 1:
        raise OptimizerError("population * elite_frac must be at least 1")
    if problem.budget < config.population:
        raise OptimizerError(f"budget {problem.budget} is below the population size {config.population}")

    rng = np.random.default_rng(problem.seed)
    mean = _initial_mean(problem, config.init_mean)
    std = np.broadcast_to(np.asarray(config.init_std, dtype=np.float64), (problem.dim,)).copy()
    if np.any(std < 0) or not np.all(np.isfinite(std)):
        raise OptimizerError("init_std must be finite and non-negative")
    std = np.maximum(std, config.min_std)

    best_x, best_f = mean.copy(), math.inf
    trace: List[float] = []
    evaluations = 0

    for iteration in range(config.iters):
        if evaluations + config.population > problem.budget:
            break
        samples = problem.clip(mean + std * rng.standard_normal((config.population, problem.dim)))
        values = evaluate_population(problem, samples)
        evaluations += config.population

        order = np.argsort(values, kind="stable")
        elite = samples[order[:n_elite]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), config.min_std)

        if values[order[0]] < best_f:
            best_f = float(values[order[0]])
            best_x = samples[order[0]].copy()
        trace.append(best_f)
        logger.debug(f"CEM iter {iteration}: best_f={best_f:.6g} mean_std={std.mean():.3g}")

    return OptimResult(best_x=best_x, best_f=best_f, trace=trace, evaluations=evaluations, mean=mean, method="cem")


def _eigen(C: np.ndarray):
    """Eigendecomposition of a covariance; None when not positive definite."""
    C = np.triu(C) + np.triu(C, 1).T
    if not np.all(np.isfinite(C)):
        return None
    eigvals, B = np.linalg.eigh(C)
    if np.min(eigvals) <= 0.0:
        return None
    return C, B, np.sqrt(eigvals)


def cma_minimize(problem: BoxProblem, config: CmaConfig = CmaConfig()) -> OptimResult:
    """
    (mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu covariance updates and
    cumulative step-size adaptation.

    Out-of-box candidates are resampled up to max_resample times, then clipped.
    """
    n = problem.dim
    lam = config.lam if config.lam is not None else 4 + int(math.floor(3 * math.log(n)))
    if lam < 4:
        raise OptimizerError(f"lambda must be >= 4, got {lam}")
    if not (math.isfinite(config.init_sigma) and config.init_sigma > 0):
        raise OptimizerError(f"init_sigma must be positive, got {config.init_sigma}")
    if problem.budget < lam:
        raise OptimizerError(f"budget {problem.budget} is below the population size {lam}")

    mu = lam // 2
    weights = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mueff = 1.0 / np.sum(weights ** 2)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n ** 2))

    rng = np.random.default_rng(problem.seed)
    mean = _initial_mean(problem, config.init_mean)
    sigma = float(config.init_sigma)
    pc = np.zeros(n)
    ps = np.zeros(n)
    C, B, D = np.eye(n), np.eye(n), np.ones(n)
    inv_sqrt_C = np.eye(n)

    best_x, best_f = mean.copy(), math.inf
    trace: List[float] = []
    evaluations = 0

    for iteration in range(config.iters):
        if evaluations + lam > problem.budget:
            break

        samples = np.empty((lam, n))
        for k in range(lam):
            for _ in range(config.max_resample):
                candidate = mean + sigma * (B @ (D * rng.standard_normal(n)))
                if problem.contains(candidate):
                    break
            samples[k] = problem.clip(candidate)
        values = evaluate_population(problem, samples)
        evaluations += lam

        order = np.argsort(values, kind="stable")
        if values[order[0]] < best_f:
            best_f = float(values[order[0]])
            best_x = samples[order[0]].copy()
        trace.append(best_f)

        y = (samples[order[:mu]] - mean) / sigma
        y_mean = weights @ y
        mean = mean + sigma * y_mean

        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (inv_sqrt_C @ y_mean)
        ps_norm = np.linalg.norm(ps)
        hsig = float(ps_norm / math.sqrt(1 - (1 - cs) ** (2 * evaluations / lam)) / chi_n < 1.4 + 2 / (n + 1))
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * y_mean

        C = (
            (1 - c1 - cmu) * C
            + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * C)
            + cmu * (y.T * weights) @ y
        )
        sigma *= math.exp((cs / damps) * (ps_norm / chi_n - 1))

        decomposed = _eigen(C)
        if decomposed is None:
            logger.warning(f"CMA-ES iter {iteration}: covariance lost positive definiteness, resetting to identity")
            C, B, D = np.eye(n), np.eye(n), np.ones(n)
            pc = np.zeros(n)
        else:
            C, B, D = decomposed
        inv_sqrt_C = B @ np.diag(1.0 / D) @ B.T

        logger.debug(f"CMA-ES iter {iteration}: best_f={best_f:.6g} sigma={sigma:.3g}")
        if not math.isfinite(sigma) or sigma * D.max() < 1e-15:
            break

    return OptimResult(best_x=best_x, best_f=best_f, trace=trace, evaluations=evaluations, mean=mean, method="cma")


def minimize(problem: BoxProblem, settings: Dict[str, Any], init_mean: Optional[ArrayLike] = None) -> OptimResult:
    """
    Dispatch to CEM or CMA-ES from an `optimizer.*` config section.

    Args:
        problem: Box problem to minimize
        settings: Dict with method, population, elite_frac, iters, init_std,
            min_std, lambda and init_sigma
        init_mean: Warm start, e.g. the previous tick's shifted solution
    """
    method = settings.get("method", "cem")
    if method == "cem":
        config = CemConfig(
            population=int(settings.get("population", 64)),
            elite_frac=float(settings.get("elite_frac", 0.1)),
            iters=int(settings.get("iters", 50)),
            init_mean=init_mean,
            init_std=settings.get("init_std", 1.0),
            min_std=float(settings.get("min_std", 1e-6)),
        )
        return cem_minimize(problem, config)
    if method == "cma":
        config = CmaConfig(
            lam=settings.get("lambda"),
            init_mean=init_mean,
            init_sigma=float(settings.get("init_sigma", 0.3)),
            iters=int(settings.get("iters", 1000)),
        )
        return cma_minimize(problem, config)
    raise OptimizerError(f"Unknown optimizer method '{method}'")


def sphere(x: np.ndarray) -> float:
    return float(np.sum(np.asarray(x) ** 2))


def rosenbrock(x: np.ndarray) -> float:
    x = np.asarray(x)
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


@dataclass
class BenchmarkRow:
    name: str
    method: str
    dim: int
    best_f: float
    evaluations: int
    best_x: List[float] = field(default_factory=list)


def benchmark_suite(seed: int = 0) -> List[BenchmarkRow]:
    """Reference runs: sphere and boundary optimum for CEM, sphere and Rosenbrock for CMA-ES."""
    rows: List[BenchmarkRow] = []

    def record(name: str, result: OptimResult):
        rows.append(BenchmarkRow(name, result.method, len(result.best_x), result.best_f,
                                 result.evaluations, [float(v) for v in result.best_x]))

    box4 = (np.full(4, -5.0), np.full(4, 5.0))
    record("sphere", cem_minimize(
        BoxProblem(*box4, objective=sphere, seed=seed),
        CemConfig(population=64, elite_frac=0.1, iters=50, init_mean=[3.0, -2.0, 4.0, 1.0], init_std=2.0, min_std=1e-9),
    ))
    record("boundary", cem_minimize(
        BoxProblem(np.array([0.0]), np.array([3.0]), objective=lambda x: float((x[0] - 4.0) ** 2), seed=seed),
        CemConfig(population=32, elite_frac=0.25, iters=20, init_std=1.0),
    ))
    record("sphere", cma_minimize(
        BoxProblem(*box4, objective=sphere, budget=3000, seed=seed),
        CmaConfig(init_mean=[3.0, -2.0, 4.0, 1.0], init_sigma=2.0),
    ))
    record("rosenbrock", cma_minimize(
        BoxProblem(np.full(2, -5.0), np.full(2, 5.0), objective=rosenbrock, budget=5000, seed=seed),
        CmaConfig(init_mean=[-1.5, 2.0], init_sigma=0.5),
    ))
    return rows
