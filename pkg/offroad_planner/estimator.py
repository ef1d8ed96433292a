"""
Moving horizon estimation of the vehicle state and slow model parameters.

The decision vector is the window-initial state (6 entries) followed by the
enabled parameters in the fixed order phi, cr0, cr2. The window is rolled
forward with the vehicle model under the candidate parameters and compared
with every measurement present; a diagonal Gaussian prior on the initial
state stands in for the arrival cost.
"""

import dataclasses
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from offroad_planner.errors import DomainError, EstimationError, IntegrationError
from offroad_planner.vehicle import (
    PHI,
    PSI,
    SIGMA,
    SIGMA_MIN,
    STATE_DIM,
    V,
    X,
    Y,
    ControlInput,
    ModelParams,
    VehicleState,
    derivative_array,
    rk4_array,
    wrap_angle,
)

logger = logging.getLogger(__name__)

PARAM_ORDER = ("phi", "cr0", "cr2")
STATE_FIELDS = ("x", "y", "psi", "v", "phi", "sigma")
LAMBDA_MAX = 1e10


@dataclass(frozen=True)
class Measurement:
    """One sensor reading; any channel may be None."""

    t: float
    gps_xy: Optional[Tuple[float, float]] = None
    gps_psi: Optional[float] = None
    accel: Optional[float] = None
    speed: Optional[float] = None
    gps_xy_std: float = 0.1
    gps_psi_std: float = 0.05
    accel_std: float = 0.2
    speed_std: float = 0.1

    def __post_init__(self):
        for name in ("gps_xy_std", "gps_psi_std", "accel_std", "speed_std"):
            if not getattr(self, name) > 0:
                raise DomainError(f"Measurement.{name} must be > 0")

    @property
    def empty(self) -> bool:
        return self.gps_xy is None and self.gps_psi is None and self.accel is None and self.speed is None


@dataclass
class MheProblem:
    window: Sequence[Tuple[Measurement, ControlInput]]
    prior_state: VehicleState
    prior_std: Dict[str, float]
    params: ModelParams
    estimate_params: Dict[str, bool] = field(default_factory=lambda: {"phi": True, "cr0": True, "cr2": True})
    param_prior_std: Dict[str, Optional[float]] = field(default_factory=dict)
    v_max: Optional[float] = None

    def __post_init__(self):
        if len(self.window) < 2:
            raise DomainError(f"MHE window needs at least 2 entries, got {len(self.window)}")
        times = np.array([m.t for m, _ in self.window])
        if np.any(np.diff(times) <= 0):
            raise DomainError("Measurement timestamps must be strictly increasing")
        if np.any(np.diff(times) > 1.0):
            raise DomainError("Measurement spacing must not exceed 1 s")
        if any(m.empty for m, _ in self.window):
            raise DomainError("Every window entry needs at least one measurement channel")
        missing = [k for k in STATE_FIELDS if k not in self.prior_std]
        if missing or any(self.prior_std[k] <= 0 for k in STATE_FIELDS):
            raise DomainError(f"prior_std needs positive entries for {STATE_FIELDS}")
        self._layout = _Layout(self)

    @property
    def enabled_params(self) -> Tuple[str, ...]:
        return tuple(p for p in PARAM_ORDER if self.estimate_params.get(p, False))

    @property
    def dimension(self) -> int:
        return STATE_DIM + len(self.enabled_params)

    def initial_guess(self) -> np.ndarray:
        guess = [self.prior_state.as_array()]
        values = {"phi": self.prior_state.phi, "cr0": self.params.cr0, "cr2": self.params.cr2}
        guess.append(np.array([values[p] for p in self.enabled_params]))
        return np.concatenate(guess)


class _Layout:
    """Measurement arrays of a window, grouped by channel."""

    def __init__(self, problem: MheProblem):
        entries = [m for m, _ in problem.window]
        self.times = np.array([m.t for m in entries])
        self.dts = np.diff(self.times)
        self.inputs = np.array([c.as_array() for _, c in problem.window])
        self.xy_idx = np.array([k for k, m in enumerate(entries) if m.gps_xy is not None], dtype=int)
        self.xy = np.array([entries[k].gps_xy for k in self.xy_idx], dtype=np.float64).reshape(-1, 2)
        self.xy_std = np.array([entries[k].gps_xy_std for k in self.xy_idx])
        self.psi_idx = np.array([k for k, m in enumerate(entries) if m.gps_psi is not None], dtype=int)
        self.psi = np.array([entries[k].gps_psi for k in self.psi_idx], dtype=np.float64)
        self.psi_std = np.array([entries[k].gps_psi_std for k in self.psi_idx])
        self.acc_idx = np.array([k for k, m in enumerate(entries) if m.accel is not None], dtype=int)
        self.acc = np.array([entries[k].accel for k in self.acc_idx], dtype=np.float64)
        self.acc_std = np.array([entries[k].accel_std for k in self.acc_idx])
        self.spd_idx = np.array([k for k, m in enumerate(entries) if m.speed is not None], dtype=int)
        self.spd = np.array([entries[k].speed for k in self.spd_idx], dtype=np.float64)
        self.spd_std = np.array([entries[k].speed_std for k in self.spd_idx])
        self.prior = problem.prior_state.as_array()
        self.prior_std = np.array([problem.prior_std[k] for k in STATE_FIELDS])


def _rollout_candidates(problem: MheProblem, decisions: np.ndarray) -> Tuple[np.ndarray, Any]:
    """Trajectories (K, N_w, 6) and the parameter columns for K decision vectors."""
    layout = problem._layout
    k = decisions.shape[0]
    states = decisions[:, :STATE_DIM].copy()
    overrides = {}
    for j, name in enumerate(problem.enabled_params):
        column = decisions[:, STATE_DIM + j]
        if name == "phi":
            states[:, PHI] = column
        else:
            overrides[name] = column
    params = problem.params.columns(**overrides)
    n = len(layout.times)
    traj = np.empty((k, n, STATE_DIM))
    traj[:, 0] = states
    for step in range(n - 1):
        traj[:, step + 1] = rk4_array(traj[:, step].copy(), layout.inputs[step], params, layout.dts[step], problem.v_max)
    return traj, params


def _residuals(problem: MheProblem, decisions: np.ndarray) -> np.ndarray:
    """Weighted (measured - predicted) residuals for K candidates, shape (K, m)."""
    layout = problem._layout
    traj, params = _rollout_candidates(problem, decisions)
    parts: List[np.ndarray] = []
    if layout.xy_idx.size:
        pred = traj[:, layout.xy_idx, X:Y + 1]
        parts.append((layout.xy[None, :, 0] - pred[..., 0]) / layout.xy_std)
        parts.append((layout.xy[None, :, 1] - pred[..., 1]) / layout.xy_std)
    if layout.psi_idx.size:
        parts.append(wrap_angle(layout.psi[None, :] - traj[:, layout.psi_idx, PSI]) / layout.psi_std)
    if layout.acc_idx.size:
        pred_acc = derivative_array(traj[:, layout.acc_idx], layout.inputs[layout.acc_idx], params.per_row())[..., V]
        parts.append((layout.acc[None, :] - pred_acc) / layout.acc_std)
    if layout.spd_idx.size:
        parts.append((layout.spd[None, :] - traj[:, layout.spd_idx, V]) / layout.spd_std)

    offset = layout.prior[None, :] - decisions[:, :STATE_DIM]
    offset[:, PSI] = wrap_angle(offset[:, PSI])
    parts.append(offset / layout.prior_std)

    for j, name in enumerate(problem.enabled_params):
        if name == "phi":
            std, mean = problem.prior_std["phi"], problem.prior_state.phi
        else:
            std, mean = problem.param_prior_std.get(name), getattr(problem.params, name)
        if std is not None:
            parts.append(((mean - decisions[:, STATE_DIM + j]) / std)[:, None])
    return np.concatenate(parts, axis=1)


def mhe_residual(candidate: Sequence[float], problem: MheProblem) -> np.ndarray:
    """
    Stacked weighted residual vector for one decision vector.

    Raises:
        DomainError: If the candidate length does not match the problem
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    if candidate.shape != (problem.dimension,):
        raise DomainError(f"Decision vector must have length {problem.dimension}, got {candidate.shape}")
    return _residuals(problem, candidate[None, :])[0]


def _jacobian(problem: MheProblem, x: np.ndarray) -> np.ndarray:
    """Central differences with step 1e-6 * max(1, |x_i|), all columns in one batched rollout."""
    n = x.size
    h = 1e-6 * np.maximum(1.0, np.abs(x))
    plus = np.tile(x, (n, 1)) + np.diag(h)
    minus = np.tile(x, (n, 1)) - np.diag(h)
    r = _residuals(problem, np.vstack([plus, minus]))
    return ((r[:n] - r[n:]) / (2.0 * h[:, None])).T


@dataclass
class MheResult:
    state: VehicleState
    params: ModelParams
    decision: np.ndarray
    final_cost: float
    iterations: int
    trajectory: np.ndarray


def _cost(r: np.ndarray) -> float:
    return 0.5 * float(r @ r)


def solve_mhe(problem: MheProblem, init: Optional[Sequence[float]] = None, max_iters: int = 30,
              tol: float = 1e-10, damping: float = 1e-3) -> MheResult:
    """
    Levenberg-Marquardt over mhe_residual.

    Args:
        problem: Window, prior and parameter flags
        init: Starting decision vector (default: prior state and nominal params)
        max_iters: Outer iteration cap
        tol: Stop once an accepted step lowers the cost by less than this
        damping: Initial damping factor

    Returns:
        MheResult with the window-end state and estimated parameters

    Raises:
        EstimationError: If the start is non-finite or the normal equations
            stay singular up to the maximum damping
    """
    x = problem.initial_guess() if init is None else np.asarray(init, dtype=np.float64).copy()
    if x.shape != (problem.dimension,):
        raise DomainError(f"MHE start must have length {problem.dimension}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise EstimationError("MHE start must be finite")
    try:
        r = mhe_residual(x, problem)
    except IntegrationError as e:
        raise EstimationError(f"Rollout failed at the initial guess: {e}") from e
    if not np.all(np.isfinite(r)):
        raise EstimationError("Non-finite residual at the initial guess")
    cost = _cost(r)
    lam = damping
    iterations = 0

    for iterations in range(1, max_iters + 1):
        J = _jacobian(problem, x)
        g = J.T @ r
        if not np.all(np.isfinite(g)):
            raise EstimationError("Non-finite Jacobian")
        if np.max(np.abs(g)) == 0.0:
            break
        A = J.T @ J
        accepted = False
        singular = True
        while lam <= LAMBDA_MAX:
            try:
                step = np.linalg.solve(A + lam * np.eye(x.size), -g)
                singular = False
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = x + step
            try:
                r_trial = mhe_residual(trial, problem)
            except IntegrationError:
                r_trial = None
            if r_trial is not None and np.all(np.isfinite(r_trial)) and _cost(r_trial) < cost:
                accepted = True
                break
            lam *= 10.0
        if singular:
            raise EstimationError("Normal equations singular at maximum damping")
        if not accepted:
            logger.debug(f"MHE: no improving step at iteration {iterations}; stopping")
            break
        new_cost = _cost(r_trial)
        decrease = cost - new_cost
        x, r, cost = trial, r_trial, new_cost
        lam = max(lam / 10.0, 1e-12)
        logger.debug(f"MHE iteration {iterations}: cost={cost:.6e} lambda={lam:.1e}")
        if decrease < tol:
            break

    traj, _ = _rollout_candidates(problem, x[None, :])
    end = traj[0, -1].copy()
    end[V] = max(end[V], 0.0)
    end[SIGMA] = max(end[SIGMA], SIGMA_MIN)
    estimated = {name: float(x[STATE_DIM + j]) for j, name in enumerate(problem.enabled_params) if name != "phi"}
    try:
        params = problem.params.replace(**estimated)
    except DomainError as e:
        raise EstimationError(f"Estimated parameters left their domain: {e}") from e
    return MheResult(
        state=VehicleState.from_array(end),
        params=params,
        decision=x,
        final_cost=cost,
        iterations=iterations,
        trajectory=traj[0],
    )


class MovingHorizonEstimator:
    """
    Sliding-window estimator for the control loop.

    Each update re-solves over the latest window, warm-started from and with
    its prior set to the previous solution at the new window's first sample.
    """

    def __init__(self, initial_state: VehicleState, params: ModelParams, settings: Dict[str, Any],
                 v_max: Optional[float] = None):
        self.settings = settings
        self.window: Deque[Tuple[Measurement, ControlInput]] = deque(maxlen=int(settings["window"]))
        self.state = initial_state
        self.params = params
        self.nominal_params = params
        self.v_max = v_max
        self.last_cost = math.nan
        self._prior = initial_state
        self._trajectory: Dict[float, np.ndarray] = {}

    def push(self, measurement: Measurement, control: ControlInput) -> None:
        """Append a measurement and the control applied from its timestamp on."""
        if self.window and measurement.t <= self.window[-1][0].t:
            raise DomainError("Measurements must arrive in time order")
        self.window.append((measurement, control))

    def amend_control(self, control: ControlInput, accel: Optional[float] = None) -> None:
        """Replace the control of the newest sample once it is known, optionally adding its accelerometer reading."""
        if not self.window:
            raise DomainError("No sample to amend")
        measurement = self.window[-1][0]
        if accel is not None:
            measurement = dataclasses.replace(measurement, accel=float(accel))
        self.window[-1] = (measurement, control)

    def _problem(self) -> MheProblem:
        t0 = self.window[0][0].t
        if t0 in self._trajectory:
            arr = self._trajectory[t0].copy()
            arr[V] = max(arr[V], 0.0)
            arr[SIGMA] = max(arr[SIGMA], SIGMA_MIN)
            self._prior = VehicleState.from_array(arr)
        return MheProblem(
            window=list(self.window),
            prior_state=self._prior,
            prior_std=self.settings["prior_std"],
            params=self.params,
            estimate_params=self.settings["estimate"],
            param_prior_std=self.settings.get("param_prior_std", {}),
            v_max=self.v_max,
        )

    def update(self) -> VehicleState:
        """
        Refresh the estimate; keeps the previous one when estimation fails.

        With fewer than two samples the current estimate is returned unchanged.
        """
        if len(self.window) < 2:
            return self.state
        problem = self._problem()
        try:
            result = solve_mhe(problem, max_iters=int(self.settings["max_iters"]),
                               tol=float(self.settings["tol"]), damping=float(self.settings["damping"]))
        except (EstimationError, DomainError) as e:
            logger.warning(f"MHE failed, keeping previous estimate: {e}")
            return self.state
        self.state = result.state
        self.params = result.params
        self.last_cost = result.final_cost
        self._trajectory = {m.t: result.trajectory[k] for k, (m, _) in enumerate(self.window)}
        return self.state
