"""
Hybrid receding-horizon control loop.

Each tick reads noisy sensors, refreshes the state estimate with MHE,
optimizes a steering sequence against the predicted event return, then a
throttle sequence against the speed/uncertainty reward, and executes only
the first action of both.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import binomtest

from offroad_planner.config import DEFAULTS
from offroad_planner.csvio import emit_csv
from offroad_planner.errors import DomainError, PlannerError
from offroad_planner.estimator import MovingHorizonEstimator
from offroad_planner.events import SMOOTH_ROAD
from offroad_planner.optim import BoxProblem, OptimResult, minimize
from offroad_planner.parallel import map_ordered
from offroad_planner.reward import (
    EventRewardConfig,
    MpcRewardConfig,
    goal_bearing_error,
    mpc_reward,
    step_cost_batch,
    trajectory_return,
)
from offroad_planner.uncertainty import EnsembleOutput, UncertaintyTrace, sigma_batch, uncertainty_trace
from offroad_planner.vehicle import (
    V,
    ControlInput,
    ModelParams,
    VehicleState,
    batch_rollout,
    derivative,
    step_rk4,
    throttle_to_dt,
)
from offroad_planner.worldsim import TerrainWorld, WorldConfig, generate_world, measure, observe, paint

logger = logging.getLogger(__name__)

TICK_HEADER = ("tick", "x", "y", "psi", "v", "delta", "throttle", "dt", "sigma", "return", "mhe_cost")
SUMMARY_HEADER = ("field", "value")
PAIRED_HEADER = ("seed", "speed_high", "speed_low", "sigma_high", "sigma_low", "success_high", "success_low")

# Sub-seed slots derived per tick from (episode seed, tick, slot).
_STEERING_SLOT, _THROTTLE_SLOT, _MEASURE_SLOT, _OBSERVE_SLOT = range(4)

SigmaFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PlannerConfig:
    """Everything a tick needs besides the world, the predictor and the controller state."""

    horizon: int = 10
    steering: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS["optimizer"]["steering"]))
    throttle: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS["optimizer"]["throttle"]))
    event: EventRewardConfig = EventRewardConfig()
    mpc: MpcRewardConfig = MpcRewardConfig()
    replan_every: int = 1
    start: Tuple[float, float, float] = (4.0, 16.0, 0.0)
    goal: Tuple[float, float] = (28.0, 16.0)
    goal_radius: float = 1.0
    max_ticks: int = 60
    delta_max: float = 0.35
    v_max: Optional[float] = 3.0
    joint: bool = False
    joint_weight: float = 1.0
    w_class: float = 1.0
    w_bearing: float = 1.0
    distance: str = "kl"
    sigma_min: float = 1e-3
    params: ModelParams = ModelParams()
    mhe: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS["mhe"]))
    world: WorldConfig = WorldConfig()

    def __post_init__(self):
        if self.horizon < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        if not self.goal_radius > 0:
            raise DomainError(f"goal_radius must be > 0, got {self.goal_radius}")
        if self.replan_every < 1 or self.max_ticks < 0:
            raise DomainError("replan_every must be >= 1 and max_ticks >= 0")
        if not 0 < self.delta_max:
            raise DomainError("delta_max must be > 0")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "PlannerConfig":
        """Build from a resolved run configuration."""
        planner = config["planner"]
        ensemble = config["ensemble"]
        return cls(
            horizon=int(planner["horizon"]),
            steering=dict(config["optimizer"]["steering"]),
            throttle=dict(config["optimizer"]["throttle"]),
            event=EventRewardConfig.from_dict(config["reward"]["event"]),
            mpc=MpcRewardConfig.from_dict(config["reward"]["mpc"]),
            replan_every=int(planner["replan_every"]),
            start=tuple(float(v) for v in planner["start"]),
            goal=tuple(float(v) for v in planner["goal"]),
            goal_radius=float(planner["goal_radius"]),
            max_ticks=int(planner["max_ticks"]),
            delta_max=float(planner["delta_max"]),
            v_max=float(planner["v_max"]),
            joint=bool(planner["joint"]),
            joint_weight=float(planner["joint_weight"]),
            w_class=float(ensemble["w_class"]),
            w_bearing=float(ensemble["w_bearing"]),
            distance=ensemble["distance"],
            sigma_min=float(ensemble["sigma_min"]),
            params=ModelParams.from_dict(config["vehicle"]),
            mhe=dict(config["mhe"]),
            world=WorldConfig.from_dict(config["world"]),
        )

    def replace(self, **changes) -> "PlannerConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return PlannerConfig(**values)


@dataclass
class PlanResult:
    steering_seq: np.ndarray
    throttle_seq: np.ndarray
    expected_return: float
    uncertainty: Optional[UncertaintyTrace]
    rollout: List[VehicleState]


@dataclass
class TickLog:
    tick: int
    x: float
    y: float
    psi: float
    v: float
    delta: float
    throttle: float
    dt: float
    sigma: float
    expected_return: float
    mhe_cost: float
    collision: bool = False
    fallback: bool = False

    def row(self) -> Tuple:
        return (self.tick, self.x, self.y, self.psi, self.v, self.delta, self.throttle, self.dt,
                self.sigma, self.expected_return, self.mhe_cost)


@dataclass
class ControllerState:
    """Mutable episode state threaded through consecutive ticks."""

    true_state: VehicleState
    estimator: MovingHorizonEstimator
    predictor: Any
    seed: int
    steering_plan: np.ndarray
    throttle_plan: np.ndarray
    true_params: ModelParams = ModelParams()
    last_control: ControlInput = ControlInput(0.0, 0.0)
    tick: int = 0
    t: float = 0.0
    done: bool = False
    success: bool = False
    collisions: int = 0
    swept_goal: bool = False
    plans: List[PlanResult] = field(default_factory=list)
    log: List[TickLog] = field(default_factory=list)

    @classmethod
    def start(cls, world: TerrainWorld, config: PlannerConfig, predictor: Any, seed: int,
              true_params: Optional[ModelParams] = None) -> "ControllerState":
        x, y, psi = config.start
        state = VehicleState(x=x, y=y, psi=psi, v=0.0, phi=world.slope_at(np.array([x, y])))
        estimator = MovingHorizonEstimator(state, config.params, config.mhe, v_max=config.v_max)
        return cls(
            true_state=state,
            estimator=estimator,
            predictor=predictor,
            seed=seed,
            steering_plan=np.zeros(config.horizon),
            throttle_plan=np.full(config.horizon, 0.5),
            true_params=true_params or config.params,
        )


def _sub_seed(seed: int, tick: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, tick, slot]).generate_state(1)[0])


def _shift(plan: np.ndarray) -> np.ndarray:
    """Drop the executed head and repeat the last element."""
    return np.concatenate([plan[1:], plan[-1:]])


def _actions(deltas: np.ndarray, throttles: np.ndarray) -> np.ndarray:
    """(delta, throttle, dt) rows for candidate batches (N, H)."""
    throttles = np.clip(throttles, 0.0, 1.0)
    return np.stack([deltas, throttles, throttle_to_dt(throttles)], axis=-1)


@dataclass
class _Evaluation:
    event_cost: np.ndarray
    mpc_cost: np.ndarray
    sigma: np.ndarray
    trajectories: np.ndarray
    probs: np.ndarray
    mu: np.ndarray
    var: np.ndarray


def _evaluate(state: VehicleState, obs: np.ndarray, deltas: np.ndarray, throttles: np.ndarray, predictor: Any,
              params: ModelParams, config: PlannerConfig, sigma_fn: Optional[SigmaFn] = None) -> _Evaluation:
    """
    Score N candidate (delta, throttle) sequences in one rollout and one ensemble query.

    event_cost is the negated discounted event return; mpc_cost the negated
    discounted speed/uncertainty reward. Prediction step t is paired with
    rollout state t+1.
    """
    actions = _actions(deltas, throttles)
    traj = batch_rollout(state.as_array(), actions[..., :2], params, actions[..., 2], config.v_max)
    probs, mu, var = predictor.predict_batch(obs, actions, state=state)

    mean_probs = probs.mean(axis=0)
    mean_probs = mean_probs / mean_probs.sum(axis=-1, keepdims=True)
    err = goal_bearing_error(mu.mean(axis=0), traj[:, 1:, :2], np.asarray(config.goal))
    event_cost = -trajectory_return(step_cost_batch(mean_probs, err, config.event), config.event.gamma)

    if sigma_fn is not None:
        sigma = np.maximum(np.asarray(sigma_fn(actions), dtype=np.float64), config.sigma_min)
    else:
        sigma = sigma_batch(probs, mu, var, config.w_class, config.w_bearing, config.distance, config.sigma_min)
    reward = mpc_reward(sigma, traj[:, 1:, V], config.mpc)
    mpc_cost = -(reward * config.event.gamma ** np.arange(deltas.shape[1])).sum(axis=-1)
    return _Evaluation(np.atleast_1d(event_cost), mpc_cost, sigma, traj, probs, mu, var)


def plan_steering(state: VehicleState, obs: np.ndarray, throttle_seq: Sequence[float], predictor: Any,
                  config: PlannerConfig, params: Optional[ModelParams] = None, seed: int = 0,
                  init: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, float, OptimResult]:
    """
    Optimize the steering sequence for a fixed throttle plan.

    Returns:
        (steering sequence, expected event return, optimizer result)
    """
    params = params or config.params
    throttle = np.asarray(throttle_seq, dtype=np.float64)
    if throttle.shape != (config.horizon,):
        raise DomainError(f"throttle_seq must have length {config.horizon}, got {throttle.shape}")

    def objective(population: np.ndarray) -> np.ndarray:
        throttles = np.broadcast_to(throttle, population.shape)
        return _evaluate(state, obs, population, throttles, predictor, params, config).event_cost

    problem = BoxProblem(lower=np.full(config.horizon, -config.delta_max), upper=np.full(config.horizon, config.delta_max),
                         objective=objective, seed=seed, vectorized=True)
    result = minimize(problem, config.steering, init_mean=init)
    return problem.clip(result.best_x), -float(result.best_f), result


def plan_throttle(state: VehicleState, obs: np.ndarray, steering_seq: Sequence[float], predictor: Any,
                  config: PlannerConfig, params: Optional[ModelParams] = None, seed: int = 0,
                  init: Optional[Sequence[float]] = None,
                  sigma_fn: Optional[SigmaFn] = None) -> Tuple[np.ndarray, np.ndarray, OptimResult]:
    """
    Optimize the throttle sequence for a fixed steering plan.

    Sigma is recomputed for every candidate because each throttle value
    changes the step duration the model is conditioned on.

    Args:
        sigma_fn: Optional override mapping candidate actions (N, H, 3) to sigma (N, H)

    Returns:
        (throttle sequence, per-step sigma of that sequence, optimizer result)
    """
    params = params or config.params
    steering = np.asarray(steering_seq, dtype=np.float64)
    if steering.shape != (config.horizon,):
        raise DomainError(f"steering_seq must have length {config.horizon}, got {steering.shape}")

    def objective(population: np.ndarray) -> np.ndarray:
        deltas = np.broadcast_to(steering, population.shape)
        return _evaluate(state, obs, deltas, population, predictor, params, config, sigma_fn).mpc_cost

    problem = BoxProblem(lower=np.zeros(config.horizon), upper=np.ones(config.horizon),
                         objective=objective, seed=seed, vectorized=True)
    result = minimize(problem, config.throttle, init_mean=init)
    best = problem.clip(result.best_x)
    sigma = _evaluate(state, obs, steering[None], best[None], predictor, params, config, sigma_fn).sigma[0]
    return best, sigma, result


def plan_joint(state: VehicleState, obs: np.ndarray, predictor: Any, config: PlannerConfig,
               params: Optional[ModelParams] = None, seed: int = 0,
               init: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, np.ndarray, OptimResult]:
    """Optimize steering and throttle together; objective = event cost + joint_weight * mpc cost."""
    params = params or config.params
    h = config.horizon

    def objective(population: np.ndarray) -> np.ndarray:
        ev = _evaluate(state, obs, population[:, :h], population[:, h:], predictor, params, config)
        return ev.event_cost + config.joint_weight * ev.mpc_cost

    lower = np.concatenate([np.full(h, -config.delta_max), np.zeros(h)])
    upper = np.concatenate([np.full(h, config.delta_max), np.ones(h)])
    problem = BoxProblem(lower=lower, upper=upper, objective=objective, seed=seed, vectorized=True)
    result = minimize(problem, config.steering, init_mean=init)
    best = problem.clip(result.best_x)
    return best[:h], best[h:], result


def summarize_plan(state: VehicleState, obs: np.ndarray, steering: np.ndarray, throttle: np.ndarray,
                   predictor: Any, config: PlannerConfig, params: Optional[ModelParams] = None) -> PlanResult:
    """Event return, uncertainty trace and rollout of a chosen plan."""
    params = params or config.params
    ev = _evaluate(state, obs, steering[None], throttle[None], predictor, params, config)
    ens = EnsembleOutput(ev.probs[:, 0], ev.mu[:, 0], ev.var[:, 0])
    trace = uncertainty_trace(ens, config.w_class, config.w_bearing, config.distance, config.sigma_min)
    return PlanResult(
        steering_seq=steering.copy(),
        throttle_seq=throttle.copy(),
        expected_return=-float(ev.event_cost[0]),
        uncertainty=trace,
        rollout=[VehicleState.from_array(s) for s in ev.trajectories[0]],
    )


def _segment_distance(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    u = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + u * ab - p))


def _plan(world: TerrainWorld, ctrl: ControllerState, estimate: VehicleState,
          config: PlannerConfig) -> Tuple[PlanResult, bool]:
    """
    Plan both sequences for this tick.

    A failing optimizer is replaced by its safe sequence (zero steering or
    zero throttle) while the other optimizer's result is kept.

    Returns:
        (plan, whether any fallback was used)
    """
    try:
        obs = observe(world, ctrl.true_state, _sub_seed(ctrl.seed, ctrl.tick, _OBSERVE_SLOT), config.world)
    except PlannerError as e:
        logger.warning(f"Observation failed at tick {ctrl.tick}, executing safe stop: {e}")
        zeros = np.zeros(config.horizon)
        return PlanResult(zeros, zeros.copy(), math.nan, None, [estimate]), True
    params = ctrl.estimator.params
    steer_seed = _sub_seed(ctrl.seed, ctrl.tick, _STEERING_SLOT)
    throttle_init = _shift(ctrl.throttle_plan)
    steering_init = _shift(ctrl.steering_plan)
    fallback = False
    if config.joint:
        try:
            steering, throttle, _ = plan_joint(estimate, obs, ctrl.predictor, config, params, steer_seed,
                                               init=np.concatenate([steering_init, throttle_init]))
        except PlannerError as e:
            logger.warning(f"Joint planning failed at tick {ctrl.tick}, executing safe stop: {e}")
            steering, throttle, fallback = np.zeros(config.horizon), np.zeros(config.horizon), True
    else:
        try:
            steering, _, _ = plan_steering(estimate, obs, throttle_init, ctrl.predictor, config, params,
                                           steer_seed, init=steering_init)
        except PlannerError as e:
            logger.warning(f"Steering planning failed at tick {ctrl.tick}, using zero steering: {e}")
            steering, fallback = np.zeros(config.horizon), True
        try:
            throttle, _, _ = plan_throttle(estimate, obs, steering, ctrl.predictor, config, params,
                                           _sub_seed(ctrl.seed, ctrl.tick, _THROTTLE_SLOT), init=throttle_init)
        except PlannerError as e:
            logger.warning(f"Throttle planning failed at tick {ctrl.tick}, using zero throttle: {e}")
            throttle, fallback = np.zeros(config.horizon), True
    try:
        plan = summarize_plan(estimate, obs, steering, throttle, ctrl.predictor, config, params)
    except PlannerError as e:
        logger.warning(f"Plan summary failed at tick {ctrl.tick}: {e}")
        plan = PlanResult(steering.copy(), throttle.copy(), math.nan, None, [estimate])
    return plan, fallback


def tick(world: TerrainWorld, ctrl: ControllerState, config: PlannerConfig) -> Optional[TickLog]:
    """
    Run one control tick and execute exactly the first planned action.

    Returns:
        The tick's log row, or None when the episode had already ended or the
        goal was reached at tick start (no action executed). A collision
        during the executed step marks the episode done.
    """
    if ctrl.done:
        return None
    goal = np.asarray(config.goal)
    if ctrl.swept_goal or np.linalg.norm(ctrl.true_state.position - goal) <= config.goal_radius:
        ctrl.done = ctrl.success = True
        logger.info(f"Goal reached at tick {ctrl.tick}")
        return None

    rng = np.random.default_rng(_sub_seed(ctrl.seed, ctrl.tick, _MEASURE_SLOT))
    # The accelerometer channel is attached once the control for this sample is known.
    ctrl.estimator.push(measure(world, ctrl.true_state, None, ctrl.t, config.mhe, rng), ControlInput(0.0, 0.0))
    estimate = ctrl.estimator.update()

    fallback = False
    if ctrl.plans and ctrl.tick % config.replan_every != 0:
        last = ctrl.plans[-1]
        plan = PlanResult(_shift(last.steering_seq), _shift(last.throttle_seq), last.expected_return,
                          last.uncertainty, last.rollout)
    else:
        plan, fallback = _plan(world, ctrl, estimate, config)
    ctrl.plans.append(plan)
    ctrl.steering_plan, ctrl.throttle_plan = plan.steering_seq, plan.throttle_seq

    delta = float(np.clip(plan.steering_seq[0], -config.delta_max, config.delta_max))
    throttle = float(np.clip(plan.throttle_seq[0], 0.0, 1.0))
    control = ControlInput(delta, throttle, delta_max=config.delta_max)
    dt = throttle_to_dt(throttle)

    before = ctrl.true_state
    accel = float(derivative(before, control, ctrl.true_params)[V]) + config.mhe["accel_std"] * rng.standard_normal()
    ctrl.estimator.amend_control(control, accel)
    moved = step_rk4(before, control, ctrl.true_params, dt, config.v_max)
    label = int(world.labels_at(moved.position))
    collision = label in config.event.collision_classes
    if collision:
        # The vehicle stops at its last free position and the episode ends unsuccessfully.
        ctrl.collisions += 1
        ctrl.done = True
        moved = before.replace(v=0.0)
        logger.info(f"Collision with class {label} at tick {ctrl.tick}, ending episode")
    else:
        moved = moved.replace(phi=world.slope_at(moved.position))
        ctrl.swept_goal = _segment_distance(before.position, moved.position, goal) <= config.goal_radius
    ctrl.true_state = moved
    ctrl.last_control = control

    sigma = float(plan.uncertainty.sigma[0]) if plan.uncertainty is not None else math.nan
    entry = TickLog(
        tick=ctrl.tick, x=moved.x, y=moved.y, psi=moved.psi, v=moved.v,
        delta=delta, throttle=throttle, dt=dt, sigma=sigma,
        expected_return=plan.expected_return, mhe_cost=ctrl.estimator.last_cost,
        collision=collision, fallback=fallback,
    )
    ctrl.log.append(entry)
    ctrl.tick += 1
    ctrl.t += dt
    logger.debug(f"tick {entry.tick}: delta={delta:.3f} throttle={throttle:.3f} v={moved.v:.2f} sigma={sigma:.4f}")
    return entry


@dataclass
class EpisodeMetrics:
    success: bool
    ticks: int
    mean_speed: float
    speed_variance: float
    collision_events: int
    mean_sigma: float
    expected_return_avg: float

    def rows(self) -> List[Tuple[str, Any]]:
        return list(asdict(self).items())


def episode_metrics(ctrl: ControllerState) -> EpisodeMetrics:
    speeds = np.array([e.v for e in ctrl.log])
    sigmas = np.array([e.sigma for e in ctrl.log if math.isfinite(e.sigma)])
    returns = np.array([e.expected_return for e in ctrl.log if math.isfinite(e.expected_return)])
    return EpisodeMetrics(
        success=ctrl.success,
        ticks=len(ctrl.log),
        mean_speed=float(speeds.mean()) if speeds.size else 0.0,
        speed_variance=float(speeds.var()) if speeds.size else 0.0,
        collision_events=ctrl.collisions,
        mean_sigma=float(sigmas.mean()) if sigmas.size else math.nan,
        expected_return_avg=float(returns.mean()) if returns.size else math.nan,
    )


def run_episode(world: TerrainWorld, config: PlannerConfig, predictor: Any, seed: int,
                output_dir: Optional[Union[str, Path]] = None,
                true_params: Optional[ModelParams] = None) -> Tuple[EpisodeMetrics, ControllerState]:
    """
    Tick until the goal is reached, the vehicle collides or max_ticks run out.

    A collision ends the episode without success; the vehicle is left at its
    last free position with zero speed.

    Args:
        output_dir: When given, writes episode_<seed>.csv and episode_<seed>_summary.csv there
    """
    ctrl = ControllerState.start(world, config, predictor, seed, true_params)
    logger.info(f"Episode seed={seed}: start={config.start} goal={config.goal} horizon={config.horizon}")
    for _ in range(config.max_ticks):
        if tick(world, ctrl, config) is None or ctrl.done:
            break
    if ctrl.swept_goal:
        ctrl.done = ctrl.success = True
    metrics = episode_metrics(ctrl)
    logger.info(f"Episode seed={seed} finished: success={metrics.success} ticks={metrics.ticks} "
                f"mean_speed={metrics.mean_speed:.3f} collisions={metrics.collision_events}")
    if output_dir is not None:
        out = Path(output_dir)
        emit_csv(out / f"episode_{seed}.csv", TICK_HEADER, [e.row() for e in ctrl.log])
        emit_csv(out / f"episode_{seed}_summary.csv", SUMMARY_HEADER, metrics.rows())
    return metrics, ctrl


@dataclass
class PairedStudy:
    rows: List[Tuple]
    beta_high: float
    beta_low: float
    p_speed: float
    p_sigma: float

    @property
    def speed_lower_count(self) -> int:
        return sum(1 for r in self.rows if r[1] < r[2])

    @property
    def sigma_lower_count(self) -> int:
        return sum(1 for r in self.rows if r[3] < r[4])


def sign_test(high: Sequence[float], low: Sequence[float]) -> float:
    """One-sided paired sign test p-value for high < low; ties are dropped."""
    high = np.asarray(high, dtype=np.float64)
    low = np.asarray(low, dtype=np.float64)
    keep = high != low
    n = int(keep.sum())
    if n == 0:
        return 1.0
    k = int((high[keep] < low[keep]).sum())
    return float(binomtest(k, n, 0.5, alternative="greater").pvalue)


def paired_study(seeds: Sequence[int], config: PlannerConfig, world_factory: Callable[[int], TerrainWorld],
                 predictor_factory: Callable[[TerrainWorld], Any], beta_high: float = 10.0, beta_low: float = 0.0,
                 max_workers: Optional[int] = None, output_dir: Optional[Union[str, Path]] = None) -> PairedStudy:
    """
    Run every seed under two beta_sigma settings on the same world and compare.

    Args:
        output_dir: When given, per-episode CSVs go to beta_high/ and beta_low/ below it

    Returns:
        Per-seed rows plus sign-test p-values for lower mean speed and lower
        mean sigma under beta_high
    """
    high_cfg = config.replace(mpc=MpcRewardConfig(beta_high, config.mpc.beta_v, config.mpc.sigma_min))
    low_cfg = config.replace(mpc=MpcRewardConfig(beta_low, config.mpc.beta_v, config.mpc.sigma_min))

    def run(seed: int) -> Tuple:
        world = world_factory(seed)
        high_dir = low_dir = None
        if output_dir is not None:
            high_dir, low_dir = Path(output_dir) / "beta_high", Path(output_dir) / "beta_low"
        high, _ = run_episode(world, high_cfg, predictor_factory(world), seed, high_dir)
        low, _ = run_episode(world, low_cfg, predictor_factory(world), seed, low_dir)
        return (seed, high.mean_speed, low.mean_speed, high.mean_sigma, low.mean_sigma, high.success, low.success)

    rows = map_ordered(run, list(seeds), max_workers=max_workers)
    p_speed = sign_test([r[1] for r in rows], [r[2] for r in rows])
    p_sigma = sign_test([r[3] for r in rows], [r[4] for r in rows])
    logger.info(f"Paired study over {len(rows)} seeds: p_speed={p_speed:.3g} p_sigma={p_sigma:.3g}")
    return PairedStudy(rows=rows, beta_high=beta_high, beta_low=beta_low, p_speed=p_speed, p_sigma=p_sigma)


def write_paired_csv(path: Union[str, Path], study: PairedStudy) -> Path:
    return emit_csv(path, PAIRED_HEADER, study.rows)


def study_world(seed: int, config: PlannerConfig, clearance: float = 1.5) -> TerrainWorld:
    """Generated world for episode studies, with smooth road around start and goal."""
    wc = config.world
    world = generate_world(seed, wc.size, wc.class_frequencies, wc.blob_scale, wc.cell_size)
    for cx, cy in (config.start[:2], config.goal):
        world = paint(world, (cx - clearance, cx + clearance), (cy - clearance, cy + clearance), SMOOTH_ROAD)
    return world
