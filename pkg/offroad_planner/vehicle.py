"""
Kinematic RC-car model with throttle-driven longitudinal dynamics and road slope.

State vector is [x, y, psi, v, phi, sigma]; input is [delta, throttle].
The array functions operate on arbitrary leading batch dimensions and are
the single implementation behind the dataclass-level API.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from offroad_planner.errors import DomainError, IntegrationError

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-3
DELTA_MAX = 0.35
STATE_DIM = 6
X, Y, PSI, V, PHI, SIGMA = range(STATE_DIM)

BASE_DT = 0.2


def wrap_angle(angle):
    """Wrap angles to (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(angle, dtype=np.float64), 2.0 * np.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class ModelParams:
    """Vehicle model parameters; mass_scale multiplies the slope term only."""

    c1: float = 0.5
    c2: float = 1.69
    cm1: float = 12.0
    cm2: float = 2.5
    cr2: float = 0.15
    cr0: float = 0.7
    g: float = 9.81
    mass_scale: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value <= 0:
                raise DomainError(f"ModelParams.{f.name} must be finite and > 0, got {value}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise DomainError(f"Unknown ModelParams fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def columns(self, **overrides: np.ndarray) -> "ParamColumns":
        """Array-valued copy for evaluating many parameter candidates at once."""
        values = {f.name: np.asarray(overrides.get(f.name, getattr(self, f.name)), dtype=np.float64)
                  for f in dataclasses.fields(self)}
        return ParamColumns(**values)


@dataclass(frozen=True)
class ParamColumns:
    """ModelParams with per-candidate arrays; accepted wherever the array functions take params."""

    c1: np.ndarray
    c2: np.ndarray
    cm1: np.ndarray
    cm2: np.ndarray
    cr2: np.ndarray
    cr0: np.ndarray
    g: np.ndarray
    mass_scale: np.ndarray

    def per_row(self) -> "ParamColumns":
        """Append a trailing axis so (K,) columns broadcast against (K, n) batches."""
        return ParamColumns(**{f.name: (v[..., None] if np.ndim(v) else v)
                               for f in dataclasses.fields(self) for v in [getattr(self, f.name)]})


@dataclass(frozen=True)
class VehicleState:
    """Pose, speed, slope and accumulated model uncertainty."""

    x: float
    y: float
    psi: float
    v: float
    phi: float = 0.0
    sigma: float = SIGMA_MIN

    def __post_init__(self):
        values = (self.x, self.y, self.psi, self.v, self.phi, self.sigma)
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"VehicleState has non-finite components: {values}")
        if self.v < 0:
            raise DomainError(f"VehicleState.v must be >= 0, got {self.v}")
        if self.sigma < SIGMA_MIN:
            raise DomainError(f"VehicleState.sigma must be >= {SIGMA_MIN}, got {self.sigma}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v, self.phi, self.sigma], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "VehicleState":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (STATE_DIM,):
            raise DomainError(f"Expected a state vector of length {STATE_DIM}, got shape {arr.shape}")
        return cls(*(float(a) for a in arr))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def replace(self, **changes) -> "VehicleState":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ControlInput:
    """Steering angle (rad) and throttle (dimensionless)."""

    delta: float
    throttle: float
    delta_max: float = dataclasses.field(default=DELTA_MAX, compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.delta) and math.isfinite(self.throttle)):
            raise DomainError(f"ControlInput must be finite, got ({self.delta}, {self.throttle})")
        if abs(self.delta) > self.delta_max:
            raise DomainError(f"|delta| = {abs(self.delta)} exceeds delta_max = {self.delta_max}")
        if not 0.0 <= self.throttle <= 1.0:
            raise DomainError(f"throttle must lie in [0, 1], got {self.throttle}")

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.throttle], dtype=np.float64)


def derivative_array(states: np.ndarray, inputs: np.ndarray, params: Union[ModelParams, "ParamColumns"]) -> np.ndarray:
    """Time derivatives for states (..., 6) under inputs (..., 2)."""
    psi, v, phi = states[..., PSI], states[..., V], states[..., PHI]
    delta, throttle = inputs[..., 0], inputs[..., 1]

    heading = psi + params.c1 * delta
    v_dot = (
        (params.cm1 - params.cm2 * v) * throttle
        - params.cr2 * v ** 2
        - params.cr0
        - (v * delta) ** 2 * params.c1 * params.c2 ** 2
        - params.mass_scale * params.g * np.sin(phi)
    )
    # Static friction: a car at rest does not roll backwards.
    v_dot = np.where((v <= 0.0) & (v_dot < 0.0), 0.0, v_dot)

    out = np.zeros(np.broadcast_shapes(states.shape, inputs.shape[:-1] + (STATE_DIM,)))
    out[..., X] = v * np.cos(heading)
    out[..., Y] = v * np.sin(heading)
    out[..., PSI] = v * delta * params.c2
    out[..., V] = v_dot
    return out


def derivative(state: VehicleState, control: ControlInput, params: ModelParams) -> np.ndarray:
    """
    Evaluate the continuous-time model.

    Returns:
        [x_dot, y_dot, psi_dot, v_dot, 0, 0]; the uncertainty rate is owned by
        the uncertainty module and reported here as 0.
    """
    return derivative_array(state.as_array(), control.as_array(), params)


def _finish_step(states: np.ndarray, v_max: Optional[float]) -> np.ndarray:
    states[..., V] = np.maximum(states[..., V], 0.0)
    if v_max is not None:
        states[..., V] = np.minimum(states[..., V], v_max)
    states[..., PSI] = wrap_angle(states[..., PSI])
    return states


def rk4_array(states: np.ndarray, inputs: np.ndarray, params: Union[ModelParams, "ParamColumns"], dt, v_max: Optional[float] = None) -> np.ndarray:
    """One classical RK4 step for batched states; dt may be scalar or (...,)."""
    dt = np.asarray(dt, dtype=np.float64)[..., None]
    k1 = derivative_array(states, inputs, params)
    k2 = derivative_array(states + 0.5 * dt * k1, inputs, params)
    k3 = derivative_array(states + 0.5 * dt * k2, inputs, params)
    k4 = derivative_array(states + dt * k3, inputs, params)
    for stage, k in enumerate((k1, k2, k3, k4), start=1):
        if not np.all(np.isfinite(k)):
            raise IntegrationError("Non-finite derivative", stage=stage)
    nxt = states + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _finish_step(nxt, v_max)


def _check_dt(dt: float) -> None:
    if not (math.isfinite(dt) and 0.0 < dt <= 1.0):
        raise DomainError(f"dt must lie in (0, 1] s, got {dt}")


def step_rk4(state: VehicleState, control: ControlInput, params: ModelParams, dt: float,
             v_max: Optional[float] = None) -> VehicleState:
    """Advance one RK4 step, then clamp speed and wrap heading."""
    _check_dt(dt)
    nxt = rk4_array(state.as_array(), control.as_array(), params, dt, v_max)
    return VehicleState.from_array(nxt)


def rollout(state: VehicleState, controls: Sequence[ControlInput], params: ModelParams,
            dts: Sequence[float], v_max: Optional[float] = None) -> List[VehicleState]:
    """Iterate step_rk4; returns H+1 states starting with the input state."""
    if len(controls) != len(dts):
        raise DomainError(f"{len(controls)} controls but {len(dts)} time steps")
    states = [state]
    for control, dt in zip(controls, dts):
        states.append(step_rk4(states[-1], control, params, float(dt), v_max))
    return states


def batch_rollout(states: np.ndarray, inputs: np.ndarray, params: ModelParams, dts: np.ndarray,
                  v_max: Optional[float] = None) -> np.ndarray:
    """
    Roll out N candidate input sequences in lockstep.

    Args:
        states: Initial states, shape (N, 6) or (6,)
        inputs: Inputs, shape (N, H, 2)
        params: Model parameters
        dts: Step durations, shape (N, H) or (H,)
        v_max: Optional speed cap

    Returns:
        Trajectories of shape (N, H+1, 6)
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n, horizon = inputs.shape[:2]
    dts = np.broadcast_to(np.asarray(dts, dtype=np.float64), (n, horizon))
    if np.any(dts <= 0.0) or np.any(dts > 1.0):
        raise DomainError("All dts must lie in (0, 1] s")
    traj = np.empty((n, horizon + 1, STATE_DIM))
    traj[:, 0] = np.broadcast_to(np.asarray(states, dtype=np.float64), (n, STATE_DIM))
    for t in range(horizon):
        traj[:, t + 1] = rk4_array(traj[:, t].copy(), inputs[:, t], params, dts[:, t], v_max)
    return traj


def throttle_to_dt(throttle: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Map throttle in [0, 1] to the model step duration.

    0 -> 0.2 s (baseline speed), 0.5 -> 0.4 s (2x), 1 -> 0.6 s (3x).
    """
    arr = np.asarray(throttle, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"throttle must lie in [0, 1], got {throttle}")
    # BASE_DT * (1 + 2D) written as a division so that D in {0, 0.5, 1} maps exactly.
    dt = (1.0 + 2.0 * arr) / 5.0
    return float(dt) if dt.ndim == 0 else dt
