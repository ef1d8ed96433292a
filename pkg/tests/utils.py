"""
Utility functions for testing.
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from offroad_planner.estimator import Measurement
from offroad_planner.events import N_CLASSES
from offroad_planner.uncertainty import EnsembleOutput
from offroad_planner.vehicle import V, ControlInput, ModelParams, VehicleState, derivative, step_rk4

NOISE_STDS = {"gps_xy_std": 0.1, "gps_psi_std": 0.05, "accel_std": 0.2, "speed_std": 0.1}
PRIOR_STD = {"x": 1.0, "y": 1.0, "psi": 0.2, "v": 0.5, "phi": 0.05, "sigma": 1.0}


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[i] += step
        minus[i] -= step
        grad[i] = (f(plus) - f(minus)) / (2.0 * step)
    return grad


def random_distributions(rng: np.random.Generator, shape: Tuple[int, ...], classes: int = N_CLASSES) -> np.ndarray:
    """Dirichlet(1) rows of the given leading shape."""
    return rng.dirichlet(np.ones(classes), size=shape)


def random_ensemble(rng: np.random.Generator, members: int = 5, horizon: int = 10) -> EnsembleOutput:
    """Ensemble with random class distributions and bearing Gaussians."""
    return EnsembleOutput(
        event_probs=random_distributions(rng, (members, horizon)),
        bearing_mu=rng.normal(0.0, 1.0, size=(members, horizon)),
        bearing_var=rng.uniform(0.05, 2.0, size=(members, horizon)),
    )


def random_gaussian_ensemble(rng: np.random.Generator, members: int = 5) -> Tuple[np.ndarray, np.ndarray]:
    """1-D member Gaussians with spread-out means."""
    return rng.uniform(-3.0, 3.0, size=members), rng.uniform(0.1, 2.0, size=members)


def simulate_window(
    params: ModelParams,
    start: VehicleState,
    controls: Sequence[ControlInput],
    dt: float = 0.2,
    rng: Optional[np.random.Generator] = None,
    stds: Dict[str, float] = NOISE_STDS,
    channels: Sequence[str] = ("gps_xy", "gps_psi", "accel", "speed"),
) -> Tuple[List[Tuple[Measurement, ControlInput]], List[VehicleState]]:
    """
    Roll the true model forward and record one measurement per sample.

    Without rng the readings are exact. Returns the MHE window and the true states.
    """
    states = [start]
    for control in controls[:-1]:
        states.append(step_rk4(states[-1], control, params, dt))

    window = []
    for k, (state, control) in enumerate(zip(states, controls)):
        noise = rng.standard_normal(5) if rng is not None else np.zeros(5)
        accel = float(derivative(state, control, params)[V])
        reading = {
            "gps_xy": (state.x + stds["gps_xy_std"] * noise[0], state.y + stds["gps_xy_std"] * noise[1]),
            "gps_psi": state.psi + stds["gps_psi_std"] * noise[2],
            "accel": accel + stds["accel_std"] * noise[3],
            "speed": state.v + stds["speed_std"] * noise[4],
        }
        measurement = Measurement(t=k * dt, **{c: reading[c] for c in channels}, **stds)
        window.append((measurement, control))
    return window, states


def turning_controls(n: int, delta: float = 0.15, throttle: float = 0.5) -> List[ControlInput]:
    """Constant-input sequence for MHE windows."""
    return [ControlInput(delta, throttle) for _ in range(n)]
