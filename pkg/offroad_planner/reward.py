"""
Event-based trajectory cost and the uncertainty/speed MPC reward.

The event cost treats collision, goal-bearing and bumpiness all as
penalties; a trajectory's return is the negated discounted cost sum.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Sequence, Tuple, Union

import numpy as np

from offroad_planner.errors import DomainError, GeometryError
from offroad_planner.events import BUMPY_CLASSES, COLLISION_CLASSES, N_CLASSES
from offroad_planner.vehicle import wrap_angle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EventRewardConfig:
    alpha_pos: float = 1.0
    alpha_bum: float = 0.5
    gamma: float = 0.99
    collision_classes: FrozenSet[int] = field(default_factory=lambda: frozenset(COLLISION_CLASSES))
    bumpy_classes: FrozenSet[int] = field(default_factory=lambda: frozenset(BUMPY_CLASSES))

    def __post_init__(self):
        if self.alpha_pos < 0 or self.alpha_bum < 0:
            raise DomainError("alpha_pos and alpha_bum must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in (0, 1], got {self.gamma}")
        object.__setattr__(self, "collision_classes", frozenset(int(c) for c in self.collision_classes))
        object.__setattr__(self, "bumpy_classes", frozenset(int(c) for c in self.bumpy_classes))
        for c in self.collision_classes | self.bumpy_classes:
            if not 0 <= c < N_CLASSES:
                raise DomainError(f"Class index {c} out of range")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EventRewardConfig":
        return cls(
            alpha_pos=float(data["alpha_pos"]),
            alpha_bum=float(data["alpha_bum"]),
            gamma=float(data["gamma"]),
            collision_classes=frozenset(data["collision_classes"]),
            bumpy_classes=frozenset(data["bumpy_classes"]),
        )

    @property
    def max_step_cost(self) -> float:
        return 1.0 + self.alpha_pos + self.alpha_bum

    def class_masks(self) -> Tuple[np.ndarray, np.ndarray]:
        coll = np.zeros(N_CLASSES)
        coll[sorted(self.collision_classes)] = 1.0
        bum = np.zeros(N_CLASSES)
        bum[sorted(self.bumpy_classes)] = 1.0
        return coll, bum


@dataclass(frozen=True)
class MpcRewardConfig:
    beta_sigma: float = 10.0
    beta_v: float = 1.0
    sigma_min: float = 1e-3

    def __post_init__(self):
        if self.beta_sigma < 0 or self.beta_v < 0:
            raise DomainError("beta_sigma and beta_v must be >= 0")
        if self.sigma_min <= 0:
            raise DomainError("sigma_min must be > 0")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MpcRewardConfig":
        return cls(float(data["beta_sigma"]), float(data["beta_v"]), float(data["sigma_min"]))


def goal_bearing_error(heading, position, goal) -> np.ndarray:
    """
    Vectorized |wrap(heading - bearing_to_goal)|.

    Positions coinciding with the goal yield 0 (goal reached).
    """
    position = np.asarray(position, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    offset = goal - position
    bearing = np.arctan2(offset[..., 1], offset[..., 0])
    err = np.abs(wrap_angle(np.asarray(heading, dtype=np.float64) - bearing))
    at_goal = np.all(offset == 0.0, axis=-1)
    return np.where(at_goal, 0.0, err)


def bearing_error(predicted_heading: float, position: Sequence[float], goal: Sequence[float]) -> float:
    """
    Absolute angle in [0, pi] between the heading and the bearing to the goal.

    Raises:
        GeometryError: If position equals goal (callers treat the goal as reached)
    """
    if np.array_equal(np.asarray(position, dtype=np.float64), np.asarray(goal, dtype=np.float64)):
        raise GeometryError("Bearing undefined: position equals goal")
    return float(goal_bearing_error(predicted_heading, position, goal))


def step_cost_batch(event_probs: np.ndarray, bearing_err: np.ndarray, config: EventRewardConfig) -> np.ndarray:
    """Per-step cost for event_probs (..., 9) and bearing errors (...)."""
    coll_mask, bum_mask = config.class_masks()
    e_coll = np.clip(event_probs @ coll_mask, 0.0, 1.0)
    e_bum = np.clip(event_probs @ bum_mask, 0.0, 1.0)
    r_pos = (1.0 - e_coll) * bearing_err / math.pi + e_coll
    r_bum = (1.0 - e_coll) * e_bum + e_coll
    return e_coll + config.alpha_pos * r_pos + config.alpha_bum * r_bum


def step_cost(pred, position: Sequence[float], goal: Sequence[float], config: EventRewardConfig) -> float:
    """
    Cost of one predicted step; lies in [0, 1 + alpha_pos + alpha_bum].

    Args:
        pred: StepPrediction (event_probs, bearing_mu used as predicted heading)
        position: Vehicle position at this step (m, m)
        goal: Goal position (m, m)
        config: Event reward configuration
    """
    err = float(goal_bearing_error(pred.bearing_mu, position, goal))
    return float(step_cost_batch(np.asarray(pred.event_probs), np.asarray(err), config))


def trajectory_return(costs: Union[Sequence[float], np.ndarray], gamma: float) -> Union[float, np.ndarray]:
    """Negated discounted cost sum over the last axis."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape[-1] < 1:
        raise DomainError("trajectory_return needs at least one step")
    discounts = gamma ** np.arange(costs.shape[-1])
    value = -(costs * discounts).sum(axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def mpc_reward(sigma, v, config: MpcRewardConfig = MpcRewardConfig()):
    """beta_sigma / max(sigma, sigma_min)^2 + beta_v * v^2, elementwise."""
    v_arr = np.asarray(v, dtype=np.float64)
    if np.any(v_arr < 0):
        raise DomainError("mpc_reward requires v >= 0")
    s = np.maximum(np.asarray(sigma, dtype=np.float64), config.sigma_min)
    value = config.beta_sigma / s ** 2 + config.beta_v * v_arr ** 2
    return float(value) if np.ndim(value) == 0 else value
