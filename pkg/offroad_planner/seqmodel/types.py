"""
Value types shared by the sequence model, its training loop and the ensemble.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from offroad_planner.errors import DomainError
from offroad_planner.events import N_CLASSES

VAR_MIN = 1e-6
ACTION_DIM = 3
ARCHITECTURES = ("transformer", "lstm")


@dataclass(frozen=True)
class StepPrediction:
    """Event distribution and bearing Gaussian for one future step."""

    event_probs: np.ndarray
    bearing_mu: float
    bearing_var: float

    def __post_init__(self):
        probs = np.asarray(self.event_probs, dtype=np.float64)
        if probs.shape != (N_CLASSES,):
            raise DomainError(f"event_probs must have {N_CLASSES} entries, got shape {probs.shape}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
            raise DomainError("event_probs must be a probability vector")
        if not self.bearing_var >= VAR_MIN:
            raise DomainError(f"bearing_var must be >= {VAR_MIN}, got {self.bearing_var}")
        object.__setattr__(self, "event_probs", probs)


@dataclass
class TrajectorySamples:
    """
    Columnar training set.

    Shapes: obs (N, F), actions (N, H, 3) rows of (delta, throttle, dt),
    event_labels (N, H) class indices, bearing_labels (N, H) radians.
    """

    obs: np.ndarray
    actions: np.ndarray
    event_labels: np.ndarray
    bearing_labels: np.ndarray

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.event_labels = np.asarray(self.event_labels, dtype=np.int64)
        self.bearing_labels = np.asarray(self.bearing_labels, dtype=np.float64)
        n = self.obs.shape[0]
        if self.obs.ndim != 2 or self.actions.ndim != 3 or self.actions.shape[2] != ACTION_DIM:
            raise DomainError(f"Bad sample shapes: obs {self.obs.shape}, actions {self.actions.shape}")
        horizon = self.actions.shape[1]
        for name in ("actions", "event_labels", "bearing_labels"):
            arr = getattr(self, name)
            if arr.shape[:2] != (n, horizon):
                raise DomainError(f"{name} has shape {arr.shape}, expected leading ({n}, {horizon})")
        if self.event_labels.size and (self.event_labels.min() < 0 or self.event_labels.max() >= N_CLASSES):
            raise DomainError("event label out of range")

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    def subset(self, index) -> "TrajectorySamples":
        return TrajectorySamples(self.obs[index], self.actions[index], self.event_labels[index], self.bearing_labels[index])

    @classmethod
    def empty(cls, obs_dim: int, horizon: int) -> "TrajectorySamples":
        return cls(np.zeros((0, obs_dim)), np.zeros((0, horizon, ACTION_DIM)),
                   np.zeros((0, horizon), dtype=np.int64), np.zeros((0, horizon)))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters; everything needed to rebuild the weight manifest."""

    architecture: str = "transformer"
    obs_dim: int = 64
    width: int = 32
    layers: int = 2
    heads: int = 2
    obs_hidden: int = 64
    var_min: float = VAR_MIN

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise DomainError(f"Unknown architecture '{self.architecture}'")
        if min(self.obs_dim, self.width, self.layers, self.heads, self.obs_hidden) < 1:
            raise DomainError("Model dimensions must be positive")
        if self.architecture == "transformer" and self.width % self.heads:
            raise DomainError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.var_min <= 0:
            raise DomainError("var_min must be > 0")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], obs_dim: int) -> "ModelConfig":
        return cls(
            architecture=data["architecture"],
            obs_dim=int(obs_dim),
            width=int(data["width"]),
            layers=int(data["layers"]),
            heads=int(data["heads"]),
            obs_hidden=int(data["obs_hidden"]),
            var_min=float(data["var_min"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class ModelWeights:
    """Named tensors in manifest order plus provenance."""

    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    seed: int
    training: Dict[str, Any] = field(default_factory=dict)

    @property
    def architecture(self) -> str:
        return self.config.architecture

    def manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, tuple(t.shape)) for name, t in self.tensors.items()]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.seed, dict(self.training))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])


def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Weight manifest implied by an architecture config, in creation order."""
    w, f, hid = config.width, config.obs_dim, config.obs_hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        "obs.w1": (f, hid),
        "obs.b1": (hid,),
        "obs.w2": (hid, w),
        "obs.b2": (w,),
        "act.w": (ACTION_DIM, w),
        "act.b": (w,),
    }
    for layer in range(config.layers):
        p = f"block{layer}."
        if config.architecture == "transformer":
            shapes.update({
                p + "ln1.g": (w,), p + "ln1.b": (w,),
                p + "wq": (w, w), p + "wk": (w, w), p + "wv": (w, w),
                p + "wo": (w, w), p + "bo": (w,),
                p + "ln2.g": (w,), p + "ln2.b": (w,),
                p + "ff.w1": (w, 2 * w), p + "ff.b1": (2 * w,),
                p + "ff.w2": (2 * w, w), p + "ff.b2": (w,),
            })
        else:
            shapes.update({p + "wx": (w, 4 * w), p + "wh": (w, 4 * w), p + "b": (4 * w,)})
    shapes.update({
        "final.ln.g": (w,),
        "final.ln.b": (w,),
        "head.event.w": (w, N_CLASSES),
        "head.event.b": (N_CLASSES,),
        "head.bearing.w": (w, 2),
        "head.bearing.b": (2,),
    })
    return shapes


def check_manifest(weights: ModelWeights) -> None:
    """Raise DomainError if tensors do not match the architecture config."""
    expected = expected_shapes(weights.config)
    actual = dict(weights.manifest())
    if list(expected) != list(actual):
        raise DomainError(f"Tensor names do not match {weights.architecture} manifest")
    for name, shape in expected.items():
        if actual[name] != shape:
            raise DomainError(f"Tensor {name} has shape {actual[name]}, expected {shape}")
    if not weights.all_finite():
        raise DomainError("Weights contain non-finite values")
