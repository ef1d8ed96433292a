"""
Minibatch Adam training, ensemble training and the finite-difference gradient check.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from offroad_planner.errors import DomainError, TrainingError
from offroad_planner.parallel import map_ordered
from offroad_planner.seqmodel.network import init_weights, model_loss
from offroad_planner.seqmodel.tape import GradTape
from offroad_planner.seqmodel.types import ModelConfig, ModelWeights, TrajectorySamples
from offroad_planner.vehicle import throttle_to_dt

logger = logging.getLogger(__name__)

# Gradients smaller than this are compared in absolute terms.
GRAD_CHECK_FLOOR = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch: int = 64
    lr: float = 3e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise DomainError("epochs and batch must be >= 1")
        if self.lr < 0:
            raise DomainError("lr must be >= 0")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], seed: int) -> "TrainConfig":
        return cls(epochs=int(data["epochs"]), batch=int(data["batch"]), lr=float(data["lr"]), seed=int(seed))


@dataclass
class TrainResult:
    weights: ModelWeights
    loss_trace: List[float] = field(default_factory=list)
    ce_trace: List[float] = field(default_factory=list)
    nll_trace: List[float] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, tensors: Dict[str, np.ndarray], lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, w in tensors.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            w -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def dataset_loss(weights: ModelWeights, data: TrajectorySamples, batch: int = 256) -> Dict[str, float]:
    """Sample-weighted mean loss components over a whole dataset."""
    totals = {"loss": 0.0, "ce": 0.0, "nll": 0.0}
    for start in range(0, len(data), batch):
        chunk = data.subset(slice(start, start + batch))
        total, ce, nll, _ = model_loss(GradTape(record=False), weights, chunk.obs, chunk.actions,
                                       chunk.event_labels, chunk.bearing_labels)
        for key, node in (("loss", total), ("ce", ce), ("nll", nll)):
            totals[key] += float(node.value) * len(chunk)
    return {k: v / len(data) for k, v in totals.items()}


def train(dataset: TrajectorySamples, model_config: ModelConfig, config: TrainConfig,
          init: Optional[ModelWeights] = None) -> TrainResult:
    """
    Fit one model with Adam over shuffled minibatches.

    Args:
        dataset: Training samples (non-empty)
        model_config: Architecture; obs_dim must match the dataset
        config: Optimization settings; seed drives init and shuffling
        init: Optional starting weights (copied)

    Returns:
        TrainResult holding the weights with the lowest end-of-epoch loss

    Raises:
        TrainingError: If a minibatch loss is non-finite
    """
    if len(dataset) == 0:
        raise DomainError("Cannot train on an empty dataset")
    if dataset.obs_dim != model_config.obs_dim:
        raise DomainError(f"Dataset obs_dim {dataset.obs_dim} != model obs_dim {model_config.obs_dim}")

    rng = np.random.default_rng(config.seed)
    weights = init.copy() if init is not None else init_weights(model_config, config.seed)
    weights.training = {"epochs": config.epochs, "batch": config.batch, "lr": config.lr, "seed": config.seed}
    adam = Adam(weights.tensors, config.lr, config.beta1, config.beta2, config.eps)
    result = TrainResult(weights=weights.copy())
    best = math.inf

    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for batch_index, start in enumerate(range(0, len(dataset), config.batch)):
            chunk = dataset.subset(order[start:start + config.batch])
            tape = GradTape()
            total, _, _, _ = model_loss(tape, weights, chunk.obs, chunk.actions, chunk.event_labels, chunk.bearing_labels)
            if not np.isfinite(total.value):
                raise TrainingError(batch_index=batch_index, epoch=epoch)
            adam.step(weights.tensors, tape.backward(total))
            result.steps += 1

        summary = dataset_loss(weights, dataset)
        result.loss_trace.append(summary["loss"])
        result.ce_trace.append(summary["ce"])
        result.nll_trace.append(summary["nll"])
        if summary["loss"] < best:
            best = summary["loss"]
            result.best_epoch = epoch
            result.weights = weights.copy()
        logger.debug(f"epoch {epoch}: loss={summary['loss']:.5f} ce={summary['ce']:.5f} nll={summary['nll']:.5f}")

    logger.info(f"Trained {model_config.architecture} (seed {config.seed}): best loss {best:.5f} at epoch {result.best_epoch}")
    return result


def member_seeds(seed: int, members: int) -> List[int]:
    """Distinct, reproducible per-member seeds."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(members)]


def train_ensemble(dataset: TrajectorySamples, model_config: ModelConfig, config: TrainConfig,
                   members: int = 5, max_workers: Optional[int] = None) -> List[TrainResult]:
    """Train independently seeded members, possibly in parallel; order follows member index."""
    if members < 2:
        raise DomainError("An ensemble needs at least two members")
    configs = [TrainConfig(config.epochs, config.batch, config.lr, s, config.beta1, config.beta2, config.eps)
               for s in member_seeds(config.seed, members)]
    return map_ordered(lambda c: train(dataset, model_config, c), configs, max_workers=max_workers)


@dataclass
class GradCheckResult:
    architecture: str
    max_rel_error: float
    n_coords: int


def grad_check(architecture: str = "transformer", seed: int = 0, n_coords: int = 100, step: float = 1e-5) -> GradCheckResult:
    """
    Compare tape gradients of a width-8, H=4 model with central differences.

    Coordinates are drawn uniformly over all weight entries.
    """
    config = ModelConfig(architecture=architecture, obs_dim=6, width=8, layers=2, heads=2, obs_hidden=8)
    rng = np.random.default_rng(seed)
    weights = init_weights(config, seed)
    for name, t in weights.tensors.items():
        t += rng.normal(0.0, 0.1, size=t.shape)

    bsz, horizon = 2, 4
    obs = rng.normal(size=(bsz, config.obs_dim))
    throttle = rng.uniform(0.0, 1.0, size=(bsz, horizon))
    actions = np.stack([rng.uniform(-0.35, 0.35, size=(bsz, horizon)), throttle, throttle_to_dt(throttle)], axis=-1)
    labels = rng.integers(0, 9, size=(bsz, horizon))
    bearings = rng.normal(0.0, 1.0, size=(bsz, horizon))

    def value() -> float:
        total, _, _, _ = model_loss(GradTape(record=False), weights, obs, actions, labels, bearings)
        return float(total.value)

    tape = GradTape()
    total, _, _, _ = model_loss(tape, weights, obs, actions, labels, bearings)
    grads = tape.backward(total)

    names = list(weights.tensors)
    sizes = np.array([weights.tensors[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(int(offsets[-1]), size=min(n_coords, int(offsets[-1])), replace=False)

    worst = 0.0
    for flat_index in picks:
        k = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        name, local = names[k], int(flat_index - offsets[k])
        tensor = weights.tensors[name].reshape(-1)
        original = tensor[local]
        tensor[local] = original + step
        up = value()
        tensor[local] = original - step
        down = value()
        tensor[local] = original
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[name].reshape(-1)[local])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR)
        worst = max(worst, rel)

    logger.info(f"Gradient check ({architecture}, seed {seed}): max relative error {worst:.3e} over {len(picks)} coordinates")
    return GradCheckResult(architecture=architecture, max_rel_error=worst, n_coords=len(picks))
