"""
Epistemic uncertainty of a model ensemble.

Model uncertainty is the mutual information between a prediction and the
ensemble member that produced it:

* categorical head: entropy of the mean distribution minus the mean member
  entropy (closed form);
* Gaussian bearing head: pairwise-distance estimate over the member
  Gaussians using either the KL divergence or the Bhattacharyya distance.

Both are combined into the scalar sigma that the MPC reward penalizes.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, xlogy

from offroad_planner.csvio import emit_csv
from offroad_planner.errors import DomainError, InferenceError
from offroad_planner.events import N_CLASSES
from offroad_planner.parallel import map_ordered
from offroad_planner.seqmodel.network import predict_batch
from offroad_planner.seqmodel.types import ModelWeights, StepPrediction
from offroad_planner.vehicle import SIGMA_MIN, VehicleState

logger = logging.getLogger(__name__)

DISTANCES = ("kl", "bhattacharyya")
TRACE_HEADER = ("step", "mi_class", "mi_kl", "mi_bhatt", "sigma")
HORIZON_HEADER = (
    "step",
    "mi_class_mean", "mi_class_ci95",
    "mi_kl_mean", "mi_kl_ci95",
    "mi_bhatt_mean", "mi_bhatt_ci95",
    "sigma_mean", "sigma_ci95",
)
Z_95 = 1.959963984540054


@dataclass
class EnsembleOutput:
    """
    Member predictions for one query, member axis first.

    Shapes: event_probs (M, H, 9), bearing_mu (M, H), bearing_var (M, H).
    """

    event_probs: np.ndarray
    bearing_mu: np.ndarray
    bearing_var: np.ndarray

    def __post_init__(self):
        self.event_probs = np.asarray(self.event_probs, dtype=np.float64)
        self.bearing_mu = np.asarray(self.bearing_mu, dtype=np.float64)
        self.bearing_var = np.asarray(self.bearing_var, dtype=np.float64)
        if self.event_probs.ndim != 3 or self.event_probs.shape[2] != N_CLASSES:
            raise DomainError(f"event_probs must have shape (M, H, {N_CLASSES}), got {self.event_probs.shape}")
        if self.members < 2:
            raise DomainError(f"An ensemble needs at least two members, got {self.members}")
        m, h = self.event_probs.shape[:2]
        if self.bearing_mu.shape != (m, h) or self.bearing_var.shape != (m, h):
            raise DomainError("All members must share the same horizon")

    @property
    def members(self) -> int:
        return self.event_probs.shape[0]

    @property
    def horizon(self) -> int:
        return self.event_probs.shape[1]

    @classmethod
    def from_predictions(cls, members: Sequence[Sequence[StepPrediction]]) -> "EnsembleOutput":
        lengths = {len(m) for m in members}
        if len(lengths) > 1:
            raise DomainError(f"Members disagree on horizon: {sorted(lengths)}")
        return cls(
            np.array([[p.event_probs for p in m] for m in members]),
            np.array([[p.bearing_mu for p in m] for m in members]),
            np.array([[p.bearing_var for p in m] for m in members]),
        )

    def member(self, k: int) -> List[StepPrediction]:
        return [StepPrediction(self.event_probs[k, t], float(self.bearing_mu[k, t]), float(self.bearing_var[k, t]))
                for t in range(self.horizon)]

    def mean_prediction(self) -> List[StepPrediction]:
        """Equal-weight mixture moments per step."""
        probs = self.event_probs.mean(axis=0)
        mu = self.bearing_mu.mean(axis=0)
        var = self.bearing_var.mean(axis=0) + self.bearing_mu.var(axis=0)
        return [StepPrediction(probs[t] / probs[t].sum(), float(mu[t]), float(var[t])) for t in range(self.horizon)]


@dataclass
class UncertaintyTrace:
    mi_class: np.ndarray
    mi_bearing_kl: np.ndarray
    mi_bearing_bhatt: np.ndarray
    sigma: np.ndarray

    def rows(self) -> List[Tuple[int, float, float, float, float]]:
        return [(t, float(self.mi_class[t]), float(self.mi_bearing_kl[t]), float(self.mi_bearing_bhatt[t]),
                 float(self.sigma[t])) for t in range(len(self.sigma))]


def categorical_mi_array(probs: np.ndarray) -> np.ndarray:
    """Vectorized categorical MI over member axis 0 of probs (M, ..., C)."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-6):
        raise DomainError("Every member row must be a probability distribution")
    mean = probs.mean(axis=0)
    total = -xlogy(mean, mean).sum(axis=-1)
    expected = -xlogy(probs, probs).sum(axis=-1).mean(axis=0)
    return np.maximum(total - expected, 0.0)


def categorical_mi(member_probs: np.ndarray) -> float:
    """
    Mutual information of an (M, C) set of member distributions, in nats.

    Raises:
        DomainError: If a row is not a distribution within 1e-6
    """
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim != 2:
        raise DomainError(f"Expected (M, C) member probabilities, got shape {member_probs.shape}")
    return float(categorical_mi_array(member_probs))


def pairwise_distances(mu: np.ndarray, var: np.ndarray, distance: str) -> np.ndarray:
    """D[i, j, ...] between member Gaussians i and j; inputs (M, ...)."""
    mu_i, mu_j = mu[:, None], mu[None, :]
    var_i, var_j = var[:, None], var[None, :]
    sq = (mu_i - mu_j) ** 2
    if distance == "kl":
        return 0.5 * np.log(var_j / var_i) + (var_i + sq) / (2.0 * var_j) - 0.5
    if distance == "bhattacharyya":
        summed = var_i + var_j
        return sq / (4.0 * summed) + 0.5 * np.log(summed / (2.0 * np.sqrt(var_i * var_j)))
    raise DomainError(f"Unknown distance '{distance}', expected one of {DISTANCES}")


def gaussian_mi_array(mu: np.ndarray, var: np.ndarray, distance: str = "kl") -> np.ndarray:
    """Vectorized pairwise-distance MI estimate over member axis 0."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mu.shape != var.shape:
        raise DomainError(f"mu {mu.shape} and var {var.shape} differ in shape")
    if not np.all(var > 0):
        raise DomainError("Member variances must be > 0")
    m = mu.shape[0]
    d = pairwise_distances(mu, var, distance)
    inner = logsumexp(-d, axis=1) - math.log(m)
    return np.maximum(-inner.mean(axis=0), 0.0)


def gaussian_mi_paide(mu: Sequence[float], var: Sequence[float], distance: str = "kl") -> float:
    """
    Pairwise-distance MI estimate for M univariate Gaussians, in nats.

    I = -(1/M) sum_i ln[(1/M) sum_j exp(-D(p_i, p_j))]

    Raises:
        DomainError: On non-positive variances or an unknown distance
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim != 1:
        raise DomainError("Expected one (mu, var) pair per member")
    return float(gaussian_mi_array(mu, var, distance))


def sigma_batch(event_probs: np.ndarray, bearing_mu: np.ndarray, bearing_var: np.ndarray,
                w_class: float = 1.0, w_bearing: float = 1.0, distance: str = "kl",
                sigma_min: float = SIGMA_MIN) -> np.ndarray:
    """
    Per-step sigma for arbitrary query batches, member axis first.

    sigma = max(sigma_min, w_class * mi_class / ln M + w_bearing * mi_bearing)
    """
    m = event_probs.shape[0]
    if m < 2:
        raise DomainError("sigma needs at least two members")
    mi_c = categorical_mi_array(event_probs)
    mi_b = gaussian_mi_array(bearing_mu, bearing_var, distance)
    return np.maximum(sigma_min, w_class * mi_c / math.log(m) + w_bearing * mi_b)


def uncertainty_trace(ens: EnsembleOutput, w_class: float = 1.0, w_bearing: float = 1.0,
                      distance: str = "kl", sigma_min: float = SIGMA_MIN) -> UncertaintyTrace:
    """Per-step MI terms and sigma; distance selects the bearing term entering sigma."""
    if distance not in DISTANCES:
        raise DomainError(f"Unknown distance '{distance}'")
    mi_c = categorical_mi_array(ens.event_probs)
    mi_kl = gaussian_mi_array(ens.bearing_mu, ens.bearing_var, "kl")
    mi_bh = gaussian_mi_array(ens.bearing_mu, ens.bearing_var, "bhattacharyya")
    mi_b = mi_kl if distance == "kl" else mi_bh
    sigma = np.maximum(sigma_min, w_class * mi_c / math.log(ens.members) + w_bearing * mi_b)
    return UncertaintyTrace(mi_class=mi_c, mi_bearing_kl=mi_kl, mi_bearing_bhatt=mi_bh, sigma=sigma)


class EnsemblePredictor:
    """
    M trained models queried as one predictor.

    Any object with predict_batch(obs, actions) -> (probs, mu, var), member
    axis first, can stand in for this class in the planner.
    """

    def __init__(self, models: Sequence[ModelWeights], max_workers: Optional[int] = None):
        if len(models) < 2:
            raise DomainError("An ensemble needs at least two members")
        configs = {m.config for m in models}
        if len(configs) != 1:
            raise DomainError("All ensemble members must share one architecture config")
        self.models = list(models)
        self.max_workers = max_workers

    @property
    def members(self) -> int:
        return len(self.models)

    @property
    def obs_dim(self) -> int:
        return self.models[0].config.obs_dim

    def predict_batch(self, obs: np.ndarray, actions: np.ndarray,
                      state: Optional[VehicleState] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Args:
            obs: One observation (F,) shared by all candidates, or (N, F)
            actions: Candidate action rows (N, H, 3)
            state: Unused; learned members see the world through obs only

        Returns:
            event_probs (M, N, H, 9), bearing_mu (M, N, H), bearing_var (M, N, H)
        """
        actions = np.asarray(actions, dtype=np.float64)
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            obs = np.broadcast_to(obs, (actions.shape[0], obs.shape[0]))

        def run(indexed):
            k, model = indexed
            try:
                return predict_batch(model, obs, actions)
            except InferenceError as e:
                raise InferenceError(e.layer, member=k) from e

        outputs = map_ordered(run, list(enumerate(self.models)), max_workers=self.max_workers)
        return tuple(np.stack([o[i] for o in outputs]) for i in range(3))

    def predict(self, obs: np.ndarray, actions: np.ndarray) -> EnsembleOutput:
        probs, mu, var = self.predict_batch(np.asarray(obs)[None, :], np.asarray(actions)[None, :, :])
        return EnsembleOutput(probs[:, 0], mu[:, 0], var[:, 0])


def ensemble_predict(models: Sequence[ModelWeights], obs: np.ndarray, actions: np.ndarray,
                     max_workers: Optional[int] = None) -> EnsembleOutput:
    """Forward every member on one query; member order follows model index."""
    return EnsemblePredictor(models, max_workers=max_workers).predict(obs, actions)


@dataclass
class HorizonCurve:
    """Per-step means and 95% confidence half-widths over many queries."""

    mean: np.ndarray
    ci95: np.ndarray
    count: int

    COLUMNS = ("mi_class", "mi_kl", "mi_bhatt", "sigma")

    def rows(self) -> List[tuple]:
        out = []
        for t in range(self.mean.shape[0]):
            row = [t]
            for c in range(len(self.COLUMNS)):
                row.extend([float(self.mean[t, c]), float(self.ci95[t, c])])
            out.append(tuple(row))
        return out


def horizon_curve(traces: Sequence[UncertaintyTrace]) -> HorizonCurve:
    """Aggregate traces of equal length into mean and normal-approximation CI per step."""
    if not traces:
        raise DomainError("horizon_curve needs at least one trace")
    stacked = np.stack([
        np.stack([tr.mi_class, tr.mi_bearing_kl, tr.mi_bearing_bhatt, tr.sigma], axis=-1) for tr in traces
    ])
    n = stacked.shape[0]
    mean = stacked.mean(axis=0)
    if n > 1:
        ci = Z_95 * stacked.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        ci = np.zeros_like(mean)
    return HorizonCurve(mean=mean, ci95=ci, count=n)


def mc_gaussian_mi(mu: Sequence[float], var: Sequence[float], n_samples: int = 1_000_000,
                   seed: int = 0) -> Tuple[float, float]:
    """
    Monte-Carlo mutual information of an equal-weight Gaussian mixture.

    Returns:
        (estimate, standard error), both in nats
    """
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise DomainError("Member variances must be > 0")
    m = mu.shape[0]
    rng = np.random.default_rng(seed)
    component = rng.integers(0, m, size=n_samples)
    x = mu[component] + np.sqrt(var[component]) * rng.standard_normal(n_samples)
    log_comp = -0.5 * (np.log(2.0 * np.pi * var)[None, :] + (x[:, None] - mu[None, :]) ** 2 / var[None, :])
    neg_log_mix = -(logsumexp(log_comp, axis=1) - math.log(m))
    mixture_entropy = neg_log_mix.mean()
    component_entropy = np.mean(0.5 * np.log(2.0 * np.pi * np.e * var))
    stderr = neg_log_mix.std(ddof=1) / math.sqrt(n_samples)
    return float(mixture_entropy - component_entropy), float(stderr)


def write_trace_csv(path: Union[str, Path], trace: UncertaintyTrace) -> Path:
    return emit_csv(path, TRACE_HEADER, trace.rows())


def write_horizon_csv(path: Union[str, Path], curve: HorizonCurve) -> Path:
    return emit_csv(path, HORIZON_HEADER, curve.rows())
