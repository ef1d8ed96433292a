"""
Seeded synthetic terrain world.

Generates labeled terrain grids with a slope field and answers every
ground-truth query the rest of the system needs: observation feature
vectors, per-step event labels along rollouts, noisy sensor readings,
training datasets and an oracle ensemble for planning studies.

Grid convention: cell (row, col) covers x in [col, col+1) * cell_size and
y in [row, row+1) * cell_size. Cells outside the grid read as
other-obstacles.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from offroad_planner.errors import DomainError, GenerationError, ObservationError
from offroad_planner.estimator import Measurement
from offroad_planner.events import COLLISION_CLASSES, N_CLASSES, OTHER_OBSTACLES, label_frequencies
from offroad_planner.seqmodel.types import TrajectorySamples
from offroad_planner.vehicle import (
    DELTA_MAX,
    PHI,
    PSI,
    SIGMA,
    SIGMA_MIN,
    STATE_DIM,
    V,
    ModelParams,
    VehicleState,
    batch_rollout,
    throttle_to_dt,
    wrap_angle,
)

logger = logging.getLogger(__name__)

MAX_SLOPE = 0.15
LATERAL_STEPS = 3
SPEED_SCALE = 3.0
_BLOCK = np.array([(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)])


@dataclass(frozen=True)
class WorldConfig:
    size: int = 64
    cell_size: float = 0.5
    blob_scale: float = 3.0
    class_frequencies: Tuple[float, ...] = tuple(label_frequencies())
    forward_offsets: int = 6
    forward_spacing: float = 1.5
    lateral_spacing: float = 2.0
    noise_std: float = 0.05

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WorldConfig":
        return cls(
            size=int(data["size"]),
            cell_size=float(data["cell_size"]),
            blob_scale=float(data["blob_scale"]),
            class_frequencies=tuple(float(f) for f in data["class_frequencies"]),
            forward_offsets=int(data["forward_offsets"]),
            forward_spacing=float(data["forward_spacing"]),
            lateral_spacing=float(data["lateral_spacing"]),
            noise_std=float(data["noise_std"]),
        )

    @property
    def feature_dim(self) -> int:
        return self.forward_offsets * N_CLASSES + 2 * LATERAL_STEPS + 4


@dataclass(frozen=True, eq=False)
class TerrainWorld:
    """Immutable labeled grid (row-major, uint8 classes) with a slope field in rad."""

    grid: np.ndarray
    slope: np.ndarray
    cell_size: float
    seed: int
    class_frequencies: Tuple[float, ...]
    blob_scale: float = 3.0

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.uint8)
        slope = np.array(self.slope, dtype=np.float64)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1] or slope.shape != grid.shape:
            raise DomainError(f"Grid {grid.shape} and slope {slope.shape} must be equal squares")
        if grid.size and grid.max() >= N_CLASSES:
            raise DomainError("Grid holds an unknown class index")
        grid.setflags(write=False)
        slope.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "slope", slope)

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    @property
    def extent(self) -> float:
        return self.size * self.cell_size

    def cells(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64)
        cols = np.floor(xy[..., 0] / self.cell_size).astype(np.int64)
        rows = np.floor(xy[..., 1] / self.cell_size).astype(np.int64)
        return rows, cols

    def contains(self, xy: np.ndarray) -> np.ndarray:
        rows, cols = self.cells(xy)
        return (rows >= 0) & (rows < self.size) & (cols >= 0) & (cols < self.size)

    def labels_at(self, xy: np.ndarray) -> np.ndarray:
        """Class per point; points outside the grid read as other-obstacles."""
        rows, cols = self.cells(xy)
        return self._lookup(rows, cols)

    def _lookup(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        inside = (rows >= 0) & (rows < self.size) & (cols >= 0) & (cols < self.size)
        out = np.full(rows.shape, OTHER_OBSTACLES, dtype=np.int64)
        out[inside] = self.grid[rows[inside], cols[inside]]
        return out

    def slope_at(self, xy: np.ndarray) -> np.ndarray:
        """Slope per point; raises ObservationError for points off the grid."""
        inside = self.contains(xy)
        if not np.all(inside):
            raise ObservationError(f"Position {np.asarray(xy).tolist()} is outside the {self.extent} m world")
        rows, cols = self.cells(xy)
        value = self.slope[rows, cols]
        return float(value) if np.ndim(value) == 0 else value

    def marginals(self) -> np.ndarray:
        return np.bincount(self.grid.ravel(), minlength=N_CLASSES) / self.grid.size


def _validate_frequencies(class_frequencies: Sequence[float]) -> np.ndarray:
    freqs = np.asarray(class_frequencies, dtype=np.float64)
    if freqs.shape != (N_CLASSES,) or np.any(freqs < 0) or abs(freqs.sum() - 1.0) > 1e-9:
        raise DomainError(f"class_frequencies must be {N_CLASSES} non-negative values summing to 1")
    return freqs


def _target_counts(freqs: np.ndarray, cells: int) -> np.ndarray:
    """Largest-remainder rounding of freqs * cells."""
    raw = freqs * cells
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: cells - counts.sum()]] += 1
    return counts


def generate_world(seed: int, size: int = 64, class_frequencies: Optional[Sequence[float]] = None,
                   blob_scale: float = 3.0, cell_size: float = 0.5) -> TerrainWorld:
    """
    Seeded blob-noise terrain with exact class marginals.

    Every class except the most frequent one claims the unclaimed cells where
    its own smoothed noise field is highest; the most frequent class fills the
    remainder. The slope is an independent smoothed field scaled to +/-0.15 rad.

    Raises:
        DomainError: If size < 8 or the frequencies do not sum to 1
    """
    if size < 8:
        raise DomainError(f"World size must be >= 8, got {size}")
    freqs = _validate_frequencies(label_frequencies() if class_frequencies is None else class_frequencies)
    rng = np.random.default_rng(seed)
    counts = _target_counts(freqs, size * size)
    background = int(np.argmax(freqs))

    grid = np.full((size, size), background, dtype=np.uint8)
    free = np.ones(size * size, dtype=bool)
    fields = [gaussian_filter(rng.standard_normal((size, size)), sigma=blob_scale, mode="wrap").ravel()
              for _ in range(N_CLASSES)]
    for cls in np.argsort(freqs, kind="stable"):
        if cls == background or counts[cls] == 0:
            continue
        candidates = np.flatnonzero(free)
        chosen = candidates[np.argsort(-fields[cls][candidates], kind="stable")[: counts[cls]]]
        grid.flat[chosen] = cls
        free[chosen] = False

    slope = gaussian_filter(rng.standard_normal((size, size)), sigma=2.0 * blob_scale, mode="wrap")
    peak = np.max(np.abs(slope))
    slope = slope / peak * MAX_SLOPE if peak > 0 else slope
    logger.debug(f"Generated {size}x{size} world (seed {seed}), marginals {np.round(np.bincount(grid.ravel(), minlength=N_CLASSES) / grid.size, 3)}")
    return TerrainWorld(grid=grid, slope=slope, cell_size=cell_size, seed=int(seed),
                        class_frequencies=tuple(float(f) for f in freqs), blob_scale=float(blob_scale))


def blank_world(size: int, cls: int, cell_size: float = 0.5, slope: float = 0.0) -> TerrainWorld:
    """Uniform world of a single class, for constructed scenarios."""
    freqs = np.zeros(N_CLASSES)
    freqs[cls] = 1.0
    return TerrainWorld(grid=np.full((size, size), cls, dtype=np.uint8), slope=np.full((size, size), slope),
                        cell_size=cell_size, seed=-1, class_frequencies=tuple(freqs))


def paint(world: TerrainWorld, x_range: Tuple[float, float], y_range: Tuple[float, float], cls: int) -> TerrainWorld:
    """Copy of world with every cell whose centre lies in the rectangle set to cls."""
    centres = (np.arange(world.size) + 0.5) * world.cell_size
    cols = (centres >= x_range[0]) & (centres < x_range[1])
    rows = (centres >= y_range[0]) & (centres < y_range[1])
    grid = world.grid.copy()
    grid[np.ix_(rows, cols)] = cls
    return TerrainWorld(grid=grid, slope=world.slope, cell_size=world.cell_size, seed=world.seed,
                        class_frequencies=world.class_frequencies, blob_scale=world.blob_scale)


def _block_labels(world: TerrainWorld, points: np.ndarray) -> np.ndarray:
    """Labels of the 3x3 cell block around each point: (..., 2) -> (..., 9)."""
    rows, cols = world.cells(points)
    return world._lookup(rows[..., None] + _BLOCK[:, 0], cols[..., None] + _BLOCK[:, 1])


def observe_batch(world: TerrainWorld, states: np.ndarray, config: WorldConfig,
                  noise: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Observation vectors for states (N, 6).

    Layout: class histograms of the 3x3 block at each forward offset, then
    collision-class fractions left/right at three forward distances, then
    slope, cos(psi), sin(psi), v / 3.

    Raises:
        ObservationError: If a vehicle position is outside the grid
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    pos = states[:, :2]
    if not np.all(world.contains(pos)):
        raise ObservationError("Vehicle position outside the world")
    psi = states[:, PSI]
    fwd = np.stack([np.cos(psi), np.sin(psi)], axis=-1)
    left = np.stack([-np.sin(psi), np.cos(psi)], axis=-1)

    dists = config.forward_spacing * np.arange(1, config.forward_offsets + 1)
    ahead = pos[:, None, :] + dists[None, :, None] * fwd[:, None, :]
    hist = np.eye(N_CLASSES)[_block_labels(world, ahead)].mean(axis=-2)

    lat = config.lateral_spacing * np.arange(1, LATERAL_STEPS + 1)
    sides = np.array([1.0, -1.0]) * config.lateral_spacing
    lateral = (pos[:, None, None, :] + lat[None, :, None, None] * fwd[:, None, None, :]
               + sides[None, None, :, None] * left[:, None, None, :])
    blocked = np.isin(_block_labels(world, lateral), COLLISION_CLASSES).mean(axis=-1)

    scalars = np.stack([np.atleast_1d(world.slope_at(pos)), np.cos(psi), np.sin(psi), states[:, V] / SPEED_SCALE], axis=-1)
    features = np.concatenate([hist.reshape(len(states), -1), blocked.reshape(len(states), -1), scalars], axis=1)
    if noise is not None:
        features = features + noise
    return features


def observe(world: TerrainWorld, state: VehicleState, noise_seed: Optional[int], config: WorldConfig) -> np.ndarray:
    """Observation for one state; noise_seed None or noise_std 0 gives the clean vector."""
    noise = None
    if noise_seed is not None and config.noise_std > 0:
        noise = np.random.default_rng(noise_seed).normal(0.0, config.noise_std, size=(1, config.feature_dim))
    return observe_batch(world, state.as_array()[None, :], config, noise)[0]


@dataclass
class GroundTruth:
    labels: np.ndarray
    collision: np.ndarray
    bearing: np.ndarray
    truncated: bool = False


def ground_truth_batch(world: TerrainWorld, trajectories: np.ndarray,
                       collision_classes: Iterable[int] = COLLISION_CLASSES) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labels, collision flags and in-bounds mask for states 1..H of trajectories (N, H+1, 6)."""
    future = trajectories[:, 1:, :]
    labels = world.labels_at(future[..., :2])
    collision = np.isin(labels, list(collision_classes))
    inside = world.contains(future[..., :2])
    return labels, collision, inside


def ground_truth(world: TerrainWorld, rollout: Sequence[VehicleState], dts: Sequence[float],
                 collision_classes: Iterable[int] = COLLISION_CLASSES) -> GroundTruth:
    """
    Per-step labels along a rollout; step t describes rollout state t+1.

    A rollout leaving the grid is truncated before its first outside state.
    """
    if len(rollout) != len(dts) + 1:
        raise DomainError(f"{len(rollout)} states do not match {len(dts)} time steps")
    if len(dts) == 0:
        empty = np.zeros(0)
        return GroundTruth(empty.astype(np.int64), empty.astype(bool), empty)
    traj = np.array([s.as_array() for s in rollout])[None]
    labels, collision, inside = ground_truth_batch(world, traj, collision_classes)
    keep = len(dts) if np.all(inside) else int(np.argmin(inside[0]))
    return GroundTruth(labels=labels[0, :keep], collision=collision[0, :keep],
                       bearing=traj[0, 1:keep + 1, PSI], truncated=keep < len(dts))


def measure(world: TerrainWorld, state: VehicleState, accel: Optional[float], t: float, stds: Dict[str, float],
            rng: np.random.Generator) -> Measurement:
    """Noisy GPS position/heading, accelerometer and odometry with the given stds; accel None omits that channel."""
    if not world.contains(state.position):
        raise ObservationError(f"Vehicle at {state.position.tolist()} is outside the world")
    noise = rng.standard_normal(5)
    return Measurement(
        t=float(t),
        gps_xy=(state.x + stds["gps_xy_std"] * noise[0], state.y + stds["gps_xy_std"] * noise[1]),
        gps_psi=wrap_angle(state.psi + stds["gps_psi_std"] * noise[2]),
        accel=None if accel is None else float(accel + stds["accel_std"] * noise[3]),
        speed=float(state.v + stds["speed_std"] * noise[4]),
        gps_xy_std=stds["gps_xy_std"],
        gps_psi_std=stds["gps_psi_std"],
        accel_std=stds["accel_std"],
        speed_std=stds["speed_std"],
    )


def random_actions(rng: np.random.Generator, n: int, horizon: int, delta_max: float = DELTA_MAX) -> np.ndarray:
    """Random (delta, throttle, dt) rows: random-walk steering, throttle near the 1X/2X/3X levels."""
    delta = np.cumsum(rng.normal(0.0, 0.1, size=(n, horizon)), axis=1)
    delta = np.clip(delta + rng.uniform(-delta_max, delta_max, size=(n, 1)), -delta_max, delta_max)
    throttle = rng.choice(np.array([0.0, 0.5, 1.0]), size=(n, horizon)) + rng.uniform(-0.1, 0.1, size=(n, horizon))
    throttle = np.clip(throttle, 0.0, 1.0)
    return np.stack([delta, throttle, throttle_to_dt(throttle)], axis=-1)


def make_dataset(world: TerrainWorld, n_samples: int, horizon: int, seed: int, config: WorldConfig,
                 params: ModelParams = ModelParams(), v_max: float = SPEED_SCALE,
                 max_rounds: int = 50) -> TrajectorySamples:
    """
    Random in-bounds rollouts labeled with ground truth.

    Raises:
        GenerationError: If too few rollouts stay inside the world
    """
    if horizon < 1 or n_samples < 0:
        raise DomainError("horizon must be >= 1 and n_samples >= 0")
    if horizon not in (10, 20, 40):
        logger.debug(f"make_dataset with non-standard horizon {horizon}")
    if n_samples == 0:
        return TrajectorySamples.empty(config.feature_dim, horizon)

    rng = np.random.default_rng(seed)
    margin = min(1.0, world.extent / 4.0)
    kept_traj, kept_actions = [], []
    have = 0
    for _ in range(max_rounds):
        batch = max(64, 2 * (n_samples - have))
        starts = np.zeros((batch, STATE_DIM))
        starts[:, :2] = rng.uniform(margin, world.extent - margin, size=(batch, 2))
        starts[:, PSI] = rng.uniform(-math.pi, math.pi, size=batch)
        starts[:, V] = rng.uniform(0.0, v_max, size=batch)
        starts[:, PHI] = world.slope_at(starts[:, :2])
        starts[:, SIGMA] = SIGMA_MIN
        actions = random_actions(rng, batch, horizon)
        traj = batch_rollout(starts, actions[..., :2], params, actions[..., 2], v_max)
        ok = np.flatnonzero(world.contains(traj[..., :2]).all(axis=1))[: n_samples - have]
        kept_traj.append(traj[ok])
        kept_actions.append(actions[ok])
        have += ok.size
        if have == n_samples:
            break
    if have < n_samples:
        raise GenerationError(f"Only {have} of {n_samples} rollouts stayed inside the {world.extent} m world")

    traj = np.concatenate(kept_traj)
    actions = np.concatenate(kept_actions)
    noise = rng.normal(0.0, config.noise_std, size=(n_samples, config.feature_dim)) if config.noise_std > 0 else None
    obs = observe_batch(world, traj[:, 0], config, noise)
    labels, _, _ = ground_truth_batch(world, traj)
    return TrajectorySamples(obs=obs, actions=actions, event_labels=labels, bearing_labels=traj[:, 1:, PSI])


def split_dataset(data: TrajectorySamples, test_samples: int) -> Tuple[TrajectorySamples, TrajectorySamples]:
    """Last test_samples rows are held out."""
    cut = len(data) - test_samples
    if cut < 1:
        raise DomainError("Held-out split leaves no training samples")
    return data.subset(slice(0, cut)), data.subset(slice(cut, None))


class OraclePredictor:
    """
    Ground-truth ensemble stand-in.

    Members agree on the (smoothed one-hot) event class read from the world
    along the rolled-out candidate. Their bearing means are spread
    symmetrically around the true heading by base_spread + dt_gain * (dt - 0.2),
    so disagreement grows with the time dilation of each step.
    """

    def __init__(self, world: TerrainWorld, params: ModelParams = ModelParams(), members: int = 5,
                 base_spread: float = 0.05, dt_gain: float = 1.0, bearing_var: float = 0.01,
                 smoothing: float = 0.02, v_max: Optional[float] = SPEED_SCALE):
        if members < 2:
            raise DomainError("An ensemble needs at least two members")
        self.world = world
        self.params = params
        self.members = members
        self.base_spread = base_spread
        self.dt_gain = dt_gain
        self.bearing_var = bearing_var
        self.smoothing = smoothing
        self.v_max = v_max
        self.offsets = np.linspace(-1.0, 1.0, members)

    def predict_batch(self, obs: np.ndarray, actions: np.ndarray,
                      state: Optional[VehicleState] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if state is None:
            raise DomainError("OraclePredictor needs the vehicle state")
        actions = np.asarray(actions, dtype=np.float64)
        start = state.as_array()
        if self.world.contains(start[:2]):
            start[PHI] = self.world.slope_at(start[:2])
        traj = batch_rollout(start, actions[..., :2], self.params, actions[..., 2], self.v_max)
        labels = self.world.labels_at(traj[:, 1:, :2])
        probs = (1.0 - self.smoothing) * np.eye(N_CLASSES)[labels] + self.smoothing / N_CLASSES
        spread = self.base_spread + self.dt_gain * (actions[..., 2] - 0.2)
        mu = traj[None, :, 1:, PSI] + self.offsets[:, None, None] * spread[None]
        var = np.full(mu.shape, self.bearing_var)
        return np.broadcast_to(probs, (self.members,) + probs.shape).copy(), mu, var


def save_world(world: TerrainWorld, path: Union[str, Path]) -> Path:
    """One file: JSON header line, uint8 class grid, little-endian float64 slope grid."""
    header = {
        "seed": world.seed,
        "size": world.size,
        "cell_size": world.cell_size,
        "blob_scale": world.blob_scale,
        "class_frequencies": list(world.class_frequencies),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        handle.write(world.grid.astype(np.uint8).tobytes())
        handle.write(world.slope.astype("<f8").tobytes())
    return path


def load_world(path: Union[str, Path]) -> TerrainWorld:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    size = int(header["size"])
    body = raw[newline + 1:]
    if len(body) != size * size * 9:
        raise DomainError(f"World file body has {len(body)} bytes, expected {size * size * 9}")
    grid = np.frombuffer(body[: size * size], dtype=np.uint8).reshape(size, size)
    slope = np.frombuffer(body[size * size:], dtype="<f8").reshape(size, size).astype(np.float64)
    return TerrainWorld(grid=grid, slope=slope, cell_size=float(header["cell_size"]), seed=int(header["seed"]),
                        class_frequencies=tuple(header["class_frequencies"]), blob_scale=float(header["blob_scale"]))


DATASET_FIELDS = ("obs", "actions", "event_labels", "bearing_labels")


def save_dataset(data: TrajectorySamples, directory: Union[str, Path]) -> Path:
    """One .npy file per column."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in DATASET_FIELDS:
        np.save(directory / f"{name}.npy", getattr(data, name), allow_pickle=False)
    return directory


def load_dataset(directory: Union[str, Path]) -> TrajectorySamples:
    directory = Path(directory)
    arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False) for name in DATASET_FIELDS}
    return TrajectorySamples(**arrays)
