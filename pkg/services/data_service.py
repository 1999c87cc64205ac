# acrkn/services/data_service.py
"""
Synthetic actuator systems, trajectory CSV ingest, normalization,
batching and the two observation-masking protocols.

pendulum-lag (one step of length dt, action a_t held constant):
    u      <- a + (u - a) * exp(-dt / tau)          exact first-order lag
    omega  <- omega + dt * (-(g/L) sin(theta) - c * omega + u / (m L^2))
    theta  <- theta + dt * omega                     semi-implicit Euler
The observation is theta only; the actuator torque u stays hidden.

antagonistic-backlash passes the command through a dead-zone of width
`backlash` before the lag:
    a_eff  =  sign(a) * max(|a| - backlash / 2, 0)
linear-integrator is theta <- theta + gain * dt * a.
"""

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from domain.config import SyntheticSource
from domain.errors import ConfigError, DataError
from domain.models import Episodes, NormStats, SequenceBatch, SyntheticSystem, TrajectorySchema
from utils import csv_io

logger = logging.getLogger(__name__)

DatasetSource = Union[str, Path, SyntheticSource]

TRAJECTORY_FILE = "trajectories.csv"
MANIFEST_FILE = "manifest.json"
TRAIN_FRACTION = 0.8  # 4:1
MIN_STD = 1e-12

SeedLike = Union[int, np.random.Generator]


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------- synthetic systems ----------

def telegraph_actions(system: SyntheticSystem, length: int, rng: np.random.Generator) -> np.ndarray:
    """Exponentially smoothed random telegraph signal in [-action_limit, action_limit], shape (T, 1)."""
    limit = system.action_limit
    level = rng.uniform(-limit, limit)
    a = level
    out = np.empty((length, 1))
    for t in range(length):
        if rng.random() < system.switch_prob:
            level = rng.uniform(-limit, limit)
        a = system.smoothing * a + (1.0 - system.smoothing) * level
        out[t, 0] = a
    return out


def simulate_states(
        system: SyntheticSystem,
        actions: np.ndarray,
        theta0: float = 0.0,
        omega0: float = 0.0,
        lag: bool = True,
) -> Dict[str, np.ndarray]:
    """
    Noise-free state trajectory for the given actions (T, 1).
    Returns theta, omega and the applied torque u, each of length T (state before a_t acts).
    With lag=False the command drives the pendulum directly.
    """
    s = system
    length = actions.shape[0]
    theta, omega, u = float(theta0), float(omega0), 0.0
    decay = np.exp(-s.dt / s.tau)
    inertia = s.mass * s.length ** 2

    thetas, omegas, torques = np.empty(length), np.empty(length), np.empty(length)
    for t in range(length):
        thetas[t], omegas[t], torques[t] = theta, omega, u
        a = float(actions[t, 0])

        if s.kind == "linear-integrator":
            theta = theta + s.gain * s.dt * a
            continue

        if s.kind == "antagonistic-backlash":
            a = float(np.sign(a)) * max(abs(a) - 0.5 * s.backlash, 0.0)
        u = a + (u - a) * decay if lag else a

        omega = omega + s.dt * (-(s.gravity / s.length) * np.sin(theta) - s.damping * omega + u / inertia)
        theta = theta + s.dt * omega

    return {"theta": thetas, "omega": omegas, "u": torques}


def pendulum_energy(system: SyntheticSystem, theta: np.ndarray, omega: np.ndarray) -> np.ndarray:
    s = system
    return 0.5 * s.mass * s.length ** 2 * omega ** 2 + s.mass * s.gravity * s.length * (1.0 - np.cos(theta))


def simulate(system: SyntheticSystem, episodes: int, length: int, seed: int) -> Episodes:
    """Raw (unnormalized) trajectories; a pure function of (system, episodes, length, seed)."""
    if length < 2:
        raise DataError(f"Episode length must be >= 2, got {length}")
    if episodes < 1:
        raise DataError(f"Need at least one episode, got {episodes}")
    rng = np.random.default_rng(seed)

    observations, actions = [], []
    for _ in range(episodes):
        theta0 = rng.uniform(-1.0, 1.0)
        omega0 = 0.0 if system.kind == "linear-integrator" else rng.uniform(-0.5, 0.5)
        a = telegraph_actions(system, length, rng)
        states = simulate_states(system, a, theta0, omega0)
        o = states["theta"][:, None]
        if system.noise_std > 0:
            o = o + rng.normal(0.0, system.noise_std, size=o.shape)
        observations.append(o)
        actions.append(a)

    logger.info("Simulated %d episodes x %d steps of %s (seed %d)", episodes, length, system.kind, seed)
    return Episodes(observations=observations, actions=actions, episode_ids=list(range(episodes)))


# ---------- normalization ----------

def fit_norm(episodes: Episodes) -> NormStats:
    """Per-channel mean and population std over every step of the given (training) episodes."""
    if len(episodes) == 0:
        raise DataError("Cannot fit normalization on zero episodes")
    obs = np.concatenate(episodes.observations, axis=0)
    act = np.concatenate(episodes.actions, axis=0)
    stats = NormStats(obs_mean=obs.mean(axis=0), obs_std=obs.std(axis=0),
                      act_mean=act.mean(axis=0), act_std=act.std(axis=0))
    for label, std in (("observation", stats.obs_std), ("action", stats.act_std)):
        flat = np.flatnonzero(std < MIN_STD)
        if flat.size:
            raise DataError(f"Zero-variance {label} channel(s): {[int(i) + 1 for i in flat]}")
    return stats


def apply_norm(stats: NormStats, data: np.ndarray, kind: str = "obs") -> np.ndarray:
    mean, std = (stats.obs_mean, stats.obs_std) if kind == "obs" else (stats.act_mean, stats.act_std)
    return (np.asarray(data, dtype=np.float64) - mean) / std


def invert_norm(stats: NormStats, data: np.ndarray, kind: str = "obs") -> np.ndarray:
    mean, std = (stats.obs_mean, stats.obs_std) if kind == "obs" else (stats.act_mean, stats.act_std)
    return np.asarray(data, dtype=np.float64) * std + mean


def normalize_episodes(stats: NormStats, episodes: Episodes) -> Episodes:
    return Episodes(
        observations=[apply_norm(stats, o, "obs") for o in episodes.observations],
        actions=[apply_norm(stats, a, "act") for a in episodes.actions],
        episode_ids=list(episodes.episode_ids),
    )


# ---------- batching ----------

def to_batch(episodes: Episodes) -> SequenceBatch:
    """Stack equal-length episodes into a fully observed batch."""
    if len(episodes) == 0:
        raise DataError("Cannot build a batch from zero episodes")
    lengths = {o.shape[0] for o in episodes.observations}
    if len(lengths) != 1:
        raise DataError(f"Episodes in a batch must share one length, got {sorted(lengths)}")
    obs = np.stack(episodes.observations).astype(np.float64)
    act = np.stack(episodes.actions).astype(np.float64)
    if obs.shape[1] != act.shape[1]:
        raise DataError("Observations and actions have different lengths")

    target = np.concatenate([obs[:, 1:], obs[:, -1:]], axis=1)
    target_mask = np.ones(obs.shape[:2], dtype=bool)
    target_mask[:, -1] = False
    return SequenceBatch(
        observations=obs,
        actions=act,
        obs_mask=np.ones(obs.shape[:2], dtype=bool),
        target_next_obs=target,
        target_mask=target_mask,
        episode_ids=np.asarray(episodes.episode_ids),
    )


def make_batches(episodes: Episodes, batch_size: int, rng: np.random.Generator) -> List[SequenceBatch]:
    """Group episodes by length, shuffle inside each group, chunk, then shuffle the batch order."""
    groups: Dict[int, List[int]] = {}
    for eid, o in zip(episodes.episode_ids, episodes.observations):
        groups.setdefault(o.shape[0], []).append(eid)

    batches: List[SequenceBatch] = []
    for length in sorted(groups):
        ids = [groups[length][i] for i in rng.permutation(len(groups[length]))]
        for chunk in csv_io.chunked(ids, batch_size):
            batches.append(to_batch(episodes.subset(list(chunk))))
    return [batches[i] for i in rng.permutation(len(batches))]


def slice_windows(episodes: Episodes, window: int, stride: Optional[int] = None) -> Episodes:
    """Cut every episode into windows of `window` steps; tails shorter than a window are dropped."""
    if window < 2:
        raise DataError(f"window must be >= 2, got {window}")
    stride = stride or window
    observations, actions = [], []
    for o, a in zip(episodes.observations, episodes.actions):
        for start in range(0, o.shape[0] - window + 1, stride):
            observations.append(o[start:start + window])
            actions.append(a[start:start + window])
    if not observations:
        raise DataError(f"No episode is at least {window} steps long")
    return Episodes(observations=observations, actions=actions, episode_ids=list(range(len(observations))))


def split_episodes(ids: Sequence[int], seed: int, train_fraction: float = TRAIN_FRACTION) -> Tuple[List[int], List[int]]:
    ids = list(ids)
    if len(ids) < 2:
        raise DataError(f"Need at least 2 episodes to split, got {len(ids)}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_train = min(max(int(round(len(ids) * train_fraction)), 1), len(ids) - 1)
    return sorted(order[:n_train]), sorted(order[n_train:])


# ---------- masking ----------

def mask_prefix(batch: SequenceBatch, observed_prefix: int, total: Optional[int] = None) -> SequenceBatch:
    length = batch.length
    if total is not None and total != length:
        raise DataError(f"Batch length {length} != requested total {total}")
    if not 0 < observed_prefix < length:
        raise DataError(f"Observed prefix must satisfy 0 < P < T (P={observed_prefix}, T={length})")
    mask = np.zeros((batch.num_episodes, length), dtype=bool)
    mask[:, :observed_prefix] = True
    return batch.with_mask(mask)


def mask_random(batch: SequenceBatch, drop_fraction: float, seed: SeedLike) -> SequenceBatch:
    """Per episode, floor(rho * T) distinct steps in 1..T-1 are hidden; t = 0 stays observed."""
    if not 0.0 <= drop_fraction < 1.0:
        raise DataError(f"drop_fraction must be in [0, 1), got {drop_fraction}")
    rng = _rng(seed)
    length = batch.length
    n_drop = int(np.floor(drop_fraction * length))
    mask = np.ones((batch.num_episodes, length), dtype=bool)
    for i in range(batch.num_episodes):
        if n_drop:
            mask[i, 1 + rng.choice(length - 1, size=n_drop, replace=False)] = False
    return batch.with_mask(mask)


def apply_protocol(batch: SequenceBatch, protocol: str, prefix_len: int, drop_fraction: float,
                   rng: np.random.Generator) -> SequenceBatch:
    if protocol == "prefix":
        return mask_prefix(batch, min(prefix_len, batch.length - 1))
    if protocol == "random":
        return mask_random(batch, drop_fraction, rng)
    return batch


# ---------- CSV ----------

def infer_schema(columns: Sequence[str]) -> TrajectorySchema:
    obs = [c for c in columns if c.startswith("o_")]
    act = [c for c in columns if c.startswith("a_")]
    if not obs or not act:
        raise DataError(f"CSV needs o_1.. and a_1.. columns. Found: {list(columns)}")
    return TrajectorySchema(obs_dim=len(obs), action_dim=len(act))


def load_csv(path: str | Path, schema: Optional[TrajectorySchema] = None) -> Episodes:
    """
    Columns: episode, t, o_1..o_{d_o}, a_1..a_{d_a}. Row order does not matter;
    within an episode t must be contiguous.
    """
    frame, columns = csv_io.read_csv(path)
    schema = schema or infer_schema(columns)
    csv_io.require_columns(columns, schema.columns, path)

    frame = csv_io.to_numeric(frame, ["episode", "t"], integer=True)
    frame = csv_io.to_numeric(frame, schema.obs_columns + schema.action_columns)
    frame = frame.sort_values(["episode", "t"], kind="stable")

    observations, actions, ids = [], [], []
    for eid, group in frame.groupby("episode", sort=True):
        steps = group["t"].to_numpy()
        gaps = np.flatnonzero(np.diff(steps) != 1)
        if gaps.size:
            g = gaps[0]
            raise DataError(
                f"Episode {eid}: t is not contiguous after step {steps[g]} "
                f"(next is {steps[g + 1]}, line {group['line_no'].iloc[g + 1]})"
            )
        if len(group) < 2:
            raise DataError(f"Episode {eid} has fewer than 2 steps")
        observations.append(group[schema.obs_columns].to_numpy(dtype=np.float64))
        actions.append(group[schema.action_columns].to_numpy(dtype=np.float64))
        ids.append(int(eid))

    if not ids:
        raise DataError(f"CSV {path} holds no rows")
    logger.info("Loaded %d episodes from %s (d_o=%d, d_a=%d)", len(ids), path, schema.obs_dim, schema.action_dim)
    return Episodes(observations=observations, actions=actions, episode_ids=ids)


def write_csv(episodes: Episodes, path: str | Path) -> None:
    schema = TrajectorySchema(obs_dim=episodes.obs_dim, action_dim=episodes.action_dim)
    frames = []
    for eid, o, a in zip(episodes.episode_ids, episodes.observations, episodes.actions):
        part = pd.DataFrame(np.hstack([o, a]), columns=schema.obs_columns + schema.action_columns)
        part.insert(0, "t", np.arange(o.shape[0]))
        part.insert(0, "episode", eid)
        frames.append(part)
    csv_io.write_csv(pd.concat(frames, ignore_index=True)[schema.columns], path)


# ---------- manifests ----------

class DatasetManifest(BaseModel):
    system: Optional[Dict[str, Any]] = None
    seed: Optional[int] = None
    episodes: int
    length: Optional[int] = None
    obs_dim: int
    action_dim: int
    train_ids: List[int]
    test_ids: List[int]


class RunManifest(BaseModel):
    mode: str
    config: Dict[str, Any]
    obs_dim: int
    action_dim: int
    lam: float
    norm: Dict[str, List[float]]
    dataset: Union[str, Dict[str, Any], None] = None
    # split the run was trained on (validation episodes included in train_ids)
    train_ids: List[int] = Field(default_factory=list)
    test_ids: List[int] = Field(default_factory=list)


def _dataset_manifest(episodes: Episodes, system: Optional[SyntheticSystem], seed: int) -> DatasetManifest:
    train_ids, test_ids = split_episodes(episodes.episode_ids, seed)
    lengths = {o.shape[0] for o in episodes.observations}
    return DatasetManifest(
        system=None if system is None else asdict(system),
        seed=seed,
        episodes=len(episodes),
        length=lengths.pop() if len(lengths) == 1 else None,
        obs_dim=episodes.obs_dim,
        action_dim=episodes.action_dim,
        train_ids=train_ids,
        test_ids=test_ids,
    )


def write_dataset(out_dir: str | Path, episodes: Episodes, system: Optional[SyntheticSystem], seed: int) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _dataset_manifest(episodes, system, seed)
    write_csv(episodes, out / TRAJECTORY_FILE)
    write_manifest(manifest, out / MANIFEST_FILE)
    logger.info("Wrote %d episodes to %s (%d train / %d test)",
                len(episodes), out, len(manifest.train_ids), len(manifest.test_ids))
    return manifest


def synthesize(source: SyntheticSource) -> Tuple[Episodes, DatasetManifest]:
    """Simulate the dataset a SyntheticSource describes. The split is drawn from its own seed."""
    try:
        system = SyntheticSystem(kind=source.system, **source.params)
    except (TypeError, DataError) as e:
        raise ConfigError(f"Invalid synthetic dataset {source.system!r} with {source.params}: {e}") from e
    episodes = simulate(system, source.episodes, source.length, source.seed)
    return episodes, _dataset_manifest(episodes, system, source.seed)


def load_source(source: DatasetSource, seed: int = 0) -> Tuple[Episodes, DatasetManifest]:
    """A dataset directory, a bare CSV (split drawn from `seed`) or a SyntheticSource."""
    if isinstance(source, SyntheticSource):
        return synthesize(source)
    return load_dataset(source, seed=seed)


def source_label(source: DatasetSource) -> Union[str, Dict[str, Any]]:
    return source.model_dump() if isinstance(source, SyntheticSource) else str(source)


def same_source(label: Union[str, Dict[str, Any], None], source: DatasetSource) -> bool:
    if isinstance(source, SyntheticSource):
        return label == source.model_dump()
    return isinstance(label, str) and Path(label).resolve() == Path(source).resolve()


def load_dataset(source: str | Path, seed: int = 0) -> Tuple[Episodes, DatasetManifest]:
    """
    `source` is a dataset directory (trajectories.csv + manifest.json) or a bare CSV file,
    which gets a 4:1 split drawn from `seed`.
    """
    source = Path(source)
    csv_path = source / TRAJECTORY_FILE if source.is_dir() else source
    episodes = load_csv(csv_path)
    manifest_path = csv_path.parent / MANIFEST_FILE
    if source.is_dir() and manifest_path.exists():
        manifest = read_manifest(manifest_path, DatasetManifest)
        known = set(episodes.episode_ids)
        unknown = [i for i in manifest.train_ids + manifest.test_ids if i not in known]
        if unknown:
            raise DataError(f"Manifest {manifest_path} names episodes missing from the CSV: {unknown[:5]}")
        return episodes, manifest

    train_ids, test_ids = split_episodes(episodes.episode_ids, seed)
    return episodes, DatasetManifest(
        episodes=len(episodes), obs_dim=episodes.obs_dim, action_dim=episodes.action_dim,
        train_ids=train_ids, test_ids=test_ids,
    )


def write_manifest(manifest: BaseModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: str | Path, model: type[BaseModel]):
    try:
        return model.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise DataError(f"Cannot read manifest {path}: {e}") from e
