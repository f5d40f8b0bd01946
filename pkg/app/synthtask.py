"""
Synthetic prompt-redundant control tasks.

This is a stand-in for real VLA benchmarks: K tasks, each phrased with R
nuisance variants. A prompt (task i, nuisance n) is encoded as an M x d prefix
whose first `M // 2` rows carry a task signature and whose remaining rows carry
a nuisance signature, followed by a fixed random orthogonal mixing of the
feature axis. Every (i, n) therefore gets a distinct prefix, while the expert
trajectory depends on the task only: the action-relevant information is the
task signature, and the nuisance rows are exactly the redundancy an action
quotient should discard.

Expert trajectories are minimum-jerk reaches from the origin to a
task-specific target.

Ids are 0-based: tasks 0..K-1, nuisances 0..R-1.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

from app.db import read_artifact, write_artifact
from app.errors import CheckpointCorruptError, ConfigError
from app.objective import NormStats
from app.quotientlab import DiscreteWorld

# Distinct stream tags for every kind of random draw derived from the seed.
_TASK_STREAM, _NUISANCE_STREAM, _MIXING_STREAM, _TARGET_STREAM, _SPLIT_STREAM = range(5)


@dataclass(frozen=True)
class TaskSpec:
    """Size, noise and split of a synthetic task family."""

    n_tasks: int = 8
    n_nuisances: int = 16
    T: int = 8
    D: int = 2
    M: int = 16
    d: int = 64
    sigma_obs: float = 0.05  # default noise on evaluation copies
    train_fraction: float = 0.75
    target_radius: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_tasks < 2 or self.n_nuisances < 2:
            raise ConfigError("need n_tasks >= 2 and n_nuisances >= 2")
        if self.T < 3 or self.D < 1:
            raise ConfigError("need T >= 3 and D >= 1")
        if self.M < 2 or self.d < 1:
            raise ConfigError("need M >= 2 prefix rows and d >= 1")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.sigma_obs < 0:
            raise ConfigError("sigma_obs must be nonnegative")

    @property
    def task_rows(self) -> int:
        return self.M // 2

    @property
    def n_train_nuisances(self) -> int:
        return int(round(self.n_nuisances * self.train_fraction))

    @classmethod
    def from_default(cls) -> "TaskSpec":
        return cls()


@dataclass(frozen=True)
class Episode:
    """One (prompt, expert chunk) pair."""

    task: int
    nuisance: int
    prefix: np.ndarray
    expert: np.ndarray

    @property
    def input_id(self) -> tuple[int, int]:
        return (self.task, self.nuisance)


@dataclass(frozen=True)
class Dataset:
    spec: TaskSpec
    train: tuple[Episode, ...]
    test: tuple[Episode, ...]
    stats: NormStats


def _rng(spec: TaskSpec, stream: int, index: int = 0, seed: Optional[int] = None) -> np.random.Generator:
    return np.random.default_rng([spec.seed if seed is None else seed, stream, index])


def _mixing(spec: TaskSpec, seed: Optional[int]) -> np.ndarray:
    """Fixed random orthogonal d x d matrix (invertible, so injectivity survives)."""
    q, r = np.linalg.qr(_rng(spec, _MIXING_STREAM, seed=seed).standard_normal((spec.d, spec.d)))
    return q * np.sign(np.diag(r))


def _check_ids(task: int, nuisance: int, spec: TaskSpec) -> None:
    if not (0 <= task < spec.n_tasks):
        raise ConfigError(f"task id {task} outside [0, {spec.n_tasks})")
    if not (0 <= nuisance < spec.n_nuisances):
        raise ConfigError(f"nuisance id {nuisance} outside [0, {spec.n_nuisances})")


def encode_prompt(task: int, nuisance: int, spec: TaskSpec, seed: Optional[int] = None) -> np.ndarray:
    """Clean M x d prefix latent of prompt (task, nuisance)."""
    _check_ids(task, nuisance, spec)
    rows_task = spec.task_rows
    task_sig = _rng(spec, _TASK_STREAM, task, seed).standard_normal((rows_task, spec.d))
    nuisance_sig = _rng(spec, _NUISANCE_STREAM, nuisance, seed).standard_normal((spec.M - rows_task, spec.d))
    return np.concatenate([task_sig, nuisance_sig], axis=0) @ _mixing(spec, seed)


def noisy_copy(prefix: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Evaluation copy with additive N(0, sigma^2) observation noise."""
    if sigma < 0:
        raise ConfigError("noise sigma must be nonnegative")
    if sigma == 0:
        return prefix.copy()
    return prefix + sigma * rng.standard_normal(prefix.shape)


def task_target(task: int, spec: TaskSpec) -> np.ndarray:
    """Target point: on a circle in the first two dims, seeded offsets beyond."""
    angle = 2.0 * math.pi * task / spec.n_tasks
    target = np.empty(spec.D)
    target[0] = spec.target_radius * math.cos(angle)
    if spec.D > 1:
        target[1] = spec.target_radius * math.sin(angle)
    if spec.D > 2:
        target[2:] = 0.5 * spec.target_radius * _rng(spec, _TARGET_STREAM, task).uniform(-1.0, 1.0, spec.D - 2)
    return target


def min_jerk_profile(T: int) -> np.ndarray:
    """10 s^3 - 15 s^4 + 6 s^5 on s = t / (T - 1), t = 0..T-1."""
    s = np.arange(T, dtype=np.float64) / (T - 1)
    return 10.0 * s**3 - 15.0 * s**4 + 6.0 * s**5


def expert_trajectory(task: int, spec: TaskSpec) -> np.ndarray:
    """T x D minimum-jerk reach from the origin to `task_target(task)`."""
    if not (0 <= task < spec.n_tasks):
        raise ConfigError(f"task id {task} outside [0, {spec.n_tasks})")
    return min_jerk_profile(spec.T)[:, None] * task_target(task, spec)[None, :]


def split_nuisances(spec: TaskSpec, task: int) -> tuple[list[int], list[int]]:
    """(train, held-out) nuisance ids for one task."""
    n_train = spec.n_train_nuisances
    if n_train < 1 or n_train >= spec.n_nuisances:
        raise ConfigError(
            f"train_fraction={spec.train_fraction} leaves an empty split for {spec.n_nuisances} nuisances"
        )
    order = _rng(spec, _SPLIT_STREAM, task).permutation(spec.n_nuisances)
    return sorted(int(n) for n in order[:n_train]), sorted(int(n) for n in order[n_train:])


def _episode(task: int, nuisance: int, spec: TaskSpec) -> Episode:
    return Episode(task, nuisance, encode_prompt(task, nuisance, spec), expert_trajectory(task, spec))


def generate_dataset(spec: TaskSpec) -> Dataset:
    """Train on some nuisance variants per task, test on the held-out ones."""
    train: list[Episode] = []
    test: list[Episode] = []
    for task in range(spec.n_tasks):
        train_ids, test_ids = split_nuisances(spec, task)
        train.extend(_episode(task, n, spec) for n in train_ids)
        test.extend(_episode(task, n, spec) for n in test_ids)
    stats = NormStats.from_actions(np.stack([ep.expert for ep in train]))
    return Dataset(spec=spec, train=tuple(train), test=tuple(test), stats=stats)


def stack_episodes(episodes: Sequence[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """(N, M, d) prefixes and (N, T, D) expert chunks."""
    if not episodes:
        raise ConfigError("no episodes to stack")
    return np.stack([ep.prefix for ep in episodes]), np.stack([ep.expert for ep in episodes])


Discretizer = Callable[[Episode], Hashable]


def identity_discretizer(episode: Episode) -> Hashable:
    """One latent per prompt."""
    return episode.input_id


def task_signature_discretizer(spec: TaskSpec) -> Discretizer:
    """Latent = hash of the task-signature rows, the ideal quotient key."""

    def discretize(episode: Episode) -> Hashable:
        rows = np.ascontiguousarray(episode.prefix[: spec.task_rows], dtype=np.float64)
        return hashlib.sha256(rows.tobytes()).hexdigest()

    return discretize


def world_from_dataset(episodes: Sequence[Episode], discretizer: Discretizer) -> DiscreteWorld:
    """Uniform empirical world over the episodes.

    Inputs are (task, nuisance) ids; trajectory ids index the distinct expert
    chunks (bit-exact comparison), which coincide with task ids.
    """
    if not episodes:
        raise ConfigError("world_from_dataset needs at least one episode")
    traj_ids: dict[bytes, int] = {}
    for ep in episodes:
        traj_ids.setdefault(np.ascontiguousarray(ep.expert).tobytes(), len(traj_ids))
    inputs = tuple(ep.input_id for ep in episodes)
    joint = np.zeros((len(episodes), len(traj_ids)))
    for row, ep in enumerate(episodes):
        joint[row, traj_ids[np.ascontiguousarray(ep.expert).tobytes()]] = 1.0 / len(episodes)
    return DiscreteWorld(
        inputs=inputs,
        latent_of={ep.input_id: discretizer(ep) for ep in episodes},
        trajectories=tuple(range(len(traj_ids))),
        joint=joint,
    )


DATASET_KIND = "dataset"


def save_dataset(dataset: Dataset, path: Path) -> None:
    """Write spec, episodes and NormStats to one artifact file."""
    arrays: dict[str, np.ndarray] = {"stats.lower": dataset.stats.lower, "stats.upper": dataset.stats.upper}
    index: dict[str, list[list[int]]] = {}
    for split, episodes in (("train", dataset.train), ("test", dataset.test)):
        prefixes, experts = stack_episodes(episodes)
        arrays[f"{split}.prefix"] = prefixes
        arrays[f"{split}.expert"] = experts
        index[split] = [[ep.task, ep.nuisance] for ep in episodes]
    write_artifact(path, DATASET_KIND, {"spec": asdict(dataset.spec), "index": index}, arrays)


def load_dataset(path: Path) -> Dataset:
    """Read a dataset written by `save_dataset`; arrays come back bit-exact."""
    meta, arrays = read_artifact(path, DATASET_KIND)
    try:
        spec = TaskSpec(**meta["spec"])
        splits = {}
        for split in ("train", "test"):
            prefixes, experts = arrays[f"{split}.prefix"], arrays[f"{split}.expert"]
            splits[split] = tuple(
                Episode(int(task), int(nuisance), prefixes[row], experts[row])
                for row, (task, nuisance) in enumerate(meta["index"][split])
            )
        stats = NormStats(lower=arrays["stats.lower"], upper=arrays["stats.upper"])
    except (KeyError, TypeError, IndexError) as exc:
        raise CheckpointCorruptError(f"dataset file {path} is incomplete: {exc}") from exc
    return Dataset(spec=spec, train=splits["train"], test=splits["test"], stats=stats)
