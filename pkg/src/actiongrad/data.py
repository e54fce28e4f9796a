"""Trajectories, return-to-go, context windows and the episode file format."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from actiongrad.autodiff.rng import RngStream
from actiongrad.errors import ConfigurationError, ParseError

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
EPISODE_KEYS = ("observations", "actions", "rewards", "terminals")


def compute_rtg(rewards: Sequence[float]) -> np.ndarray:
    """Undiscounted suffix sums: ``rtg[t] = sum(rewards[t:])``."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = acc + r[t]
        out[t] = acc
    return out


def update_rtg_eval(prev_rtg: float, prev_reward: float) -> float:
    return prev_rtg - prev_reward


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim == 1:
            self.actions = self.actions[:, None]
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(-1)
        n = len(self.rewards)
        if n < 1:
            raise ConfigurationError("a trajectory needs at least one step")
        if not (len(self.states) == len(self.actions) == len(self.terminals) == n):
            raise ConfigurationError(
                f"ragged trajectory: {len(self.states)} states, {len(self.actions)} actions, "
                f"{n} rewards, {len(self.terminals)} terminals")
        if self.terminals[:-1].any():
            raise ConfigurationError("only the final step may be terminal")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def rtg(self) -> np.ndarray:
        return compute_rtg(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.rtg[0])

    def to_json(self) -> dict:
        return {
            "observations": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "terminals": [bool(t) for t in self.terminals],
        }


@dataclass
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trajectories:
            obs = {t.states.shape[1] for t in self.trajectories}
            act = {t.actions.shape[1] for t in self.trajectories}
            if len(obs) > 1 or len(act) > 1:
                raise ConfigurationError(f"inhomogeneous dims: obs {sorted(obs)}, act {sorted(act)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    def require_nonempty(self) -> None:
        if not self.trajectories:
            raise ConfigurationError("dataset is empty")

    @property
    def obs_dim(self) -> int:
        self.require_nonempty()
        return self.trajectories[0].states.shape[1]

    @property
    def act_dim(self) -> int:
        self.require_nonempty()
        return self.trajectories[0].actions.shape[1]

    @property
    def num_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def max_length(self) -> int:
        return max((len(t) for t in self.trajectories), default=0)

    def returns(self) -> np.ndarray:
        return np.array([t.episode_return for t in self.trajectories])

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])

    def all_rtgs(self) -> np.ndarray:
        return np.concatenate([t.rtg for t in self.trajectories])


# ---------------------------------------------------------------- normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def fit_norm_stats(dataset: Dataset) -> NormStats:
    states = dataset.all_states()
    return NormStats(states.mean(axis=0), states.std(axis=0))


def apply_norm(stats: NormStats, state) -> np.ndarray:
    return (np.asarray(state, dtype=np.float64) - stats.mean) / stats.std


def unapply_norm(stats: NormStats, state) -> np.ndarray:
    return np.asarray(state, dtype=np.float64) * stats.std + stats.mean


# --------------------------------------------------------------------- batches


@dataclass
class ContextBatch:
    """Left-padded windows; ``mask`` is False on padding slots, which are zero."""

    states: np.ndarray  # (B, k, obs)
    rtgs: np.ndarray  # (B, k)
    actions: np.ndarray  # (B, k, act)
    timesteps: np.ndarray  # (B, k) int
    mask: np.ndarray  # (B, k) bool

    @property
    def batch_size(self) -> int:
        return self.states.shape[0]

    @property
    def k(self) -> int:
        return self.states.shape[1]

    def trimmed(self) -> "ContextBatch":
        """Drop leading columns that are padding in every row."""
        valid_cols = np.flatnonzero(self.mask.any(axis=0))
        start = int(valid_cols[0]) if valid_cols.size else self.k - 1
        if start == 0:
            return self
        return ContextBatch(self.states[:, start:], self.rtgs[:, start:], self.actions[:, start:],
                            self.timesteps[:, start:], self.mask[:, start:])


def _window(traj: Trajectory, rtg: np.ndarray, end: int, k: int, out: ContextBatch, row: int) -> None:
    start = max(0, end - k + 1)
    n = end - start + 1
    out.states[row, k - n:] = traj.states[start:end + 1]
    out.rtgs[row, k - n:] = rtg[start:end + 1]
    out.actions[row, k - n:] = traj.actions[start:end + 1]
    out.timesteps[row, k - n:] = np.arange(start, end + 1)
    out.mask[row, k - n:] = True


def empty_batch(batch: int, k: int, obs_dim: int, act_dim: int) -> ContextBatch:
    return ContextBatch(
        np.zeros((batch, k, obs_dim)),
        np.zeros((batch, k)),
        np.zeros((batch, k, act_dim)),
        np.zeros((batch, k), dtype=np.int64),
        np.zeros((batch, k), dtype=bool),
    )


class ContextSampler:
    """Uniform sampler over all (trajectory, end-index) pairs of a dataset."""

    def __init__(self, dataset: Dataset):
        dataset.require_nonempty()
        self.dataset = dataset
        self.rtgs = [t.rtg for t in dataset]
        self.traj_index = np.concatenate([np.full(len(t), i) for i, t in enumerate(dataset)])
        self.step_index = np.concatenate([np.arange(len(t)) for t in dataset])

    def sample_pairs(self, batch: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
        flat = rng.integers(0, len(self.traj_index), size=batch)
        return self.traj_index[flat], self.step_index[flat]

    def batch_at(self, traj_ids, ends, k: int) -> ContextBatch:
        if k < 1:
            raise ConfigurationError("context length k must be >= 1")
        out = empty_batch(len(traj_ids), k, self.dataset.obs_dim, self.dataset.act_dim)
        for row, (i, end) in enumerate(zip(traj_ids, ends)):
            _window(self.dataset[int(i)], self.rtgs[int(i)], int(end), k, out, row)
        return out

    def sample(self, k: int, batch: int, rng: RngStream) -> ContextBatch:
        return self.batch_at(*self.sample_pairs(batch, rng), k)


def sample_context_batch(dataset: Dataset, k: int, batch: int, rng: RngStream) -> ContextBatch:
    return ContextSampler(dataset).sample(k, batch, rng)


def context_from_history(states, rtgs, actions, timesteps, k: int, act_dim: int) -> ContextBatch:
    """Single-row batch from the last ``k`` steps of an in-progress episode.

    ``actions`` may be one shorter than ``states``; the missing current action
    is zero-filled (it sits after the prediction point, so causality hides it).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    t = len(states)
    n = min(k, t)
    acts = np.zeros((t, act_dim))
    if len(actions):
        given = np.asarray(actions, dtype=np.float64).reshape(-1, act_dim)
        acts[: len(given)] = given
    out = empty_batch(1, k, states.shape[1], act_dim)
    out.states[0, k - n:] = states[t - n:]
    out.rtgs[0, k - n:] = np.asarray(rtgs, dtype=np.float64)[t - n:]
    out.actions[0, k - n:] = acts[t - n:]
    out.timesteps[0, k - n:] = np.asarray(timesteps)[t - n:]
    out.mask[0, k - n:] = True
    return out


# ------------------------------------------------------------------------ files


def _dump_episode(traj: Trajectory) -> str:
    return json.dumps(traj.to_json(), separators=(",", ":"))


def save_dataset(path, dataset: Dataset) -> None:
    """JSON-lines, one episode object per line (shortest round-trip float repr)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for traj in dataset:
            fh.write(_dump_episode(traj))
            fh.write("\n")


def _parse_episode(obj, lineno: int) -> Trajectory:
    if not isinstance(obj, dict):
        raise ParseError("episode must be a JSON object", lineno)
    missing = [k for k in EPISODE_KEYS if k not in obj]
    if missing:
        raise ParseError(f"missing keys {missing}", lineno)
    try:
        obs = np.asarray(obj["observations"], dtype=np.float64)
        act = np.asarray(obj["actions"], dtype=np.float64)
        rew = np.asarray(obj["rewards"], dtype=np.float64)
        term = np.asarray(obj["terminals"])
    except (ValueError, TypeError) as exc:
        raise ParseError(f"ragged or non-numeric arrays ({exc})", lineno) from None
    if obs.ndim == 1:
        obs = obs[:, None]
    if act.ndim == 1:
        act = act[:, None]
    if obs.ndim != 2 or act.ndim != 2 or rew.ndim != 1 or term.ndim != 1:
        raise ParseError("arrays have the wrong rank", lineno)
    if term.dtype.kind not in "biuf":
        raise ParseError("terminals must be booleans or 0/1", lineno)
    try:
        return Trajectory(obs, act, rew, term.astype(bool))
    except ConfigurationError as exc:
        raise ParseError(str(exc), lineno) from None


def load_dataset(path) -> Dataset:
    trajectories = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", lineno) from None
            trajectories.append(_parse_episode(obj, lineno))
    try:
        return Dataset(trajectories, {"source": str(Path(path))})
    except ConfigurationError as exc:
        raise ParseError(str(exc)) from None
