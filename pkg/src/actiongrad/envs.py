"""Two diagnostic environments and their offline dataset generators.

``bandit-v0``: one constant state, 1-D action in [-1, 1], reward ``1 - a**2``,
every episode lasts one step.

``stitch-v0``: five one-hot states. s1 and s2 both lead to s3 (reward 0,
action ignored). At s3 a non-negative action moves to s4 with reward 100, a
negative one to s5 with reward 0; s4 and s5 are terminal. The generated
dataset only contains s1->s3->s4 and s2->s3->s5, so reaching s4 from s2
requires stitching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from actiongrad.autodiff.rng import RngStream
from actiongrad.data import Dataset, Trajectory
from actiongrad.errors import ConfigurationError, UsageError


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    action_low: float
    action_high: float
    max_steps: int

    def __post_init__(self):
        if not self.action_low < self.action_high:
            raise ConfigurationError("action_low must be < action_high")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")

    def clip(self, action) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool


# ------------------------------------------------------------------- bandit


def bandit_reward(action: float) -> float:
    return 1.0 - float(action) ** 2


class BanditEnv:
    spec = EnvSpec("bandit-v0", obs_dim=1, act_dim=1, action_low=-1.0, action_high=1.0, max_steps=1)
    STATE = np.zeros(1)

    def __init__(self):
        self._done = True

    def reset(self, rng: RngStream | None = None, start=None) -> np.ndarray:
        self._done = False
        return self.STATE.copy()

    def step(self, action) -> StepResult:
        if self._done:
            raise UsageError("bandit episode finished; call reset() first")
        a = float(self.spec.clip(np.reshape(action, -1))[0])
        self._done = True
        return StepResult(self.STATE.copy(), bandit_reward(a), True)


def bandit_dataset(count: int, rng: RngStream, sides: str = "both") -> Dataset:
    """One-step episodes with actions restricted to ``|a| > 0.5``.

    ``sides="both"`` draws uniformly from [-1, -0.5) U (0.5, 1];
    ``sides="positive"`` draws uniformly from (0.5, 1] only.
    """
    if sides not in ("both", "positive"):
        raise ConfigurationError(f"sides must be 'both' or 'positive', got {sides!r}")
    if count == 0:
        return Dataset([], {"generator": "bandit-v0", "seed": rng.seed, "count": 0, "sides": sides})
    offset = rng.uniform(0.0, 0.5, size=count)  # [0, 0.5)
    positive = np.ones(count, dtype=bool) if sides == "positive" else rng.random(size=count) < 0.5
    actions = np.where(positive, 1.0 - offset, -1.0 + offset)
    trajs = [
        Trajectory(BanditEnv.STATE[None, :], [[a]], [bandit_reward(a)], [True])
        for a in actions
    ]
    return Dataset(trajs, {"generator": "bandit-v0", "seed": rng.seed, "count": count, "sides": sides})


# ------------------------------------------------------------------- stitch

S1, S2, S3, S4, S5 = range(5)
STATE_NAMES = ("s1", "s2", "s3", "s4", "s5")
GOAL_REWARD = 100.0


def one_hot(index: int) -> np.ndarray:
    v = np.zeros(5)
    v[index] = 1.0
    return v


def state_index(state) -> int:
    state = np.asarray(state, dtype=np.float64).reshape(-1)
    if state.shape != (5,) or state.sum() != 1.0 or not np.isin(state, (0.0, 1.0)).all():
        raise ConfigurationError(f"not a one-hot stitch state: {state}")
    return int(np.argmax(state))


def stitch_transition(index: int, action: float) -> tuple[int, float, bool]:
    if index in (S4, S5):
        raise UsageError(f"{STATE_NAMES[index]} is terminal")
    if index in (S1, S2):
        return S3, 0.0, False
    if action >= 0.0:
        return S4, GOAL_REWARD, True
    return S5, 0.0, True


class StitchEnv:
    spec = EnvSpec("stitch-v0", obs_dim=5, act_dim=1, action_low=-1.0, action_high=1.0, max_steps=2)

    def __init__(self):
        self._index: int | None = None

    def reset(self, rng: RngStream | None = None, start=None) -> np.ndarray:
        """Start at s1 or s2; ``start`` ('s1'/'s2' or index) overrides the coin flip."""
        if start is None:
            if rng is None:
                raise ConfigurationError("stitch reset needs an rng or an explicit start state")
            start = S1 if rng.random() < 0.5 else S2
        if isinstance(start, str):
            start = STATE_NAMES.index(start)
        if start not in (S1, S2, S3):
            raise ConfigurationError(f"invalid start state {start}")
        self._index = int(start)
        return one_hot(self._index)

    def step(self, action) -> StepResult:
        if self._index is None or self._index in (S4, S5):
            raise UsageError("stitch episode finished; call reset() first")
        a = float(self.spec.clip(np.reshape(action, -1))[0])
        self._index, reward, done = stitch_transition(self._index, a)
        return StepResult(one_hot(self._index), reward, done)


def stitch_step(state, action: float) -> StepResult:
    """Stateless transition from a one-hot ``state``."""
    nxt, reward, done = stitch_transition(state_index(state), float(np.clip(action, -1.0, 1.0)))
    return StepResult(one_hot(nxt), reward, done)


def stitch_dataset(count: int, rng: RngStream) -> Dataset:
    """Alternating s1->s3->s4 (return 100) and s2->s3->s5 (return 0) episodes."""
    if count % 2:
        raise ConfigurationError("stitch dataset count must be even")
    trajs = []
    for i in range(count):
        start = S1 if i % 2 == 0 else S2
        first = rng.uniform(-1.0, 1.0)
        u = rng.uniform(0.0, 1.0)  # [0, 1)
        branch = 1.0 - u if start == S1 else -1.0 + u  # (0, 1] or [-1, 0)
        trajs.append(Trajectory(
            np.stack([one_hot(start), one_hot(S3)]),
            [[first], [branch]],
            [0.0, GOAL_REWARD if start == S1 else 0.0],
            [False, True],
        ))
    return Dataset(trajs, {"generator": "stitch-v0", "seed": rng.seed, "count": count})


# ----------------------------------------------------------------- registry

ENVS = {"bandit-v0": BanditEnv, "stitch-v0": StitchEnv}

# (random_ref, expert_ref). Random = expected return of a uniform random policy.
REFERENCE_SCORES = {
    "bandit-v0": (2.0 / 3.0, 1.0),
    "stitch-v0": (50.0, 100.0),
}


def make_env(name: str):
    try:
        return ENVS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown environment {name!r}; known: {sorted(ENVS)}") from None


def normalized_score(env_name: str, raw_return: float) -> float:
    try:
        random_ref, expert_ref = REFERENCE_SCORES[env_name]
    except KeyError:
        raise ConfigurationError(f"no reference scores for {env_name!r}") from None
    return 100.0 * (raw_return - random_ref) / (expert_ref - random_ref)


def generate_dataset(env_name: str, count: int, rng: RngStream, **kwargs) -> Dataset:
    if env_name == "bandit-v0":
        return bandit_dataset(count, rng, **kwargs)
    if env_name == "stitch-v0":
        return stitch_dataset(count, rng)
    raise ConfigurationError(f"unknown environment {env_name!r}")
