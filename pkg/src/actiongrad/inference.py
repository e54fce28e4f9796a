"""Evaluation-time action refinement by gradient ascent on a frozen critic.

The policy proposes ``a0``; ``n`` ascent steps on ``Q(s, .)`` produce
``a1 .. an``; the candidate with the highest Q is executed (earliest wins
ties). Also holds the adaptive context rule and the episode/evaluation
runners.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from actiongrad.autodiff.nn import q_and_grad
from actiongrad.autodiff.rng import RngStream
from actiongrad.critic import QNet, q_value
from actiongrad.data import context_from_history, update_rtg_eval
from actiongrad.envs import make_env, normalized_score
from actiongrad.errors import ConfigurationError
from actiongrad.policy.model import DTModel, act, predict_rtg

AG_METHODS = ("plain", "momentum", "rmsprop", "adam")
RTG_MODES = ("preset", "predicted_per_step", "predicted_initial")


@dataclass
class AGConfig:
    eta: float = 0.05
    n: int = 10
    method: str = "plain"
    zeta: float = 0.9
    zeta1: float = 0.9
    zeta2: float = 0.999
    epsilon: float = 1e-8
    clip_actions: bool = True
    # Off: the update exactly as printed (constant denominators, raw m and v).
    standard_adam: bool = False

    def __post_init__(self):
        if self.n < 0:
            raise ConfigurationError("n must be >= 0")
        if self.n > 0 and not self.eta > 0:
            raise ConfigurationError("eta must be > 0")
        if self.method not in AG_METHODS:
            raise ConfigurationError(f"method must be one of {AG_METHODS}")
        for name in ("zeta", "zeta1", "zeta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be > 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RefineTrace:
    actions: list[np.ndarray]
    q_values: list[float]
    selected: int

    @property
    def action(self) -> np.ndarray:
        return self.actions[self.selected]

    @property
    def q_gain(self) -> float:
        return self.q_values[self.selected] - self.q_values[0]


# ------------------------------------------------------------- update rules


def ag_step_plain(a, g, eta: float):
    return a + eta * g


def ag_step_momentum(a, v, g, zeta: float, eta: float):
    """``v <- v + zeta * g``; ``a <- a + eta * v``. Returns (a, v)."""
    v = v + zeta * g
    return a + eta * v, v


def ag_step_rmsprop(a, r, g, zeta: float, eta: float, epsilon: float):
    """``r <- zeta * r + (1 - zeta) * g**2``; ``a <- a + eta * g / (sqrt(r) + eps)``. Returns (a, r)."""
    r = zeta * r + (1.0 - zeta) * g * g
    return a + eta * g / (np.sqrt(r) + epsilon), r


def ag_step_adam(a, m, v, g, zeta1: float, zeta2: float, eta: float, epsilon: float,
                 step: int = 1, standard: bool = False):
    """Adam-style step. Returns (a, m, v).

    By default the action moves by ``eta * m / (sqrt(v) + eps)`` with the raw
    moments. ``standard=True`` uses the usual bias-corrected moments with
    ``step`` counted from 1.
    """
    m = zeta1 * m + (1.0 - zeta1) * g
    v = zeta2 * v + (1.0 - zeta2) * g * g
    if standard:
        m_hat = m / (1.0 - zeta1**step)
        v_hat = v / (1.0 - zeta2**step)
        return a + eta * m_hat / (np.sqrt(v_hat) + epsilon), m, v
    return a + eta * m / (np.sqrt(v) + epsilon), m, v


def ag_iterates(grad_fn, a0, config: AGConfig, bounds=(-1.0, 1.0)) -> list[np.ndarray]:
    """``[a0, a1, ..., an]`` under ``config``; ``grad_fn(a)`` returns dQ/da.

    Moment buffers start at zero for every call.
    """
    a = np.array(a0, dtype=np.float64, copy=True)
    out = [a.copy()]
    m = np.zeros_like(a)  # velocity / first moment
    r = np.zeros_like(a)  # second moment
    for i in range(config.n):
        g = grad_fn(a)
        if config.method == "plain":
            a = ag_step_plain(a, g, config.eta)
        elif config.method == "momentum":
            a, m = ag_step_momentum(a, m, g, config.zeta, config.eta)
        elif config.method == "rmsprop":
            a, r = ag_step_rmsprop(a, r, g, config.zeta, config.eta, config.epsilon)
        else:
            a, m, r = ag_step_adam(a, m, r, g, config.zeta1, config.zeta2, config.eta, config.epsilon,
                                   step=i + 1, standard=config.standard_adam)
        if config.clip_actions:
            a = np.clip(a, bounds[0], bounds[1])
        out.append(a.copy())
    return out


def ag_refine(qnet: QNet, state, a0, config: AGConfig, bounds=(-1.0, 1.0)) -> RefineTrace:
    """Refine ``a0`` by ``config.n`` ascent steps on the frozen critic and pick the best iterate."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (qnet.obs_dim,):
        raise ConfigurationError(f"state shape {state.shape} does not match critic obs_dim {qnet.obs_dim}")
    a0 = np.asarray(a0, dtype=np.float64).reshape(qnet.act_dim)

    def grad(a):
        return q_and_grad(qnet.params, state, a)[1]

    actions = ag_iterates(grad, a0, config, bounds)
    q = [q_value(qnet, state, a) for a in actions]
    return RefineTrace(actions, q, int(np.argmax(q)))


# --------------------------------------------------------- adaptive context


def adaptive_context(rtg_history, k_max: int) -> int:
    """Window length ending at the newest step.

    Extends backwards while the earlier RTG is strictly greater than the one
    after it, up to ``k_max`` steps.
    """
    if k_max < 1:
        raise ConfigurationError("k_max must be >= 1")
    h = list(rtg_history)
    t = len(h) - 1
    length = 1
    while length < k_max and t - length >= 0 and h[t - length] > h[t - length + 1]:
        length += 1
    return length


# ------------------------------------------------------------------ runners


@dataclass
class EvalConfig:
    episodes: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    max_steps: int | None = None  # None: the env's own limit
    k_max: int | None = None  # None: the model's context length
    rtg_mode: str = "predicted_per_step"
    rtg_value: float | None = None  # preset RTG0
    adaptive_context: bool = False
    start: str | None = None  # forced start state, if the env supports it

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.rtg_mode not in RTG_MODES:
            raise ConfigurationError(f"rtg_mode must be one of {RTG_MODES}")
        if self.rtg_mode == "preset" and self.rtg_value is None:
            raise ConfigurationError("rtg_mode 'preset' needs rtg_value")

    def to_json(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class StepLog:
    state: list[float]
    raw_action: list[float]
    action: list[float]
    reward: float
    rtg: float
    q_gain: float


@dataclass
class EpisodeLog:
    steps: list[StepLog] = field(default_factory=list)
    total_return: float = 0.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(s), sort_keys=True) + "\n" for s in self.steps)


def run_episode(env, model: DTModel, qnet: QNet | None, eval_config: EvalConfig,
                ag_config: AGConfig | None = None, rng: RngStream | None = None) -> EpisodeLog:
    ag_config = ag_config or AGConfig(n=0)
    spec = env.spec
    if (spec.obs_dim, spec.act_dim) != (model.obs_dim, model.act_dim):
        raise ConfigurationError(
            f"env {spec.name} (obs {spec.obs_dim}, act {spec.act_dim}) does not match the policy "
            f"(obs {model.obs_dim}, act {model.act_dim})")
    if ag_config.n > 0:
        if qnet is None:
            raise ConfigurationError("action refinement (n > 0) needs a critic")
        if (qnet.obs_dim, qnet.act_dim) != (spec.obs_dim, spec.act_dim):
            raise ConfigurationError("critic dimensions do not match the env")
    horizon = eval_config.max_steps or spec.max_steps
    k_max = eval_config.k_max or model.config.k
    bounds = (spec.action_low, spec.action_high)

    state = env.reset(rng, eval_config.start)
    states, rtgs, actions = [], [], []
    log = EpisodeLog()
    reward = 0.0
    for t in range(horizon):
        states.append(state)
        mode = eval_config.rtg_mode
        if mode == "predicted_per_step" or (mode == "predicted_initial" and t == 0):
            rtg = predict_rtg(model, context_from_history([state], [0.0], [], [t], 1, spec.act_dim))
        elif t == 0:
            rtg = float(eval_config.rtg_value)
        else:
            rtg = update_rtg_eval(rtgs[-1], reward)
        rtgs.append(rtg)

        if eval_config.adaptive_context:
            k = adaptive_context(rtgs, k_max)
        else:
            k = min(k_max, len(states))
        ctx = context_from_history(states[-k:], rtgs[-k:], actions[len(actions) - k + 1:],
                                   list(range(t - k + 1, t + 1)), k, spec.act_dim)
        a0 = spec.clip(act(model, ctx))
        if ag_config.n > 0:
            trace = ag_refine(qnet, state, a0, ag_config, bounds)
            action, gain = trace.action, trace.q_gain
        else:
            action, gain = a0, 0.0

        res = env.step(action)
        reward = res.reward
        actions.append(action)
        log.steps.append(StepLog(state.tolist(), a0.tolist(), action.tolist(), reward, rtg, gain))
        log.total_return += reward
        state = res.next_state
        if res.done:
            break
    return log


@dataclass
class EpisodeResult:
    seed: int
    episode: int
    raw_return: float
    normalized: float
    # Wall-clock cost of the episode; excluded from equality so results stay comparable.
    wall_ms: float = field(default=0.0, compare=False)


@dataclass
class EvalResult:
    env: str
    episodes: list[EpisodeResult]
    logs: list[EpisodeLog]

    def per_seed_means(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for e in self.episodes:
            out.setdefault(e.seed, []).append(e.normalized)
        return {s: float(np.mean(v)) for s, v in out.items()}

    @property
    def mean_return(self) -> float:
        return float(np.mean([e.raw_return for e in self.episodes]))

    @property
    def mean_score(self) -> float:
        return float(np.mean([e.normalized for e in self.episodes]))

    @property
    def std_score(self) -> float:
        """Standard deviation of the per-seed mean scores."""
        return float(np.std(list(self.per_seed_means().values())))


def evaluate(env_name: str, model: DTModel, qnet: QNet | None, eval_config: EvalConfig,
             ag_config: AGConfig | None = None) -> EvalResult:
    """Run ``len(seeds) x episodes`` episodes; deterministic given the seeds."""
    episodes, logs = [], []
    for seed in eval_config.seeds:
        root = RngStream(seed, "eval")
        for i in range(eval_config.episodes):
            env = make_env(env_name)
            start = time.perf_counter()
            ep = run_episode(env, model, qnet, eval_config, ag_config, root.child(f"episode-{i}"))
            wall_ms = (time.perf_counter() - start) * 1e3
            score = normalized_score(env_name, ep.total_return)
            if not math.isfinite(score):
                raise ConfigurationError(f"non-finite score {score}")
            episodes.append(EpisodeResult(seed, i, ep.total_return, score, wall_ms))
            logs.append(ep)
    return EvalResult(env_name, episodes, logs)
