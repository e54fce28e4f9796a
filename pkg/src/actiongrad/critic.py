"""Offline critics: expectile-regression (IQL-style) Q/V, reward regression, SARSA Bellman.

Everything here consumes a :class:`~actiongrad.data.Dataset` only. The module
deliberately imports nothing from the policy or environment code.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from actiongrad.autodiff import checkpoint
from actiongrad.autodiff import tensor as T
from actiongrad.autodiff.nn import MlpParams, critic_input, init_mlp, mlp_forward, quadratic_critic
from actiongrad.autodiff.optim import Adam
from actiongrad.autodiff.rng import RngStream
from actiongrad.autodiff.tensor import Tape, Tensor, backward
from actiongrad.data import Dataset
from actiongrad.errors import ConfigurationError

log = logging.getLogger(__name__)


@dataclass
class CriticConfig:
    gamma: float = 0.99
    tau: float = 0.7
    lr: float = 3e-4
    steps: int = 3000
    batch: int = 256
    hidden: tuple[int, ...] = (64, 64)
    polyak_rate: float = 0.005
    use_target: bool = True
    seed: int = 0
    # Fixed multiplier on the network output; None picks max(1, max |return|).
    output_scale: float | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must be in (0, 1), got {self.tau}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.steps < 1 or self.batch < 1:
            raise ConfigurationError("steps and batch must be >= 1")
        if not 0.0 < self.polyak_rate <= 1.0:
            raise ConfigurationError("polyak_rate must be in (0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class QNet:
    params: MlpParams
    obs_dim: int
    act_dim: int

    def __post_init__(self):
        if self.params.in_dim != self.obs_dim + self.act_dim or self.params.out_dim != 1:
            raise ConfigurationError(
                f"Q network maps {self.params.in_dim}->{self.params.out_dim}, "
                f"expected {self.obs_dim + self.act_dim}->1")


@dataclass
class VNet:
    params: MlpParams
    obs_dim: int


@dataclass
class TrainLog:
    q_loss: list[float] = field(default_factory=list)
    v_loss: list[float] = field(default_factory=list)


def expectile_loss(u, tau: float):
    """``|tau - 1(u < 0)| * u**2``, elementwise on floats or arrays."""
    u = np.asarray(u, dtype=np.float64)
    out = np.abs(tau - (u < 0.0)) * u * u
    return float(out) if out.ndim == 0 else out


def expectile_loss_tensor(u: Tensor, tau: float) -> Tensor:
    # The weight is piecewise constant in u, so it carries no gradient.
    return np.abs(tau - (u.data < 0.0)) * T.square(u)


def analytic_critic(obs_dim: int, act_dim: int = 1) -> QNet:
    """Frozen ``Q(s, a) = 1 - |a|^2``; the bandit reward written as a critic."""
    return QNet(quadratic_critic(obs_dim, act_dim), obs_dim, act_dim)


def q_value(qnet: QNet, state, action):
    """Critic value for one (state, action) pair, or a batch of them."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    q = mlp_forward(qnet.params, critic_input(state, action)).data
    return float(q[0]) if q.ndim == 1 else q[:, 0]


def v_value(vnet: VNet, state):
    v = mlp_forward(vnet.params, np.asarray(state, dtype=np.float64)).data
    return float(v[0]) if v.ndim == 1 else v[:, 0]


# ---------------------------------------------------------------- transitions


@dataclass
class Transitions:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def take(self, idx) -> "Transitions":
        return Transitions(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def transitions(dataset: Dataset) -> Transitions:
    """Flatten episodes into (s, a, r, s', a', done).

    A final step that is not terminal has no successor and is dropped. For
    terminal steps s' and a' are zero placeholders and never bootstrapped.
    """
    dataset.require_nonempty()
    rows = {k: [] for k in ("s", "a", "r", "s2", "a2", "d")}
    for traj in dataset:
        n = len(traj)
        for t in range(n):
            last = t == n - 1
            if last and not traj.terminals[t]:
                continue
            rows["s"].append(traj.states[t])
            rows["a"].append(traj.actions[t])
            rows["r"].append(traj.rewards[t])
            rows["s2"].append(np.zeros_like(traj.states[t]) if last else traj.states[t + 1])
            rows["a2"].append(np.zeros_like(traj.actions[t]) if last else traj.actions[t + 1])
            rows["d"].append(1.0 if last else 0.0)
    if not rows["r"]:
        raise ConfigurationError("dataset has no usable transitions")
    return Transitions(
        np.array(rows["s"]), np.array(rows["a"]), np.array(rows["r"]),
        np.array(rows["s2"]), np.array(rows["a2"]), np.array(rows["d"]),
    )


def _scale(config: CriticConfig, dataset: Dataset) -> float:
    if config.output_scale is not None:
        return float(config.output_scale)
    return float(max(1.0, np.abs(dataset.returns()).max()))


def _polyak(target: MlpParams, source: MlpParams, rate: float) -> None:
    for t, s in zip(target.weights + target.biases, source.weights + source.biases):
        t.data *= 1.0 - rate
        t.data += rate * s.data


def _regress_step(net: MlpParams, opt: Adam, inputs: np.ndarray, targets: np.ndarray,
                  tau: float | None = None) -> float:
    """One Adam step on mean squared (or expectile, if ``tau``) error."""
    tape = Tape()
    with tape:
        pred = mlp_forward(net, inputs)[:, 0]
        diff = Tensor(targets) - pred
        per = T.square(diff) if tau is None else expectile_loss_tensor(diff, tau)
        loss = per.mean()
    opt.step(backward(tape, loss))
    return float(loss.data)


def train_critic_iql(dataset: Dataset, config: CriticConfig | None = None) -> tuple[QNet, VNet, TrainLog]:
    """Fit Q and V by expectile regression on dataset transitions only.

    Each step: V(s) regresses onto Q_target(s, a) with the asymmetric
    expectile loss, then Q(s, a) regresses onto r + gamma * V(s') with V(s')
    zeroed at terminals. Q_target is a polyak copy of Q, or Q itself when
    ``use_target`` is off.
    """
    config = config or CriticConfig()
    data = transitions(dataset)
    obs_dim, act_dim = data.states.shape[1], data.actions.shape[1]
    scale = _scale(config, dataset)
    rng = RngStream(config.seed, "critic-iql")
    q = init_mlp([obs_dim + act_dim, *config.hidden, 1], rng.child("q-init"), output_scale=scale)
    v = init_mlp([obs_dim, *config.hidden, 1], rng.child("v-init"), output_scale=scale)
    q_target = q.copy() if config.use_target else q
    q_opt = Adam(q.parameters(), lr=config.lr)
    v_opt = Adam(v.parameters(), lr=config.lr)
    draws = rng.child("batches")
    history = TrainLog()
    sa_all = np.concatenate([data.states, data.actions], axis=1)

    for step in range(config.steps):
        idx = draws.integers(0, len(data), size=config.batch)
        b = data.take(idx)
        sa = sa_all[idx]
        q_bar = mlp_forward(q_target, sa).data[:, 0]
        history.v_loss.append(_regress_step(v, v_opt, b.states, q_bar, tau=config.tau))
        v_next = mlp_forward(v, b.next_states).data[:, 0]
        target = b.rewards + config.gamma * (1.0 - b.dones) * v_next
        history.q_loss.append(_regress_step(q, q_opt, sa, target))
        if config.use_target:
            _polyak(q_target, q, config.polyak_rate)
        if step % 500 == 0:
            log.info("iql step %d: q_loss %.5g v_loss %.5g", step, history.q_loss[-1], history.v_loss[-1])

    return QNet(q, obs_dim, act_dim), VNet(v, obs_dim), history


def train_critic_regression(dataset: Dataset, config: CriticConfig | None = None) -> tuple[QNet, TrainLog]:
    """Fit Q(s, a) to the immediate reward; only valid for one-step episodes."""
    config = config or CriticConfig()
    dataset.require_nonempty()
    if any(len(t) != 1 for t in dataset):
        raise ConfigurationError("reward regression needs single-step episodes")
    data = transitions(dataset)
    obs_dim, act_dim = data.states.shape[1], data.actions.shape[1]
    rng = RngStream(config.seed, "critic-regression")
    q = init_mlp([obs_dim + act_dim, *config.hidden, 1], rng.child("q-init"), output_scale=_scale(config, dataset))
    opt = Adam(q.parameters(), lr=config.lr)
    draws = rng.child("batches")
    sa_all = np.concatenate([data.states, data.actions], axis=1)
    history = TrainLog()
    for _ in range(config.steps):
        idx = draws.integers(0, len(data), size=config.batch)
        history.q_loss.append(_regress_step(q, opt, sa_all[idx], data.rewards[idx]))
    return QNet(q, obs_dim, act_dim), history


def train_critic_bellman(dataset: Dataset, config: CriticConfig | None = None) -> tuple[QNet, TrainLog]:
    """SARSA-style Bellman regression: target r + gamma * Q_target(s', a') with a' from the dataset.

    Kept as the naive baseline; the bootstrap action is always the logged one.
    """
    config = config or CriticConfig()
    data = transitions(dataset)
    obs_dim, act_dim = data.states.shape[1], data.actions.shape[1]
    rng = RngStream(config.seed, "critic-bellman")
    q = init_mlp([obs_dim + act_dim, *config.hidden, 1], rng.child("q-init"), output_scale=_scale(config, dataset))
    q_target = q.copy() if config.use_target else q
    opt = Adam(q.parameters(), lr=config.lr)
    draws = rng.child("batches")
    sa_all = np.concatenate([data.states, data.actions], axis=1)
    sa_next = np.concatenate([data.next_states, data.next_actions], axis=1)
    history = TrainLog()
    for _ in range(config.steps):
        idx = draws.integers(0, len(data), size=config.batch)
        q_next = mlp_forward(q_target, sa_next[idx]).data[:, 0]
        target = data.rewards[idx] + config.gamma * (1.0 - data.dones[idx]) * q_next
        history.q_loss.append(_regress_step(q, opt, sa_all[idx], target))
        if config.use_target:
            _polyak(q_target, q, config.polyak_rate)
    return QNet(q, obs_dim, act_dim), history


# ---------------------------------------------------------------- persistence


def _net_meta(p: MlpParams) -> dict:
    return {"widths": p.widths, "activation": p.activation, "output_scale": p.output_scale}


def _net_from(arrays: dict, prefix: str, meta: dict) -> MlpParams:
    n = len(meta["widths"]) - 1
    return MlpParams(
        [Tensor(arrays[f"{prefix}W{i}"], requires_grad=True) for i in range(n)],
        [Tensor(arrays[f"{prefix}b{i}"], requires_grad=True) for i in range(n)],
        meta["activation"],
        meta["output_scale"],
    )


def save_critic(path, qnet: QNet, vnet: VNet | None = None, config: CriticConfig | None = None) -> str:
    """Write the checkpoint plus a ``<path>.json`` sidecar; returns the checkpoint sha256."""
    params = qnet.params.parameters("q.")
    meta = {"kind": "critic", "obs_dim": qnet.obs_dim, "act_dim": qnet.act_dim, "q": _net_meta(qnet.params)}
    if vnet is not None:
        params.update(vnet.params.parameters("v."))
        meta["v"] = _net_meta(vnet.params)
    cfg = config.to_json() if config else None
    meta["config"] = cfg
    digest = checkpoint.save(path, params, meta)
    Path(f"{path}.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return digest


def load_critic(path) -> tuple[QNet, VNet | None, dict]:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "critic":
        raise ConfigurationError(f"{path} is not a critic checkpoint")
    q = QNet(_net_from(arrays, "q.", meta["q"]), meta["obs_dim"], meta["act_dim"])
    v = VNet(_net_from(arrays, "v.", meta["v"]), meta["obs_dim"]) if "v" in meta else None
    return q, v, meta.get("config") or {}
