"""Feed-forward networks on top of the tape engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from actiongrad.autodiff import tensor as T
from actiongrad.autodiff.rng import RngStream
from actiongrad.autodiff.tensor import Tape, Tensor, backward
from actiongrad.errors import ConfigurationError

ACTIVATIONS = {
    "relu": T.relu,
    "gelu": T.gelu,
    "tanh": T.tanh,
    "square": T.square,
    "identity": lambda x: x,
}


@dataclass
class MlpParams:
    """Weights ``W[i]`` of shape (in, out) and biases ``b[i]`` of shape (out,).

    ``output_scale`` is a fixed multiplier on the final layer; it lets a
    network regress large targets without learning large weights.
    """

    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"
    output_scale: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ConfigurationError(f"layer {i}: input width {w.shape[0]} != previous output")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def frozen(self) -> "MlpParams":
        """View sharing the same arrays but recording no parameter gradients."""
        return MlpParams(
            [Tensor(w.data) for w in self.weights],
            [Tensor(b.data) for b in self.biases],
            self.activation,
            self.output_scale,
            dict(self.extra),
        )

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
            self.activation,
            self.output_scale,
            dict(self.extra),
        )


def init_mlp(widths: list[int], rng: RngStream, activation: str = "relu",
             output_scale: float = 1.0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ConfigurationError(f"invalid layer widths {widths}")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True))
    return MlpParams(weights, biases, activation, output_scale)


def mlp_forward(params: MlpParams, x, tape: Tape | None = None) -> Tensor:
    """Run the network on ``x`` of shape (in,) or (batch, in).

    If ``tape`` is given the pass is recorded on it, otherwise on whatever tape
    is already active (or none).
    """
    if tape is not None:
        with tape:
            return mlp_forward(params, x)
    x = T.as_tensor(x)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise ConfigurationError(f"input shape {x.shape} does not match network width {params.in_dim}")
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    act = ACTIVATIONS[params.activation]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = act(h)
    if params.output_scale != 1.0:
        h = h * params.output_scale
    return h.reshape(-1) if squeeze else h


def critic_input(state, action) -> Tensor:
    return T.concat([T.as_tensor(state), T.as_tensor(action)], axis=-1)


def q_and_grad(qnet: MlpParams, state, action) -> tuple[np.ndarray, np.ndarray]:
    """Return ``Q(s, a)`` and ``dQ/da`` from one forward/backward pass.

    The critic parameters and the state are treated as constants.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape[-1] + action.shape[-1] != qnet.in_dim:
        raise ConfigurationError(
            f"state width {state.shape[-1]} + action width {action.shape[-1]} != critic input {qnet.in_dim}")
    frozen = qnet.frozen()
    a = Tensor(action, requires_grad=True)
    tape = Tape()
    with tape:
        q = mlp_forward(frozen, critic_input(Tensor(state), a))
        total = q.sum()
    grads = backward(tape, total)
    return q.data, grads[a]


def grad_wrt_action(qnet: MlpParams, state, action) -> np.ndarray:
    """Gradient of the critic's output with respect to the action only."""
    return q_and_grad(qnet, state, action)[1]


def quadratic_critic(obs_dim: int, act_dim: int = 1, peak: float = 1.0) -> MlpParams:
    """Fixed-weight network computing ``peak - sum(a**2)`` for any state."""
    w0 = np.zeros((obs_dim + act_dim, act_dim))
    w0[obs_dim:, :] = np.eye(act_dim)
    w1 = -np.ones((act_dim, 1))
    return MlpParams(
        [Tensor(w0), Tensor(w1)],
        [Tensor(np.zeros(act_dim)), Tensor(np.array([peak]))],
        activation="square",
    )
