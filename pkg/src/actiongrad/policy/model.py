"""Causal transformer over interleaved (state, return-to-go, action) tokens."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from actiongrad.autodiff import checkpoint
from actiongrad.autodiff import tensor as T
from actiongrad.autodiff.nn import MlpParams, init_mlp, mlp_forward
from actiongrad.autodiff.rng import RngStream
from actiongrad.autodiff.tensor import Tensor
from actiongrad.data import ContextBatch, NormStats, apply_norm
from actiongrad.errors import ConfigurationError

LOSS_MODES = ("dt_mse", "dt_pg", "rf_nll", "rf_pg", "rf_awac")
TOKEN_ORDERS = ("s_rtg_a", "rtg_s_a")
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class DTConfig:
    k: int = 20
    n_layers: int = 3
    n_heads: int = 1
    embed_dim: int = 128
    dropout: float = 0.0
    loss_mode: str = "dt_mse"
    alpha: float = 1.0
    lam: float = 1.0  # AWAC temperature
    entropy_coef: float = 0.1
    tau_rtg: float = 0.99
    lr: float = 1e-4
    steps: int = 2000
    batch: int = 64
    seed: int = 0
    token_order: str = "s_rtg_a"
    max_timestep: int = 64
    rtg_hidden: tuple[int, ...] = (64, 64)
    rtg_lr: float = 1e-3
    zero_init_heads: bool = True

    def __post_init__(self):
        self.rtg_hidden = tuple(int(h) for h in self.rtg_hidden)
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ConfigurationError("embed_dim must be divisible by n_heads")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")
        if self.token_order not in TOKEN_ORDERS:
            raise ConfigurationError(f"token_order must be one of {TOKEN_ORDERS}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.lam <= 0:
            raise ConfigurationError("lambda (AWAC temperature) must be > 0")
        if not 0.0 < self.tau_rtg < 1.0:
            raise ConfigurationError("tau_rtg must be in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["rtg_hidden"] = list(self.rtg_hidden)
        return d


@dataclass
class PolicyOutput:
    action_mean: Tensor  # (B, k, act)
    log_std: Tensor  # (B, k, act)
    rtg: Tensor  # (B, k), raw return units


class DTModel:
    """Parameters of the sequence policy plus the separate RTG network."""

    def __init__(self, config: DTConfig, obs_dim: int, act_dim: int, norm: NormStats,
                 rtg_scale: float, params: dict[str, Tensor], rtg_net: MlpParams):
        self.config = config
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.norm = norm
        self.rtg_scale = float(rtg_scale)
        self.params = params
        self.rtg_net = rtg_net

    def parameters(self) -> dict[str, Tensor]:
        return {**self.params, **self.rtg_net.parameters("rtg.")}

    def policy_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


def _uniform(rng: RngStream, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_model(config: DTConfig, obs_dim: int, act_dim: int, norm: NormStats | None = None,
               rtg_scale: float = 1.0) -> DTModel:
    rng = RngStream(config.seed, "dt-init")
    D = config.embed_dim
    p: dict[str, Tensor] = {}

    def linear(name, fan_in, fan_out):
        p[f"{name}.W"] = _uniform(rng, fan_in, (fan_in, fan_out))
        p[f"{name}.b"] = _uniform(rng, fan_in, (fan_out,))

    def norm_layer(name):
        p[f"{name}.g"] = Tensor(np.ones(D), requires_grad=True)
        p[f"{name}.b"] = Tensor(np.zeros(D), requires_grad=True)

    linear("emb_s", obs_dim, D)
    linear("emb_r", 1, D)
    linear("emb_a", act_dim, D)
    p["emb_t"] = _uniform(rng, D, (config.max_timestep, D))
    norm_layer("ln_emb")
    for i in range(config.n_layers):
        norm_layer(f"h{i}.ln1")
        for part in ("q", "k", "v", "o"):
            linear(f"h{i}.{part}", D, D)
        norm_layer(f"h{i}.ln2")
        linear(f"h{i}.fc", D, 4 * D)
        linear(f"h{i}.proj", 4 * D, D)
    norm_layer("ln_f")
    linear("head_mu", D, act_dim)
    linear("head_logstd", D, act_dim)
    if config.zero_init_heads:
        for name in ("head_mu.W", "head_mu.b", "head_logstd.W", "head_logstd.b"):
            p[name].data[...] = 0.0

    rtg_net = init_mlp([obs_dim, *config.rtg_hidden, 1], RngStream(config.seed, "rtg-init"),
                       output_scale=rtg_scale)
    norm = norm or NormStats(np.zeros(obs_dim), np.ones(obs_dim))
    return DTModel(config, obs_dim, act_dim, norm, rtg_scale, p, rtg_net)


# ------------------------------------------------------------------ forward


def _ln(p, name, x):
    return T.layer_norm(x) * p[f"{name}.g"] + p[f"{name}.b"]


def _lin(p, name, x):
    return x @ p[f"{name}.W"] + p[f"{name}.b"]


def attention_mask(token_valid: np.ndarray) -> np.ndarray:
    """(B, L) validity -> (B, 1, L, L) allowed-attention mask.

    Query i may see key j iff j <= i and j is a real token. Every token may
    always see itself so padding rows never produce an empty softmax.
    """
    L = token_valid.shape[1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = causal[None] & (token_valid[:, None, :] | np.eye(L, dtype=bool)[None])
    return allowed[:, None]


def _dropout(x: Tensor, rate: float, rng: RngStream | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def rtg_forward(model: DTModel, states) -> Tensor:
    """Predicted return-to-go per state, raw units; states (..., obs)."""
    s = apply_norm(model.norm, states)
    lead = s.shape[:-1]
    out = mlp_forward(model.rtg_net, s.reshape(-1, model.obs_dim))
    return out.reshape(lead)


def dt_forward(model: DTModel, batch: ContextBatch, dropout_rng: RngStream | None = None) -> PolicyOutput:
    """Action distribution at every position, read from the token preceding a_t.

    Pass ``dropout_rng`` only during training; evaluation is deterministic.
    """
    cfg, p = model.config, model.params
    B, k = batch.rtgs.shape
    if batch.states.shape[-1] != model.obs_dim or batch.actions.shape[-1] != model.act_dim:
        raise ConfigurationError(
            f"batch dims (obs {batch.states.shape[-1]}, act {batch.actions.shape[-1]}) "
            f"do not match model (obs {model.obs_dim}, act {model.act_dim})")
    if batch.timesteps.max(initial=0) >= cfg.max_timestep:
        raise ConfigurationError(f"timestep exceeds max_timestep={cfg.max_timestep}")
    D, H = cfg.embed_dim, cfg.n_heads
    dh = D // H

    states = apply_norm(model.norm, batch.states)
    rtgs = (batch.rtgs / model.rtg_scale)[..., None]
    t_emb = T.embedding(p["emb_t"], batch.timesteps)
    tok_s = _lin(p, "emb_s", Tensor(states)) + t_emb
    tok_r = _lin(p, "emb_r", Tensor(rtgs)) + t_emb
    tok_a = _lin(p, "emb_a", Tensor(batch.actions)) + t_emb
    order = (tok_s, tok_r, tok_a) if cfg.token_order == "s_rtg_a" else (tok_r, tok_s, tok_a)
    L = 3 * k
    x = T.stack(order, axis=2).reshape(B, L, D)
    x = _ln(p, "ln_emb", x)
    x = _dropout(x, cfg.dropout, dropout_rng)

    mask = attention_mask(np.repeat(batch.mask, 3, axis=1))
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        h = _ln(p, f"h{i}.ln1", x)

        def heads(t):
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(_lin(p, f"h{i}.q", h))
        kk = heads(_lin(p, f"h{i}.k", h))
        v = heads(_lin(p, f"h{i}.v", h))
        att = T.softmax((q @ kk.transpose(0, 1, 3, 2)) * scale, axis=-1, mask=mask)
        att = _dropout(att, cfg.dropout, dropout_rng)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        x = x + _dropout(_lin(p, f"h{i}.o", y), cfg.dropout, dropout_rng)
        h = _ln(p, f"h{i}.ln2", x)
        h = _lin(p, f"h{i}.proj", T.gelu(_lin(p, f"h{i}.fc", h)))
        x = x + _dropout(h, cfg.dropout, dropout_rng)

    x = _ln(p, "ln_f", x)
    # Index 1 of each step is the last token before a_t under either order.
    pred = x.reshape(B, k, 3, D)[:, :, 1, :]
    mean = _lin(p, "head_mu", pred)
    log_std = T.clip(_lin(p, "head_logstd", pred), LOG_STD_MIN, LOG_STD_MAX)
    return PolicyOutput(mean, log_std, rtg_forward(model, batch.states))


def predict_rtg(model: DTModel, context: ContextBatch) -> float:
    """Return-to-go token for the current (last) step of a single-row context."""
    return float(rtg_forward(model, context.states[0, -1]).data)


def act(model: DTModel, context: ContextBatch) -> np.ndarray:
    """Deterministic action (Gaussian mean) at the last position of a single-row context."""
    return dt_forward(model, context).action_mean.data[0, -1].copy()


# -------------------------------------------------------------- persistence


def save_policy(path, model: DTModel) -> str:
    meta = {
        "kind": "policy",
        "config": model.config.to_json(),
        "obs_dim": model.obs_dim,
        "act_dim": model.act_dim,
        "norm": model.norm.to_json(),
        "rtg_scale": model.rtg_scale,
    }
    digest = checkpoint.save(path, model.parameters(), meta)
    Path(f"{path}.json").write_text(json.dumps(model.config.to_json(), indent=2, sort_keys=True) + "\n")
    return digest


def load_policy(path) -> DTModel:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "policy":
        raise ConfigurationError(f"{path} is not a policy checkpoint")
    config = DTConfig(**meta["config"])
    model = init_model(config, meta["obs_dim"], meta["act_dim"], NormStats.from_json(meta["norm"]),
                       meta["rtg_scale"])
    for name, t in model.parameters().items():
        t.data = arrays[name].copy()
    return model
