"""Training objectives for the sequence policy.

All losses average over valid (unpadded) positions. Each returns a scalar
tensor; the RTG-head term only touches the separate RTG network.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from actiongrad.autodiff import tensor as T
from actiongrad.autodiff.nn import critic_input, mlp_forward
from actiongrad.autodiff.tensor import Tensor
from actiongrad.critic import QNet, expectile_loss_tensor
from actiongrad.data import ContextBatch
from actiongrad.errors import ConfigurationError
from actiongrad.policy.model import PolicyOutput

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
AWAC_MAX_WEIGHT = 100.0


def _valid(batch: ContextBatch) -> tuple[np.ndarray, np.ndarray]:
    return np.nonzero(batch.mask)


def _no_valid(name: str) -> Tensor:
    warnings.warn(f"{name}: batch has no valid positions, loss is 0", RuntimeWarning, stacklevel=3)
    return Tensor(0.0)


def gaussian_nll(mean: Tensor, log_std: Tensor, actions) -> Tensor:
    """Per-row negative log-likelihood of a diagonal Gaussian, summed over action dims."""
    z = (T.as_tensor(actions) - mean) * T.exp(-log_std)
    return (0.5 * T.square(z) + log_std + HALF_LOG_2PI).sum(axis=-1)


def gaussian_entropy(log_std: Tensor) -> Tensor:
    return (log_std + 0.5 + HALF_LOG_2PI).sum(axis=-1)


def loss_dt_mse(out: PolicyOutput, batch: ContextBatch) -> Tensor:
    """Squared error of the action mean, summed over action dims."""
    idx = _valid(batch)
    if len(idx[0]) == 0:
        return _no_valid("loss_dt_mse")
    diff = out.action_mean[idx] - batch.actions[idx]
    return T.square(diff).sum(axis=-1).mean()


def loss_rtg(out: PolicyOutput, batch: ContextBatch, tau: float, scale: float = 1.0) -> Tensor:
    """Expectile regression of the RTG head onto dataset returns-to-go.

    ``scale`` divides both sides so the loss is O(1) regardless of return units.
    """
    idx = _valid(batch)
    if len(idx[0]) == 0:
        return _no_valid("loss_rtg")
    u = (batch.rtgs[idx] - out.rtg[idx]) * (1.0 / scale)
    return expectile_loss_tensor(u, tau).mean()


def _rf_terms(out: PolicyOutput, batch: ContextBatch, entropy_coef: float):
    idx = _valid(batch)
    mean, log_std = out.action_mean[idx], out.log_std[idx]
    nll = gaussian_nll(mean, log_std, batch.actions[idx])
    return idx, mean, nll, entropy_coef * gaussian_entropy(log_std).mean()


def loss_rf(out: PolicyOutput, batch: ContextBatch, entropy_coef: float = 0.1,
            tau_rtg: float = 0.99, rtg_scale: float = 1.0) -> Tensor:
    """Gaussian NLL minus an entropy bonus plus the RTG expectile term."""
    if not batch.mask.any():
        return _no_valid("loss_rf")
    _, _, nll, ent = _rf_terms(out, batch, entropy_coef)
    return nll.mean() - ent + loss_rtg(out, batch, tau_rtg, rtg_scale)


def _q(qnet: QNet, states: np.ndarray, actions) -> Tensor:
    return mlp_forward(qnet.params.frozen(), critic_input(Tensor(states), actions))[:, 0]


def q_term(out: PolicyOutput, batch: ContextBatch, qnet: QNet) -> Tensor:
    """``-mean Q(s, mu) / mean |Q(s, mu)|`` over valid positions.

    The normalizer is held constant (no gradient through it), otherwise the
    ratio would be scale free and its gradient would vanish whenever every Q
    has the same sign. The critic itself is frozen.
    """
    idx = _valid(batch)
    q = _q(qnet, batch.states[idx], out.action_mean[idx])
    norm = max(float(np.mean(np.abs(q.data))), 1e-8)
    return q.mean() * (-1.0 / norm)


def loss_pg(out: PolicyOutput, batch: ContextBatch, qnet: QNet, alpha: float,
            entropy_coef: float = 0.1, tau_rtg: float = 0.99, rtg_scale: float = 1.0) -> Tensor:
    """``loss_rf + alpha * q_term``."""
    if alpha < 0:
        raise ConfigurationError("alpha must be >= 0")
    if not batch.mask.any():
        return _no_valid("loss_pg")
    base = loss_rf(out, batch, entropy_coef, tau_rtg, rtg_scale)
    if alpha == 0:
        return base
    return base + alpha * q_term(out, batch, qnet)


def loss_dt_pg(out: PolicyOutput, batch: ContextBatch, qnet: QNet, alpha: float) -> Tensor:
    """``loss_dt_mse + alpha * q_term``; the squared-error anchor keeps the Q push bounded."""
    if alpha < 0:
        raise ConfigurationError("alpha must be >= 0")
    if not batch.mask.any():
        return _no_valid("loss_dt_pg")
    base = loss_dt_mse(out, batch)
    if alpha == 0:
        return base
    return base + alpha * q_term(out, batch, qnet)


def awac_weights(qnet: QNet, states: np.ndarray, data_actions: np.ndarray, policy_actions: np.ndarray,
                 lam: float) -> np.ndarray:
    """``clip(exp((Q(s, a) - Q(s, mu)) / lam), 0, 100)`` as plain numbers."""
    if lam <= 0:
        raise ConfigurationError("lambda (AWAC temperature) must be > 0")
    adv = _q(qnet, states, data_actions).data - _q(qnet, states, policy_actions).data
    with np.errstate(over="ignore"):
        return np.clip(np.exp(adv / lam), 0.0, AWAC_MAX_WEIGHT)


def loss_awac(out: PolicyOutput, batch: ContextBatch, qnet: QNet, lam: float,
              entropy_coef: float = 0.1, tau_rtg: float = 0.99, rtg_scale: float = 1.0) -> Tensor:
    """Advantage-weighted NLL with the weights detached and clipped to [0, 100]."""
    if lam <= 0:
        raise ConfigurationError("lambda (AWAC temperature) must be > 0")
    if not batch.mask.any():
        return _no_valid("loss_awac")
    idx, mean, nll, ent = _rf_terms(out, batch, entropy_coef)
    w = awac_weights(qnet, batch.states[idx], batch.actions[idx], mean.data, lam)
    return (nll * w).mean() - ent + loss_rtg(out, batch, tau_rtg, rtg_scale)
