"""Offline training loop for the sequence policy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from actiongrad.autodiff.optim import Adam
from actiongrad.autodiff.rng import RngStream
from actiongrad.autodiff.tensor import Tape, backward
from actiongrad.critic import QNet
from actiongrad.data import ContextSampler, Dataset, fit_norm_stats
from actiongrad.errors import ConfigurationError
from actiongrad.policy.losses import loss_awac, loss_dt_mse, loss_dt_pg, loss_pg, loss_rf, loss_rtg
from actiongrad.policy.model import DTConfig, DTModel, dt_forward, init_model

log = logging.getLogger(__name__)


@dataclass
class PolicyTrainLog:
    loss: list[float] = field(default_factory=list)


def rtg_scale_for(dataset: Dataset) -> float:
    return max(1.0, float(np.max(np.abs(dataset.all_rtgs()))))


def policy_loss(model: DTModel, out, batch, qnet: QNet | None):
    cfg = model.config
    common = dict(entropy_coef=cfg.entropy_coef, tau_rtg=cfg.tau_rtg, rtg_scale=model.rtg_scale)
    if cfg.loss_mode in ("dt_mse", "dt_pg"):
        # The RTG head has its own parameters, so training it here leaves the
        # action objective untouched.
        rtg = loss_rtg(out, batch, cfg.tau_rtg, model.rtg_scale)
        if cfg.loss_mode == "dt_mse":
            return loss_dt_mse(out, batch) + rtg
        return loss_dt_pg(out, batch, qnet, cfg.alpha) + rtg
    if cfg.loss_mode == "rf_nll":
        return loss_rf(out, batch, **common)
    if cfg.loss_mode == "rf_pg":
        return loss_pg(out, batch, qnet, cfg.alpha, **common)
    return loss_awac(out, batch, qnet, cfg.lam, **common)


def train_policy(dataset: Dataset, config: DTConfig | None = None,
                 qnet: QNet | None = None) -> tuple[DTModel, PolicyTrainLog]:
    config = config or DTConfig()
    dataset.require_nonempty()
    if config.loss_mode in ("dt_pg", "rf_pg", "rf_awac") and qnet is None:
        raise ConfigurationError(f"loss_mode {config.loss_mode!r} needs a critic")
    if dataset.max_length > config.max_timestep:
        raise ConfigurationError(
            f"episodes of length {dataset.max_length} exceed max_timestep={config.max_timestep}")

    model = init_model(config, dataset.obs_dim, dataset.act_dim, fit_norm_stats(dataset),
                       rtg_scale_for(dataset))
    policy_opt = Adam(model.policy_parameters(), lr=config.lr)
    rtg_opt = Adam(model.rtg_net.parameters("rtg."), lr=config.rtg_lr)
    sampler = ContextSampler(dataset)
    rng = RngStream(config.seed, "dt-train")
    drop_rng = rng.child("dropout") if config.dropout > 0 else None
    history = PolicyTrainLog()
    for step in range(config.steps):
        batch = sampler.sample(config.k, config.batch, rng).trimmed()
        tape = Tape()
        with tape:
            out = dt_forward(model, batch, drop_rng)
            loss = policy_loss(model, out, batch, qnet)
        grads = backward(tape, loss)
        policy_opt.step(grads)
        rtg_opt.step(grads)
        history.loss.append(loss.item())
        if step % 500 == 0:
            log.debug("policy step %d loss %.5f", step, history.loss[-1])
    return model, history
