"""Return-conditioned transformer policy and its training objectives."""

from actiongrad.policy.losses import (
    awac_weights,
    gaussian_entropy,
    gaussian_nll,
    loss_awac,
    loss_dt_mse,
    loss_dt_pg,
    loss_pg,
    loss_rf,
    loss_rtg,
    q_term,
)
from actiongrad.policy.model import (
    DTConfig,
    DTModel,
    PolicyOutput,
    act,
    attention_mask,
    dt_forward,
    init_model,
    load_policy,
    predict_rtg,
    rtg_forward,
    save_policy,
)
from actiongrad.policy.train import PolicyTrainLog, policy_loss, rtg_scale_for, train_policy

__all__ = [
    "DTConfig",
    "DTModel",
    "PolicyOutput",
    "PolicyTrainLog",
    "act",
    "attention_mask",
    "awac_weights",
    "dt_forward",
    "gaussian_entropy",
    "gaussian_nll",
    "init_model",
    "load_policy",
    "loss_awac",
    "loss_dt_mse",
    "loss_dt_pg",
    "loss_pg",
    "loss_rf",
    "loss_rtg",
    "policy_loss",
    "predict_rtg",
    "q_term",
    "rtg_forward",
    "rtg_scale_for",
    "save_policy",
    "train_policy",
]
