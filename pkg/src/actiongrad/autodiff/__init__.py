from actiongrad.autodiff.nn import (
    MlpParams,
    grad_wrt_action,
    init_mlp,
    mlp_forward,
    q_and_grad,
    quadratic_critic,
)
from actiongrad.autodiff.optim import Adam, adam_param_step
from actiongrad.autodiff.rng import RngStream
from actiongrad.autodiff.tensor import Gradients, Tape, Tensor, backward

__all__ = [
    "Adam",
    "Gradients",
    "MlpParams",
    "RngStream",
    "Tape",
    "Tensor",
    "adam_param_step",
    "backward",
    "grad_wrt_action",
    "init_mlp",
    "mlp_forward",
    "q_and_grad",
    "quadratic_critic",
]
