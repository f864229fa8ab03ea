"""Minimal ViT encoder, its gradient engine, and the optimizer."""

from nmidistill.toy.autograd import Var, grad, log_softmax, parameter, softmax
from nmidistill.toy.model import ForwardOutput, ModelConfig, forward, init_params, param_shapes
from nmidistill.toy.optim import AdamWState, Schedule, adamw_step, lr_at

__all__ = [
    "AdamWState", "ForwardOutput", "ModelConfig", "Schedule", "Var", "adamw_step", "forward",
    "grad", "init_params", "log_softmax", "lr_at", "param_shapes", "parameter", "softmax",
]
