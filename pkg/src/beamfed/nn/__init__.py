"""Tensor engine and convolutional models."""

from .model import (
    CnnArch,
    GateArch,
    ModelParams,
    SkippedClient,
    backward,
    forward,
    init_params,
    local_train,
    loss_and_grad,
    nll_loss,
    predict_proba,
)
from .tensor import Tensor

__all__ = [
    "CnnArch",
    "GateArch",
    "ModelParams",
    "SkippedClient",
    "Tensor",
    "backward",
    "forward",
    "init_params",
    "local_train",
    "loss_and_grad",
    "nll_loss",
    "predict_proba",
]
