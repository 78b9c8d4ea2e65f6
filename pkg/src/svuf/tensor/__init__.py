"""Dense float64 tensors with reverse-mode autodiff, layers and optimizers."""

from . import functional
from .autograd import Tensor, as_tensor, is_grad_enabled, no_grad
from .ops import batch_norm, conv, conv_output_size, conv_transpose, lstm_cell, max_pool
from .gradcheck import GradCheckReport, check_gradients
from .nn import (
    LSTM,
    BatchNorm,
    Conv,
    ConvTranspose,
    Linear,
    Module,
    Parameter,
    lstm_step,
    same_padding,
)
from .optim import SGD, Adam, OptimizerConfig, adam_step, make_optimizer, sgd_momentum_step

__all__ = [
    "Tensor", "as_tensor", "no_grad", "is_grad_enabled", "functional",
    "conv", "conv_transpose", "conv_output_size", "batch_norm", "max_pool", "lstm_cell",
    "GradCheckReport", "check_gradients",
    "Module", "Parameter", "Linear", "Conv", "ConvTranspose", "BatchNorm", "LSTM",
    "lstm_step", "same_padding",
    "OptimizerConfig", "SGD", "Adam", "make_optimizer", "sgd_momentum_step", "adam_step",
]
