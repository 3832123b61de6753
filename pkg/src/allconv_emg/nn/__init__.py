"""Minimal dense tensor engine for the All-ConvNet: kernels, layers, Adam."""

from allconv_emg.nn.functional import (
    AdamState,
    BatchNormParams,
    ConvLayerParams,
    adam_step,
    batchnorm,
    batchnorm_backward,
    conv2d_backward,
    conv2d_forward,
    cross_entropy,
    dropout,
    elu,
    global_average_pool,
    softmax,
    xavier_init,
)
from allconv_emg.nn.gradcheck import GradCheckReport, finite_difference_check
from allconv_emg.nn.layers import ELU, BatchNorm2d, Conv2d, Dropout, Module, Parameter
from allconv_emg.nn.optim import Adam
from allconv_emg.nn.rng import RngStream

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm2d",
    "BatchNormParams",
    "Conv2d",
    "ConvLayerParams",
    "Dropout",
    "ELU",
    "GradCheckReport",
    "Module",
    "Parameter",
    "RngStream",
    "adam_step",
    "batchnorm",
    "batchnorm_backward",
    "conv2d_backward",
    "conv2d_forward",
    "cross_entropy",
    "dropout",
    "elu",
    "finite_difference_check",
    "global_average_pool",
    "softmax",
    "xavier_init",
]
