"""Stateful layers built on the NHWC kernels.

Each layer caches what its backward pass needs during ``forward`` and writes
parameter gradients into ``Parameter.grad`` during ``backward``. Frozen
parameters never accumulate gradient: their ``grad`` stays at exact zero.
"""

from dataclasses import dataclass, field

import numpy as np

from allconv_emg.errors import ConfigurationError, UsageError
from allconv_emg.nn import functional as F


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


class Module:
    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to_dtype(self, dtype):
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)


class Conv2d(Module):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int, stride: int = 1):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.weight = Parameter(f"{name}.weight", np.zeros((out_channels, in_channels, kernel, kernel), np.float32))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, np.float32))
        self._cache = None

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    @property
    def fan_out(self) -> int:
        return self.out_channels * self.kernel * self.kernel

    def reset_parameters(self, rng):
        dt = self.weight.value.dtype
        self.weight.value = F.xavier_init(self.weight.value.shape, self.fan_in, self.fan_out, rng, dtype=dt)
        self.bias.value = np.zeros(self.out_channels, dt)
        self.weight.grad = np.zeros_like(self.weight.value)
        self.bias.grad = np.zeros_like(self.bias.value)

    def params(self) -> F.ConvLayerParams:
        return F.ConvLayerParams(self.weight.value, self.bias.value, self.stride)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        out, self._cache = F.conv2d_forward_nhwc(x, self.params())
        return out

    def backward(self, dout, need_input_grad=True):
        if self._cache is None:
            raise UsageError(f"{self.name}: backward without forward")
        dx, dw, db = F.conv2d_backward_nhwc(dout, self._cache, need_input_grad)
        if self.weight.trainable:
            self.weight.grad += dw
        if self.bias.trainable:
            self.bias.grad += db
        return dx


class BatchNorm2d(Module):
    """Channels-last batch norm.

    A frozen layer normalizes with its running statistics even in train mode
    and leaves them untouched, so freezing a block pins its whole function.
    """

    def __init__(self, name: str, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        self.name = name
        self.channels = channels
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, np.float32))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum = momentum
        self.epsilon = epsilon
        self.frozen = False
        self._cache = None

    def reset_parameters(self):
        dt = self.gamma.value.dtype
        self.gamma.value = np.ones(self.channels, dt)
        self.beta.value = np.zeros(self.channels, dt)
        self.gamma.grad = np.zeros_like(self.gamma.value)
        self.beta.grad = np.zeros_like(self.beta.value)
        self.running_mean = np.zeros(self.channels, np.float32)
        self.running_var = np.ones(self.channels, np.float32)

    def params(self) -> F.BatchNormParams:
        return F.BatchNormParams(
            self.gamma.value, self.beta.value, self.running_mean, self.running_var, self.momentum, self.epsilon
        )

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, mode):
        if mode == "train" and self.frozen:
            mode = "frozen"
        out, self._cache = F.batchnorm_forward_nhwc(x, self.params(), mode)
        return out

    def backward(self, dout):
        if self._cache is None:
            raise UsageError(f"{self.name}: backward without forward")
        dx, dgamma, dbeta = F.batchnorm_backward_nhwc(dout, self._cache)
        if self.gamma.trainable:
            self.gamma.grad += dgamma
        if self.beta.trainable:
            self.beta.grad += dbeta
        return dx


class ELU(Module):
    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha
        self._cache = None

    def forward(self, x):
        out = F.elu(x, self.alpha)
        self._cache = (x, out)
        return out

    def backward(self, dout):
        x, out = self._cache
        return F.elu_backward(dout, x, out, self.alpha)


class Dropout(Module):
    def __init__(self, p: float, rng):
        if not 0 <= p < 1:
            raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng
        self._mask = None

    def forward(self, x, mode):
        out, self._mask = F.dropout(x, self.p, mode, self.rng)
        return out

    def backward(self, dout):
        return F.dropout_backward(dout, self._mask)
