"""Forward/backward kernels for the All-ConvNet layer types.

The public conv / batchnorm / pooling functions take NCHW arrays. The layer
classes in :mod:`allconv_emg.nn.layers` call the ``*_nhwc`` variants directly,
which avoids a transpose per layer: im2col on channels-last data is a plain
strided copy and the GEMM output is already channels-last.

All kernels keep the dtype of their inputs, so the same code runs at 32-bit
for training and at 64-bit for finite-difference checks.
"""

import logging
from dataclasses import dataclass

import numpy as np

from allconv_emg.errors import ConfigurationError, ContractViolation, NumericalError, UsageError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class ConvLayerParams:
    weight: np.ndarray  # (outC, inC, kH, kW)
    bias: np.ndarray  # (outC,)
    stride: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ContractViolation(f"conv weight must be 4-D, got shape {self.weight.shape}")
        out_c, _, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 3):
            raise ContractViolation(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ContractViolation(f"stride must be 1 or 2, got {self.stride}")
        if self.bias.shape != (out_c,):
            raise ContractViolation(f"bias shape {self.bias.shape} does not match {out_c} output channels")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        # same-size rule: output extent = ceil(input / stride)
        return self.kernel // 2


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum=0.1, epsilon=1e-5):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


# --------------------------------------------------------------------------
# convolution


def _out_extent(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


def _im2col_nhwc(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    if k == 1:
        return np.ascontiguousarray(xp[:, : stride * ho : stride, : stride * wo : stride, :]).reshape(n * ho * wo, c)
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    # (O, C, k, k) -> (O, k*k*C), matching the im2col column order
    out_c = weight.shape[0]
    return np.ascontiguousarray(weight.transpose(0, 2, 3, 1)).reshape(out_c, -1)


def conv2d_forward_nhwc(x: np.ndarray, params: ConvLayerParams):
    if x.ndim != 4:
        raise ContractViolation(f"conv input must be 4-D (N,H,W,C), got shape {x.shape}")
    n, h, w, c = x.shape
    out_c, in_c, k, _ = params.weight.shape
    if c != in_c:
        raise ContractViolation(f"conv expects {in_c} input channels, got {c}")
    pad = params.padding
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ContractViolation(f"input {h}x{w} smaller than kernel {k}x{k} after padding")
    s = params.stride
    ho, wo = _out_extent(h, s), _out_extent(w, s)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = _im2col_nhwc(xp, k, s, ho, wo)
    wmat = _weight_matrix(params.weight.astype(x.dtype, copy=False))
    out = cols @ wmat.T
    out += params.bias.astype(x.dtype, copy=False)
    cache = (cols, x.shape, params)
    return out.reshape(n, ho, wo, out_c), cache


def conv2d_backward_nhwc(dout: np.ndarray, cache, need_input_grad: bool = True):
    if cache is None:
        raise UsageError("conv2d_backward called without a forward cache")
    cols, in_shape, params = cache
    n, h, w, c = in_shape
    out_c, _, k, _ = params.weight.shape
    s, pad = params.stride, params.padding
    ho, wo = _out_extent(h, s), _out_extent(w, s)
    if dout.shape != (n, ho, wo, out_c):
        raise ContractViolation(f"upstream grad shape {dout.shape} != forward output {(n, ho, wo, out_c)}")
    d2 = dout.reshape(-1, out_c)
    dw = (d2.T @ cols).reshape(out_c, k, k, c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_input_grad:
        return None, np.ascontiguousarray(dw), db
    wmat = _weight_matrix(params.weight.astype(dout.dtype, copy=False))
    dcols = (d2 @ wmat).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad : pad + h, pad : pad + w, :] if pad else dxp
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def conv2d_forward(x: np.ndarray, params: ConvLayerParams):
    """Same-padded 2-D convolution on an NCHW batch.

    Returns ``(out, cache)`` where ``out`` has shape
    ``(N, outC, ceil(H/stride), ceil(W/stride))``.
    """
    if x.ndim != 4:
        raise ContractViolation(f"conv input must be 4-D (N,C,H,W), got shape {x.shape}")
    out, cache = conv2d_forward_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), params)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def conv2d_backward(dout: np.ndarray, cache):
    """Gradients ``(dx, dweight, dbias)`` for :func:`conv2d_forward`."""
    if cache is None:
        raise UsageError("conv2d_backward called without a forward cache")
    if dout.ndim != 4:
        raise ContractViolation(f"upstream grad must be 4-D, got shape {dout.shape}")
    dx, dw, db = conv2d_backward_nhwc(np.ascontiguousarray(dout.transpose(0, 2, 3, 1)), cache)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw, db


# --------------------------------------------------------------------------
# batch normalization


def batchnorm_forward_nhwc(x: np.ndarray, params: BatchNormParams, mode: str):
    c = x.shape[-1]
    if params.gamma.shape != (c,):
        raise ContractViolation(f"batchnorm has {params.gamma.shape[0]} channels, input has {c}")
    axes = tuple(range(x.ndim - 1))
    dt = x.dtype
    if mode == "train":
        m = x.size // c
        if x.shape[0] < 2:
            raise ConfigurationError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes, dtype=dt)
        centered = x - mean
        var = np.mean(centered * centered, axis=axes, dtype=dt)
        inv_std = 1.0 / np.sqrt(var + dt.type(params.epsilon))
        mom = params.momentum
        # running statistics use the unbiased batch variance
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
        params.running_var[...] = (1 - mom) * params.running_var + mom * var * (m / (m - 1))
    elif mode in ("infer", "frozen"):
        mean = params.running_mean.astype(dt, copy=False)
        centered = x - mean
        inv_std = 1.0 / np.sqrt(params.running_var.astype(dt, copy=False) + dt.type(params.epsilon))
    else:
        raise ConfigurationError(f"unknown batchnorm mode {mode!r}")
    xhat = centered * inv_std
    out = xhat * params.gamma.astype(dt, copy=False) + params.beta.astype(dt, copy=False)
    return out, (xhat, inv_std, params.gamma.astype(dt, copy=False), mode)


def batchnorm_backward_nhwc(dout: np.ndarray, cache):
    if cache is None:
        raise UsageError("batchnorm backward called without a forward cache")
    xhat, inv_std, gamma, mode = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = np.sum(dout * xhat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    dxhat = dout * gamma
    if mode == "train":
        m = dout.size // dout.shape[-1]
        dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


def batchnorm(x: np.ndarray, params: BatchNormParams, mode: str = "train"):
    """Per-channel batch normalization of an NCHW (or NC) array.

    ``train`` normalizes with batch statistics and updates the running
    statistics in ``params``; ``infer`` uses the running statistics only.
    """
    if x.ndim < 2:
        raise ContractViolation(f"batchnorm input must have a channel axis, got shape {x.shape}")
    moved = np.moveaxis(x, 1, -1)
    out, cache = batchnorm_forward_nhwc(moved, params, mode)
    return np.ascontiguousarray(np.moveaxis(out, -1, 1)), cache


def batchnorm_backward(dout: np.ndarray, cache):
    dx, dgamma, dbeta = batchnorm_backward_nhwc(np.moveaxis(dout, 1, -1), cache)
    return np.ascontiguousarray(np.moveaxis(dx, -1, 1)), dgamma, dbeta


# --------------------------------------------------------------------------
# elementwise


def elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    if alpha <= 0:
        raise ConfigurationError(f"ELU alpha must be positive, got {alpha}")
    x = np.asarray(x)
    neg = np.asarray(np.expm1(np.minimum(x, 0)))
    if alpha <= 1.0:
        # alpha * expm1(x) >= x for x <= 0 when alpha <= 1, so max() selects the branch
        if alpha != 1.0:
            neg *= alpha
        return np.maximum(x, neg, out=neg)
    return np.where(x > 0, x, alpha * neg).astype(x.dtype, copy=False)


def elu_backward(dout: np.ndarray, x: np.ndarray, out: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    if alpha == 1.0:
        # out + 1 = e^x below zero and > 1 above it
        slope = np.minimum(out + 1, 1)
        return np.multiply(dout, slope, out=slope)
    return dout * np.where(x > 0, 1, out + alpha).astype(dout.dtype, copy=False)


def dropout(x: np.ndarray, p: float, mode: str, rng):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive."""
    if not 0 <= p < 1:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    if mode != "train" or p == 0:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask) -> np.ndarray:
    return dout if mask is None else dout * mask


def global_average_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the spatial extent of an NCHW array, giving ``(N, C)``."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ContractViolation(f"global average pool expects (N,C,H,W), got {x.shape}")
    return x.mean(axis=(2, 3), dtype=x.dtype)


def global_average_pool_backward(dout: np.ndarray, in_shape) -> np.ndarray:
    n, c, h, w = in_shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], in_shape).copy()


# --------------------------------------------------------------------------
# classifier head


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ContractViolation("softmax received non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    ``probs`` is a softmax output of shape ``(G,)`` or ``(N, G)``. The logit
    gradient of the fused softmax + cross-entropy is ``probs - one_hot``,
    divided by the batch size for batched input.
    """
    probs = np.asarray(probs)
    single = probs.ndim == 1
    p2 = probs[None, :] if single else probs
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, g = p2.shape
    if lab.shape != (n,):
        raise ContractViolation(f"{lab.shape[0]} labels for {n} probability rows")
    if np.any(lab < 0) or np.any(lab >= g):
        raise ContractViolation(f"labels must lie in [0, {g})")
    picked = p2[np.arange(n), lab]
    if np.any(picked < PROB_FLOOR):
        log.warning("cross_entropy: %d probabilities below %.0e were floored", int(np.sum(picked < PROB_FLOOR)), PROB_FLOOR)
    loss = float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))
    grad = p2.copy()
    grad[np.arange(n), lab] -= 1
    if single:
        return loss, grad[0]
    return loss, grad / n


# --------------------------------------------------------------------------
# initialization and optimization


def xavier_init(shape, fan_in: int, fan_out: int, rng, dtype=np.float32) -> np.ndarray:
    """Glorot-uniform samples on ``[-sqrt(6/(fan_in+fan_out)), +...]``."""
    if fan_in <= 0 or fan_out <= 0:
        raise ConfigurationError("xavier_init needs positive fans")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape).astype(dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = None
    v: dict = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        self.m = {} if self.m is None else self.m
        self.v = {} if self.v is None else self.v


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params``.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves both parameters and state untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2) + state.epsilon
        p -= (state.lr / bc1) * m / denom
