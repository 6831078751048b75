"""Dense-tensor primitives with exact forward and backward passes.

Tensors are plain numpy arrays shaped ``[batch, channels, length]`` (or
``[batch, features]`` after pooling/flattening). Every op works in the dtype of
its inputs, so the same code runs in float64 for gradient checks and float32
for training.

The functional ops (``conv1d``, ``batch_norm1d`` ...) are the reference
surface; the ``Layer`` subclasses wrap them with parameter storage and the
caches needed by ``backward``.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateBatchError, ShapeError

PROB_CLIP = 1e-15

_trace: list[str] | None = None


@contextmanager
def record_ops():
    """Collect the names of layer ops executed inside the block, in order."""
    global _trace
    previous, _trace = _trace, []
    try:
        yield _trace
    finally:
        _trace = previous


def _note(name: str) -> None:
    if _trace is not None:
        _trace.append(name)


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    s = math.sqrt(6.0 / fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(eq=False)
class Conv1DParams:
    weight: np.ndarray  # [out_channels, in_channels, kernel_length]
    bias: np.ndarray  # [out_channels]
    padding: str = "same"
    grad_weight: np.ndarray = field(init=False, repr=False)
    grad_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.weight.ndim != 3 or min(self.weight.shape) < 1:
            raise ConfigurationError(f"conv weight must be [out, in, k] with positive dims, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError("conv bias must match out_channels")
        if self.padding != "same":
            raise ConfigurationError("only 'same' zero padding is supported")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def init(cls, in_channels, out_channels, kernel_length, rng, dtype=np.float32):
        w = he_uniform((out_channels, in_channels, kernel_length), in_channels * kernel_length, rng, dtype)
        return cls(w, np.zeros(out_channels, dtype=dtype))

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel_length(self):
        return self.weight.shape[2]

    def slots(self):
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]


@dataclass(eq=False)
class BatchNorm1DParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    grad_gamma: np.ndarray = field(init=False, repr=False)
    grad_beta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("batch-norm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ConfigurationError("batch-norm momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running variance must be non-negative")
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)

    @classmethod
    def init(cls, channels, dtype=np.float32, epsilon=1e-5, momentum=0.1):
        return cls(
            np.ones(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.zeros(channels, dtype=dtype),
            np.ones(channels, dtype=dtype),
            epsilon,
            momentum,
        )

    @property
    def channels(self):
        return self.gamma.shape[0]

    def slots(self):
        return [("gamma", self.gamma, self.grad_gamma), ("beta", self.beta, self.grad_beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


@dataclass(eq=False)
class DenseParams:
    weight: np.ndarray  # [out_features, in_features]
    bias: np.ndarray
    grad_weight: np.ndarray = field(init=False, repr=False)
    grad_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError("dense weight must be [out, in] with bias [out]")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def init(cls, in_features, out_features, rng, dtype=np.float32):
        w = he_uniform((out_features, in_features), in_features, rng, dtype)
        return cls(w, np.zeros(out_features, dtype=dtype))

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def slots(self):
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]


# ---------------------------------------------------------------------------
# functional ops


def _padded_rows(x: np.ndarray, k: int):
    # Zero-padded, channel-last copy of x flattened to [batch * padded_len, channels].
    # Tap j of output row r reads input row r + j; rows never cross samples.
    b, c, length = x.shape
    lp = k // 2
    plen = length + k - 1
    xp = np.zeros((b, plen, c), dtype=x.dtype)
    xp[:, lp:lp + length, :] = x.transpose(0, 2, 1)
    return xp.reshape(b * plen, c), plen


def _check_conv(x, weight):
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects [batch, channels, length], got {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"conv1d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")


# Wide inputs: one matmul against all taps at once, then a shifted sum over taps.
# Narrow inputs: one matmul per tap. Same arithmetic, different memory traffic.
_WIDE_INPUT = 48
_ROW_BLOCK = 2048  # narrow path works on row blocks that stay cache-resident across taps


def _stacked_taps(weight):
    o, c, k = weight.shape
    return np.ascontiguousarray(weight.transpose(1, 2, 0)).reshape(c, k * o)  # [in, k * out]


def _conv_rows(rows, plen, shape, weight, bias):
    b, c, length = shape
    o, _, k = weight.shape
    n = rows.shape[0] - (k - 1)
    acc = np.zeros((rows.shape[0], o), dtype=np.result_type(rows, weight))
    if c >= _WIDE_INPUT and k > 1:
        y = (rows @ _stacked_taps(weight)).reshape(-1, k, o)
        acc[:n] = y[0:n, 0]
        for j in range(1, k):
            acc[:n] += y[j:j + n, j]
    else:
        taps = np.ascontiguousarray(weight.transpose(2, 1, 0))  # [k, in, out]
        for r0 in range(0, n, _ROW_BLOCK):
            r1 = min(n, r0 + _ROW_BLOCK)
            a = acc[r0:r1]
            for j in range(k):
                a += rows[r0 + j:r1 + j] @ taps[j]
    out = acc.reshape(b, plen, o)[:, :length, :]
    out += bias
    return out.transpose(0, 2, 1)


def _conv_rows_backward(rows, plen, shape, weight, grad_out):
    b, c, length = shape
    o, _, k = weight.shape
    lp = k // 2
    g = np.zeros((b, plen, o), dtype=grad_out.dtype)
    g[:, :length, :] = grad_out.transpose(0, 2, 1)
    g = g.reshape(b * plen, o)
    n = rows.shape[0] - (k - 1)
    gn = g[:n]
    if c >= _WIDE_INPUT and k > 1:
        # shifted[s, j] = g[s - j]: gradient reaching input row s through tap j
        shifted = np.zeros((rows.shape[0], k, o), dtype=g.dtype)
        for j in range(k):
            shifted[j:j + n, j] = gn
        shifted = shifted.reshape(rows.shape[0], k * o)
        stacked = _stacked_taps(weight)
        grad_rows = shifted @ stacked.T
        grad_w = (rows.T @ shifted).reshape(c, k, o).transpose(2, 0, 1)
    else:
        taps_t = np.ascontiguousarray(weight.transpose(2, 0, 1))  # [k, out, in]
        grad_taps = np.zeros((k, c, o), dtype=weight.dtype)
        grad_rows = np.zeros_like(rows)
        for r0 in range(0, n, _ROW_BLOCK):
            r1 = min(n, r0 + _ROW_BLOCK)
            gb = gn[r0:r1]
            for j in range(k):
                grad_taps[j] += rows[r0 + j:r1 + j].T @ gb
                grad_rows[r0 + j:r1 + j] += gb @ taps_t[j]
        grad_w = grad_taps.transpose(2, 1, 0)
    grad_x = grad_rows.reshape(b, plen, c)[:, lp:lp + length, :].transpose(0, 2, 1)
    grad_b = grad_out.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """'Same'-padded cross-correlation: out[t] = sum_j w[j] * x[t + j - k//2] + bias."""
    _check_conv(x, weight)
    rows, plen = _padded_rows(x, weight.shape[2])
    return _conv_rows(rows, plen, x.shape, weight, bias)


def conv1d_backward(x, weight, grad_out):
    """Gradients of conv1d w.r.t. input, weight and bias: ``(grad_x, grad_w, grad_b)``."""
    _check_conv(x, weight)
    if grad_out.shape != (x.shape[0], weight.shape[0], x.shape[2]):
        raise ConfigurationError(f"conv1d_backward: cotangent shape {grad_out.shape} does not match forward output")
    rows, plen = _padded_rows(x, weight.shape[2])
    return _conv_rows_backward(rows, plen, x.shape, weight, grad_out)


def batch_norm1d(x: np.ndarray, p: BatchNorm1DParams, training: bool):
    """Per-channel batch normalisation. Returns ``(out, cache)``.

    Training mode normalises with batch statistics over the batch and length
    axes and updates the running statistics in place; inference mode only
    reads them.
    """
    if x.ndim != 3 or x.shape[1] != p.channels:
        raise ShapeError(f"batch_norm1d: expected [b, {p.channels}, L], got {x.shape}")
    if training:
        n = x.shape[0] * x.shape[2]
        if n < 2:
            raise DegenerateBatchError("batch norm needs batch * length >= 2 in training mode")
        mean = x.mean(axis=(0, 2))
        centered = x - mean[None, :, None]
        var = np.mean(centered * centered, axis=(0, 2))
        m = p.momentum
        p.running_mean *= 1 - m
        p.running_mean += m * mean
        p.running_var *= 1 - m
        p.running_var += m * var * (n / (n - 1))
    else:
        centered = x - p.running_mean[None, :, None]
        var = p.running_var
    inv_std = (1.0 / np.sqrt(var + p.epsilon)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None]
    out = xhat * p.gamma[None, :, None] + p.beta[None, :, None]
    return out, (xhat, inv_std, training)


def batch_norm1d_backward(cache, p: BatchNorm1DParams, grad_out):
    xhat, inv_std, training = cache
    p.grad_gamma[...] = np.sum(grad_out * xhat, axis=(0, 2))
    p.grad_beta[...] = np.sum(grad_out, axis=(0, 2))
    dxhat = grad_out * p.gamma[None, :, None]
    if not training:
        return dxhat * inv_std[None, :, None]
    n = grad_out.shape[0] * grad_out.shape[2]
    s1 = dxhat.sum(axis=(0, 2))[None, :, None]
    s2 = np.sum(dxhat * xhat, axis=(0, 2))[None, :, None]
    return (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def sigmoid(x):
    # tanh form: no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def avg_pool1d(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Mean over windows ``[t*stride, t*stride + window)``; trailing partial window dropped."""
    if window < 1 or stride < 1:
        raise ConfigurationError("pool window and stride must be >= 1")
    length = x.shape[-1]
    if window > length:
        raise ShapeError(f"pool window {window} exceeds length {length}: empty output")
    views = np.lib.stride_tricks.sliding_window_view(x, window, axis=-1)[..., ::stride, :]
    return views.mean(axis=-1)


def avg_pool1d_backward(input_shape, window, stride, grad_out):
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    n_out = grad_out.shape[-1]
    span = stride * (n_out - 1) + 1
    scaled = grad_out / window
    for i in range(window):
        grad_x[..., i:i + span:stride] += scaled
    return grad_x


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=2)


def global_avg_pool_backward(input_shape, grad_out):
    length = input_shape[2]
    return np.broadcast_to(grad_out[:, :, None] / length, input_shape).copy()


def fully_connected(x: np.ndarray, p: DenseParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.in_features:
        raise ConfigurationError(f"fully_connected: expected [b, {p.in_features}], got {x.shape}")
    return x @ p.weight.T + p.bias


def fully_connected_backward(x, p: DenseParams, grad_out):
    p.grad_weight[...] = grad_out.T @ x
    p.grad_bias[...] = grad_out.sum(axis=0)
    return grad_out @ p.weight


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ConfigurationError("concat_channels needs at least one tensor")
    b, _, length = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != b or t.shape[2] != length:
            raise ConfigurationError(f"concat_channels: {t.shape} incompatible with batch {b}, length {length}")
    if len(xs) == 1:
        return xs[0]
    return np.concatenate(xs, axis=1)


def split_channels(x: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Inverse of concat_channels; also the backward of concat (splits the cotangent)."""
    if sum(sizes) != x.shape[1]:
        raise ConfigurationError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    return np.split(x, np.cumsum(sizes)[:-1], axis=1)


def bce_loss(p, y) -> float:
    """Mean binary cross entropy with probabilities clipped to [1e-15, 1 - 1e-15]."""
    p = np.clip(np.asarray(p, dtype=np.float64).ravel(), PROB_CLIP, 1 - PROB_CLIP)
    y = np.asarray(y, dtype=np.float64).ravel()
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def bce_with_logits(logits, y):
    """Loss and its gradient w.r.t. the pre-sigmoid logits, ``(p - y) / b``."""
    z = np.asarray(logits).ravel()
    y = np.asarray(y, dtype=z.dtype).ravel()
    p = sigmoid(z)
    grad = (p - y) / z.shape[0]
    return bce_loss(p, y), grad.reshape(np.shape(logits))


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer: forward caches what backward needs, but only in training mode."""

    name = "layer"

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def children(self):
        return []

    def own_slots(self):
        return []

    def own_buffers(self):
        return []

    def slots(self, prefix=""):
        """(qualified name, value, grad) for every learnable array, in declaration order."""
        out = [(prefix + n, v, g) for n, v, g in self.own_slots()]
        for i, child in enumerate(self.children()):
            out += child.slots(f"{prefix}{i}.")
        return out

    def buffers(self, prefix=""):
        out = [(prefix + n, v) for n, v in self.own_buffers()]
        for i, child in enumerate(self.children()):
            out += child.buffers(f"{prefix}{i}.")
        return out

    def modules(self):
        yield self
        for child in self.children():
            yield from child.modules()

    def __call__(self, x, training=False):
        return self.forward(x, training)


class Conv1D(Layer):
    name = "conv"

    def __init__(self, in_channels, out_channels, kernel_length, rng, dtype=np.float32):
        if kernel_length < 1 or out_channels < 1:
            raise ConfigurationError("kernel_length and out_channels must be >= 1")
        self.p = Conv1DParams.init(in_channels, out_channels, kernel_length, rng, dtype)
        self._cache = None

    def forward(self, x, training=False):
        _note(self.name)
        _check_conv(x, self.p.weight)
        rows, plen = _padded_rows(x, self.p.kernel_length)
        if training:
            self._cache = (rows, plen, x.shape)
        return _conv_rows(rows, plen, x.shape, self.p.weight, self.p.bias)

    def backward(self, grad):
        rows, plen, shape = self._cache
        gx, gw, gb = _conv_rows_backward(rows, plen, shape, self.p.weight, grad)
        self.p.grad_weight[...] = gw
        self.p.grad_bias[...] = gb
        return gx

    def own_slots(self):
        return self.p.slots()


class BatchNorm1D(Layer):
    name = "bn"

    def __init__(self, channels, dtype=np.float32, epsilon=1e-5, momentum=0.1):
        self.p = BatchNorm1DParams.init(channels, dtype, epsilon, momentum)
        self._cache = None

    def forward(self, x, training=False):
        _note(self.name)
        out, cache = batch_norm1d(x, self.p, training)
        if training:
            self._cache = cache
        return out

    def backward(self, grad):
        return batch_norm1d_backward(self._cache, self.p, grad)

    def own_slots(self):
        return self.p.slots()

    def own_buffers(self):
        return self.p.buffers()


class ReLU(Layer):
    name = "relu"

    def forward(self, x, training=False):
        _note(self.name)
        if training:
            self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(self._x, grad)


class Sigmoid(Layer):
    name = "sigmoid"

    def forward(self, x, training=False):
        _note(self.name)
        out = sigmoid(x)
        if training:
            self._out = out
        return out

    def backward(self, grad):
        return grad * self._out * (1 - self._out)


class AvgPool1D(Layer):
    name = "avgpool"

    def __init__(self, window, stride):
        if window < 1 or stride < 1:
            raise ConfigurationError("pool window and stride must be >= 1")
        self.window, self.stride = window, stride

    def forward(self, x, training=False):
        _note(self.name)
        if training:
            self._shape = x.shape
        return avg_pool1d(x, self.window, self.stride)

    def backward(self, grad):
        return avg_pool1d_backward(self._shape, self.window, self.stride, grad)


class GlobalAvgPool(Layer):
    name = "gap"

    def forward(self, x, training=False):
        _note(self.name)
        if training:
            self._shape = x.shape
        return global_avg_pool(x)

    def backward(self, grad):
        return global_avg_pool_backward(self._shape, grad)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, training=False):
        if training:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class FullyConnected(Layer):
    name = "fc"

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.p = DenseParams.init(in_features, out_features, rng, dtype)

    def forward(self, x, training=False):
        _note(self.name)
        out = fully_connected(x, self.p)
        if training:
            self._x = x
        return out

    def backward(self, grad):
        return fully_connected_backward(self._x, self.p, grad)

    def own_slots(self):
        return self.p.slots()


class Sequential(Layer):
    name = "seq"

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def children(self):
        return self.layers


def backprop(model: Layer, x: np.ndarray, y) -> tuple[float, dict[str, np.ndarray]]:
    """One reverse-mode pass of ``bce(sigmoid(model(x)), y)``.

    ``model`` must emit logits of shape ``[batch, 1]``. Gradients are written
    into the model's grad slots and returned keyed by qualified name.
    """
    logits = model.forward(x, training=True)
    loss, grad = bce_with_logits(logits, y)
    model.backward(grad)
    return loss, {name: g for name, _, g in model.slots()}
