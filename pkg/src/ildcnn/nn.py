"""Forward and backward kernels for the layers of the patch classifier.

Every kernel is a plain function of its inputs. Backward functions return
gradients and never touch parameters; the only state that moves is the
batch-norm running statistics (updated in train mode) and the random
generator handed to :func:`dropout`.

Image batches are N x H x W x C, convolution weights Kh x Kw x Cin x Cout,
dense weights In x Out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import matmul, pad2d

TRAIN = "train"
INFER = "infer"
_MODES = (TRAIN, INFER)


def _check_mode(mode: str) -> None:
    if mode not in _MODES:
        raise ConfigError(f"mode must be one of {_MODES}, got {mode!r}")


@dataclass
class Conv2DParams:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise DimensionError(f"conv weights must be Kh x Kw x Cin x Cout, got {self.weights.shape}")
        kh, kw, _, cout = self.weights.shape
        if kh != kw or kh % 2 == 0:
            raise DimensionError(f"'same' convolution needs a square odd kernel, got {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise DimensionError(f"conv bias shape {self.bias.shape} does not match {cout} output channels")

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[0]

    @property
    def num_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class BatchNormParams:
    """Per-channel scale/shift plus running statistics.

    Only ``gamma`` and ``beta`` are trainable, but :attr:`num_params` counts
    all four vectors, matching the usual Keras-style layer summary.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def init(cls, channels: int, dtype=np.float32, momentum: float = 0.9, epsilon: float = 1e-5):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise DimensionError(f"batch-norm {name} shape {getattr(self, name).shape} != gamma shape {c}")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"batch-norm momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ConfigError(f"batch-norm epsilon must be positive, got {self.epsilon}")

    @property
    def num_params(self) -> int:
        return 4 * self.gamma.size


@dataclass
class DenseParams:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise DimensionError(
                f"dense weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def num_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class DropoutSpec:
    rate: float
    mode: str = TRAIN
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        _check_mode(self.mode)


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray = field(repr=False)


# -- convolution -----------------------------------------------------------


def im2col(x: np.ndarray, kernel_size: int) -> np.ndarray:
    """Unfold 'same'-padded k x k windows into rows ordered (kh, kw, cin).

    Returns an (N*H*W) x (k*k*C) matrix whose column order matches a
    flattened Kh x Kw x Cin weight tensor.
    """
    n, h, w, c = x.shape
    p = kernel_size // 2
    xp = pad2d(x, p, p, p, p)
    win = sliding_window_view(xp, (kernel_size, kernel_size), axis=(1, 2))  # N,H,W,C,kh,kw
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kernel_size * kernel_size * c)


def col2im(cols: np.ndarray, x_shape, kernel_size: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add window rows back onto the image."""
    n, h, w, c = x_shape
    k = kernel_size
    p = k // 2
    cols = cols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + h, j : j + w, :] += cols[:, :, :, i, j, :]
    return out[:, p : p + h, p : p + w, :]


def _check_conv_input(x: np.ndarray, p: Conv2DParams) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects N x H x W x C input, got shape {x.shape}")
    if x.shape[3] != p.weights.shape[2]:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.shape[3]} channels, weights {p.weights.shape} expect {p.weights.shape[2]}"
        )


def conv2d_forward(x: np.ndarray, p: Conv2DParams, cols: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 'same' convolution plus per-channel bias.

    ``cols`` may carry a precomputed ``im2col(x, k)`` to avoid recomputation.
    """
    _check_conv_input(x, p)
    n, h, w, _ = x.shape
    k = p.kernel_size
    if cols is None:
        cols = im2col(x, k)
    cout = p.weights.shape[3]
    out = matmul(cols, p.weights.reshape(-1, cout)) + p.bias
    return out.reshape(n, h, w, cout)


def conv2d_backward(
    x: np.ndarray,
    p: Conv2DParams,
    d_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_dx: bool = True,
):
    """Gradients of :func:`conv2d_forward`; returns ``(dX, dW, dB)``.

    With ``need_dx=False`` the input gradient is skipped and ``None`` is
    returned in its place (used for the first layer of a network).
    """
    _check_conv_input(x, p)
    n, h, w, _ = x.shape
    cout = p.weights.shape[3]
    if d_out.shape != (n, h, w, cout):
        raise DimensionError(f"conv2d d_out shape {d_out.shape} != forward output {(n, h, w, cout)}")
    k = p.kernel_size
    if cols is None:
        cols = im2col(x, k)
    g = d_out.reshape(-1, cout)
    d_w = matmul(cols.T, g).reshape(p.weights.shape)
    d_b = g.sum(axis=0)
    d_x = None
    if need_dx:
        d_cols = matmul(g, p.weights.reshape(-1, cout).T)
        d_x = col2im(d_cols, x.shape, k)
    return d_x, d_w, d_b


# -- batch normalization ---------------------------------------------------


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str, update_stats: bool = True):
    """Normalize over every axis but the last (channels).

    Returns ``(y, cache)``; ``cache`` is ``None`` in infer mode. In train mode
    with ``update_stats`` the running mean and (biased) variance in ``p`` are
    updated in place by an exponential moving average.
    """
    _check_mode(mode)
    if x.shape[-1] != p.gamma.shape[0]:
        raise DimensionError(f"batch-norm channel mismatch: input {x.shape}, {p.gamma.shape[0]} channels")
    axes = tuple(range(x.ndim - 1))
    if mode == INFER:
        inv_std = 1.0 / np.sqrt(p.running_var + p.epsilon)
        return (x - p.running_mean) * inv_std * p.gamma + p.beta, None

    count = x.size // x.shape[-1]
    if count < 2:
        raise DimensionError("batch-norm in train mode needs at least 2 values per channel")
    mean = x.mean(axis=axes)
    centered = x - mean
    var = (centered * centered).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    x_hat = centered * inv_std
    if update_stats:
        m = p.momentum
        p.running_mean[...] = m * p.running_mean + (1 - m) * mean
        p.running_var[...] = m * p.running_var + (1 - m) * var
    return x_hat * p.gamma + p.beta, BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=p.gamma)


def batchnorm_backward(x: np.ndarray, p: BatchNormParams, d_out: np.ndarray, cache: BatchNormCache):
    if d_out.shape != x.shape or cache.x_hat.shape != x.shape:
        raise DimensionError(f"batch-norm backward shape mismatch: x {x.shape}, d_out {d_out.shape}")
    axes = tuple(range(x.ndim - 1))
    m = x.size // x.shape[-1]
    x_hat = cache.x_hat
    d_beta = d_out.sum(axis=axes)
    d_gamma = (d_out * x_hat).sum(axis=axes)
    d_x = (cache.gamma * cache.inv_std / m) * (m * d_out - d_beta - x_hat * d_gamma)
    return d_x, d_gamma, d_beta


# -- pooling / activations -------------------------------------------------


@dataclass
class PoolRecord:
    argmax: np.ndarray  # N x H/2 x W/2 x C, index into the row-major 2x2 window
    input_shape: tuple


def maxpool2d(x: np.ndarray):
    """2x2 max pooling with stride 2. Returns ``(y, PoolRecord)``.

    Ties resolve to the first maximum in row-major window order.
    """
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects N x H x W x C input, got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, PoolRecord(argmax=idx.astype(np.int8), input_shape=x.shape)


def maxpool2d_backward(d_out: np.ndarray, record: PoolRecord) -> np.ndarray:
    n, h, w, c = record.input_shape
    if d_out.shape != (n, h // 2, w // 2, c):
        raise DimensionError(f"maxpool2d d_out shape {d_out.shape} does not match record")
    win = np.zeros((n, h // 2, w // 2, c, 4), dtype=d_out.dtype)
    np.put_along_axis(win, record.argmax[..., None].astype(np.intp), d_out[..., None], axis=-1)
    return win.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return d_out * (x > 0)


# -- dense -----------------------------------------------------------------


def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise DimensionError(f"dense input {x.shape} incompatible with weights {p.weights.shape}")
    return matmul(x, p.weights) + p.bias


def dense_backward(x: np.ndarray, p: DenseParams, d_out: np.ndarray, need_dx: bool = True):
    if d_out.shape != (x.shape[0], p.weights.shape[1]):
        raise DimensionError(f"dense d_out shape {d_out.shape} != forward output {(x.shape[0], p.weights.shape[1])}")
    d_w = matmul(x.T, d_out)
    d_b = d_out.sum(axis=0)
    d_x = matmul(d_out, p.weights.T) if need_dx else None
    return d_x, d_w, d_b


# -- dropout ---------------------------------------------------------------


def dropout(x: np.ndarray, spec: DropoutSpec, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(y, mask)`` with ``y == x * mask``.

    The mask holds ``0`` for dropped units and ``1 / (1 - rate)`` for
    survivors. Without an explicit ``rng`` the generator is seeded from
    ``spec.seed``. In infer mode (or at rate 0) the mask is all ones.
    """
    if spec.mode == INFER or spec.rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    keep = rng.random(x.shape) >= spec.rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - spec.rate)
    return x * mask, mask


def dropout_backward(d_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return d_out * mask


# -- softmax ---------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    if z.ndim != 2:
        raise DimensionError(f"softmax expects an N x K matrix, got {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
