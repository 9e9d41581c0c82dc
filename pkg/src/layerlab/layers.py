"""Forward/backward layer implementations, the loss, and the Adam step.

Layers are small parameter-owning objects whose forward() composes tape
ops, so one reverse sweep differentiates any stack of them. Conv and
maxpool route their heavy lifting through layerlab.kernels; everything
else is plain vectorized numpy.
"""

import math
from enum import Enum

import numpy as np

from . import kernels
from .autodiff import ShapeError, Tensor, active_tape
from .autodiff import add as t_add
from .autodiff import matmul as t_matmul
from .autodiff import relu as t_relu
from .autodiff import reshape as t_reshape


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


class ConfigError(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


class Dense:
    def __init__(self, in_dim: int, units: int, rng: np.random.Generator):
        if units <= 0:
            raise ConfigError(f"dense units must be positive, got {units}")
        self.weight = Tensor(glorot_uniform(rng, in_dim, units, (in_dim, units)), requires_grad=True)
        self.bias = Tensor(np.zeros(units, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return t_add(t_matmul(x, self.weight), self.bias)

    def params(self):
        return [self.weight, self.bias]


def conv_same_padding(h: int, w: int, kh: int, kw: int, stride: int):
    """TF-style 'same': out = ceil(in/stride), extra padding goes right/bottom."""
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    ph = max((out_h - 1) * stride + kh - h, 0)
    pw = max((out_w - 1) * stride + kw - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


class Conv2d:
    def __init__(self, in_channels: int, filters: int, rng: np.random.Generator,
                 kernel=(3, 3), stride: int = 1, padding: str = "same"):
        if filters <= 0:
            raise ConfigError(f"conv filters must be positive, got {filters}")
        if padding not in ("same", "valid"):
            raise ConfigError(f"conv padding must be 'same' or 'valid', got {padding!r}")
        if stride not in (1, 2):
            raise ConfigError(f"conv stride must be 1 or 2, got {stride}")
        kh, kw = kernel
        fan_in = in_channels * kh * kw
        fan_out = filters * kh * kw
        self.kernel = Tensor(
            glorot_uniform(rng, fan_in, fan_out, (filters, in_channels, kh, kw)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(filters, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        n, c, h, w = x.shape
        f, ck, kh, kw = self.kernel.shape
        if c != ck:
            raise ShapeError(f"conv expects {ck} input channels, got {c} (input {x.shape})")
        if self.padding == "same":
            top, bottom, left, right = conv_same_padding(h, w, kh, kw, self.stride)
        else:
            top = bottom = left = right = 0
        if h + top + bottom < kh or w + left + right < kw:
            raise ShapeError(
                f"kernel {kh}x{kw} larger than padded input {h + top + bottom}x{w + left + right}"
            )
        xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
        xp = np.ascontiguousarray(xp, dtype=np.float32)
        out_data = kernels.conv2d_forward(xp, self.kernel.data, self.stride)
        out_data = out_data + self.bias.data[None, :, None, None]
        out = Tensor(out_data)
        stride = self.stride
        kernel = self.kernel

        def backward(g, needs):
            g = np.ascontiguousarray(g, dtype=np.float32)
            db = g.sum(axis=(0, 2, 3)) if needs[2] else None
            dx = dw = None
            if needs[0] or needs[1]:
                dxp, dw = kernels.conv2d_backward(xp, kernel.data, g, stride, needs[0])
                if not needs[1]:
                    dw = None
                if needs[0]:
                    dx = dxp[:, :, top : top + h, left : left + w]
                    dx = np.ascontiguousarray(dx)
            return dx, dw, db

        return _record(out, (x, self.kernel, self.bias), backward)

    def params(self):
        return [self.kernel, self.bias]


class BatchNorm:
    """Per-channel (4D input) or per-feature (2D input) batch normalization."""

    def __init__(self, channels: int, eps: float = 1e-3, momentum: float = 0.99):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum

    def _axes_and_shape(self, x: Tensor):
        if x.data.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        if x.data.ndim == 2:
            return (0,), (1, -1)
        raise ShapeError(f"batchnorm expects 2D or 4D input, got {x.shape}")

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        axes, pshape = self._axes_and_shape(x)
        c = x.shape[1]
        if self.gamma.size != c:
            raise ShapeError(f"batchnorm has {self.gamma.size} channels, input has {c}")
        gamma_b = self.gamma.data.reshape(pshape)
        beta_b = self.beta.data.reshape(pshape)

        if mode is Mode.EVAL:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            scale = (gamma_b * inv_std.reshape(pshape)).astype(np.float32)
            out = Tensor(scale * (x.data - self.running_mean.reshape(pshape)) + beta_b)

            def backward_eval(g, needs):
                dx = g * scale if needs[0] else None
                xhat = (x.data - self.running_mean.reshape(pshape)) * inv_std.reshape(pshape)
                dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
                dbeta = g.sum(axis=axes) if needs[2] else None
                return dx, dgamma, dbeta

            return _record(out, (x, self.gamma, self.beta), backward_eval)

        if x.shape[0] < 2:
            raise ShapeError("batchnorm in Train mode needs batch size >= 2 (batch variance undefined)")
        m = float(np.prod([x.shape[a] for a in axes]))
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # population variance
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(np.float32)
        xhat = (x.data - mu.reshape(pshape)) * inv_std.reshape(pshape)
        out = Tensor(gamma_b * xhat + beta_b)

        self.running_mean = (self.momentum * self.running_mean + (1 - self.momentum) * mu).astype(np.float32)
        self.running_var = (self.momentum * self.running_var + (1 - self.momentum) * var).astype(np.float32)

        def backward(g, needs):
            dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
            dbeta = g.sum(axis=axes) if needs[2] else None
            if not needs[0]:
                return None, dgamma, dbeta
            sum_g = g.sum(axis=axes, keepdims=True)
            sum_gx = (g * xhat).sum(axis=axes, keepdims=True)
            dx = (gamma_b * inv_std.reshape(pshape) / m) * (m * g - sum_g - xhat * sum_gx)
            return dx.astype(np.float32), dgamma, dbeta

        return _record(out, (x, self.gamma, self.beta), backward)

    def params(self):
        return [self.gamma, self.beta]


class Dropout:
    """Inverted dropout: Train zeroes with prob rate and rescales survivors."""

    def __init__(self, rate: float, seed: int = 0):
        if not (0.0 <= rate < 1.0):
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if mode is Mode.EVAL or self.rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(np.float32)
        scale = np.float32(1.0 / (1.0 - self.rate))
        mask = keep * scale
        out = Tensor(x.data * mask)

        def backward(g, needs):
            return (g * mask if needs[0] else None,)

        return _record(out, (x,), backward)

    def params(self):
        return []


class MaxPool2x2:
    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"maxpool expects 4D input, got {x.shape}")
        n, c, h, w = x.shape
        ph, pw = h % 2, w % 2
        data = x.data
        if ph or pw:
            data = np.pad(data, ((0, 0), (0, 0), (0, ph), (0, pw)),
                          constant_values=np.float32(-np.inf))
        data = np.ascontiguousarray(data, dtype=np.float32)
        out_data, idx = kernels.maxpool2_forward(data)
        out = Tensor(out_data)

        def backward(g, needs):
            if not needs[0]:
                return (None,)
            g = np.ascontiguousarray(g, dtype=np.float32)
            dx = kernels.maxpool2_backward(g, idx)
            return (np.ascontiguousarray(dx[:, :, :h, :w]),)

        return _record(out, (x,), backward)

    def params(self):
        return []


class UpSample2x:
    """Nearest-neighbor x2; backward sums the four replicated gradients."""

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"upsample expects 4D input, got {x.shape}")
        n, c, h, w = x.shape
        out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

        def backward(g, needs):
            if not needs[0]:
                return (None,)
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=np.float32),)

        return _record(out, (x,), backward)

    def params(self):
        return []


class Flatten:
    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.data.ndim == 2:
            return x
        return t_reshape(x, (x.shape[0], -1))

    def params(self):
        return []


class GlobalAvgPool:
    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"global average pool expects 4D input, got {x.shape}")
        n, c, h, w = x.shape
        out = Tensor(x.data.mean(axis=(2, 3), dtype=np.float32))

        def backward(g, needs):
            if not needs[0]:
                return (None,)
            dx = np.broadcast_to(g[:, :, None, None] / np.float32(h * w), (n, c, h, w))
            return (dx.astype(np.float32),)

        return _record(out, (x,), backward)

    def params(self):
        return []


def softmax(x: Tensor) -> Tensor:
    """Elementwise softmax over channels (4D) or the last axis (2D)."""
    axis = 1 if x.data.ndim == 4 else -1
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)
    out = Tensor(y)

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((y * (g - dot)).astype(np.float32),)

    return _record(out, (x,), backward)


class Activation:
    def __init__(self, fn: str):
        if fn not in ("relu", "softmax"):
            raise ConfigError(f"activation must be 'relu' or 'softmax', got {fn!r}")
        self.fn = fn

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return t_relu(x) if self.fn == "relu" else softmax(x)

    def params(self):
        return []


def softmax_ce_loss(logits: Tensor, labels: np.ndarray):
    """Mean cross-entropy from logits via log-sum-exp; returns (loss, probs)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"loss expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    if n < 1:
        raise ShapeError("loss needs at least one sample")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_z
    probs = np.exp(log_probs).astype(np.float32)
    loss = Tensor(np.float32(-log_probs[np.arange(n), labels].mean()))

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * (np.float32(g) / np.float32(n))).astype(np.float32),)

    _record(loss, (logits,), backward)
    return loss, probs


class Adam:
    """Adam with bias correction; epsilon sits outside the square root."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("non-finite gradient in Adam step")
            m[:] = self.beta1 * m + (1.0 - self.beta1) * g
            v[:] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def describe(self) -> str:
        return f"adam(lr={self.lr},beta1={self.beta1},beta2={self.beta2},eps={self.eps})"
