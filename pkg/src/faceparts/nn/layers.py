"""Layer primitives with hand-written forward/backward passes.

Conventions shared by every layer:

- Activations are NCHW (or NxD for flat layers) numpy arrays; the layer's
  parameter dtype decides the compute dtype.
- ``forward(x, train)`` caches whatever backward needs only when
  ``train=True``; eval-mode forwards mutate nothing (no caches, no running
  stats, no RNG draws).
- ``backward(grad)`` consumes the cache, fills per-parameter gradients, and
  returns the gradient with respect to the layer input.
- Parameters and gradients are exposed as small name->array dicts so the
  optimizer and checkpoints can address them uniformly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatch, ShapeMismatch

#: Scores are clipped to [CLIP, 1-CLIP] before logarithms.
CLIP = 1e-7


class Layer:
    """Base: a stateless-by-default node with no parameters."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def state(self) -> dict[str, np.ndarray]:
        """Non-trainable buffers that must persist in checkpoints."""
        return {}


def _im2col(xp: np.ndarray) -> np.ndarray:
    """(N, C, H+2, W+2) padded input -> (N*H*W, C*9) patch matrix."""
    n, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero same-padding; He-normal init."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype=np.float64):
        std = np.sqrt(2.0 / (in_ch * 9))
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.weight = (rng.standard_normal((out_ch, in_ch, 3, 3)) * std).astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        self._xp = None

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(
                f"conv3x3 expects (N,{self.in_ch},H,W), got {x.shape}")
        n, _, h, w = x.shape
        xp = np.pad(x.astype(self.weight.dtype, copy=False),
                    ((0, 0), (0, 0), (1, 1), (1, 1)))
        if train:
            self._xp = xp
        cols = _im2col(xp)
        out = cols @ self.weight.reshape(self.out_ch, -1).T
        out += self.bias
        return out.reshape(n, h, w, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, grad):
        xp = self._xp
        n, co, h, w = grad.shape
        gm = grad.transpose(0, 2, 3, 1).reshape(n * h * w, co)
        cols = _im2col(xp)  # recomputed from the padded cache to save memory
        self.d_weight = (gm.T @ cols).reshape(self.weight.shape)
        self.d_bias = gm.sum(axis=0)
        # dx is the correlation of the padded upstream gradient with the
        # 180-degree-rotated kernels, channels transposed.
        gp = np.pad(grad, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gcols = _im2col(gp)
        w_rot = self.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = gcols @ w_rot.reshape(self.in_ch, -1).T
        self._xp = None
        return dx.reshape(n, h, w, self.in_ch).transpose(0, 3, 1, 2)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.d_weight, "bias": self.d_bias}


class BatchNorm(Layer):
    """Per-channel batch normalization over (N, H, W).

    Normalization uses the biased batch variance; running statistics are
    updated with momentum 0.9 and the unbiased variance, and drive eval
    mode.  Train mode requires batch size >= 2.
    """

    EPS = 1e-5
    MOMENTUM = 0.9

    def __init__(self, channels: int, dtype=np.float64):
        self.channels = channels
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.d_gamma = np.zeros_like(self.gamma)
        self.d_beta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None
        self._eval_scale = None

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(
                f"batchnorm expects (N,{self.channels},H,W), got {x.shape}")

    def forward(self, x, train=False):
        self._check(x)
        shape = (1, self.channels, 1, 1)
        if train:
            if x.shape[0] < 2:
                raise DegenerateBatch(
                    f"batchnorm needs batch >= 2 in train mode, got {x.shape[0]}")
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.EPS)
            xhat = (x - mu.reshape(shape)) * inv_std.reshape(shape)
            self._cache = (xhat, inv_std, m)
            mom = self.MOMENTUM
            self.running_mean = (mom * self.running_mean
                                 + (1.0 - mom) * mu).astype(self.gamma.dtype)
            unbiased = var * (m / (m - 1.0))
            self.running_var = (mom * self.running_var
                                + (1.0 - mom) * unbiased).astype(self.gamma.dtype)
            return self.gamma.reshape(shape) * xhat + self.beta.reshape(shape)
        scale = self.gamma / np.sqrt(self.running_var + self.EPS)
        shift = self.beta - self.running_mean * scale
        return x * scale.reshape(shape) + shift.reshape(shape)

    def backward(self, grad):
        shape = (1, self.channels, 1, 1)
        if self._cache is None:  # eval-mode backward: a fixed affine map
            scale = self.gamma / np.sqrt(self.running_var + self.EPS)
            return grad * scale.reshape(shape)
        xhat, inv_std, m = self._cache
        self.d_gamma = (grad * xhat).sum(axis=(0, 2, 3))
        self.d_beta = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma.reshape(shape)
        sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
        dx = (inv_std.reshape(shape) / m) * (
            m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        self._cache = None
        return dx

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.d_gamma, "beta": self.d_beta}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU(Layer):
    def __init__(self):
        self._mask = None
        self.last_min_abs = None  # smallest |preactivation|, for kink checks

    def forward(self, x, train=False):
        self.last_min_abs = float(np.abs(x).min()) if x.size else 0.0
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        out = grad * self._mask
        self._mask = None
        return out


class MaxPool3x3s2(Layer):
    """3x3 max pooling, stride 2, no padding; backward scatters to argmax."""

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[2] < 3 or x.shape[3] < 3:
            raise ShapeMismatch(f"maxpool3x3 needs H,W >= 3, got {x.shape}")
        n, c, h, w = x.shape
        win = sliding_window_view(x, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
        ho, wo = win.shape[2], win.shape[3]
        flat = win.reshape(n, c, ho, wo, 9)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if train:
            self._arg = arg
            self._in_shape = (n, c, h, w)
        return out

    def backward(self, grad):
        n, c, h, w = self._in_shape
        ho, wo = grad.shape[2], grad.shape[3]
        dy, dx_off = self._arg // 3, self._arg % 3
        oy = 2 * np.arange(ho).reshape(1, 1, ho, 1) + dy
        ox = 2 * np.arange(wo).reshape(1, 1, 1, wo) + dx_off
        base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
        flat_idx = (base + oy * w + ox).ravel()
        dx = np.bincount(flat_idx, weights=grad.ravel().astype(np.float64),
                         minlength=n * c * h * w)
        self._arg = None
        return dx.reshape(n, c, h, w).astype(grad.dtype)


class GlobalAvgPool(Layer):
    """NCHW -> NC per-channel spatial mean."""

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeMismatch(f"gap expects NCHW, got {x.shape}")
        if train:
            self._hw = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        h, w = self._hw
        return np.broadcast_to(
            grad[:, :, None, None] / (h * w), grad.shape + (h, w)).copy()


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        std = np.sqrt(2.0 / in_dim)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = (rng.standard_normal((in_dim, out_dim)) * std).astype(dtype)
        self.bias = np.zeros(out_dim, dtype=dtype)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(
                f"dense expects (N,{self.in_dim}), got {x.shape}")
        if train:
            self._x = x
        return x @ self.weight + self.bias

    def backward(self, grad):
        self.d_weight = self._x.T @ grad
        self.d_bias = grad.sum(axis=0)
        dx = grad @ self.weight.T
        self._x = None
        return dx

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.d_weight, "bias": self.d_bias}


class Dropout(Layer):
    """Inverted dropout: kept activations scaled by 1/keep; eval is identity.

    ``freeze_mask`` reuses the previous mask (same shape) so finite
    differences see a fixed, differentiable function.
    """

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self.rng = rng
        self.freeze_mask = False
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            return x
        if not (self.freeze_mask and self._mask is not None
                and self._mask.shape == x.shape):
            keep = 1.0 - self.rate
            self._mask = (self.rng.random(x.shape) >= self.rate) / keep
        return x * self._mask

    def backward(self, grad):
        if self._mask is None:
            return grad
        out = grad * self._mask
        if not self.freeze_mask:
            self._mask = None
        return out


class Sigmoid(Layer):
    def forward(self, x, train=False):
        out = 1.0 / (1.0 + np.exp(-x))
        if train:
            self._out = out
        return out

    def backward(self, grad):
        dx = grad * self._out * (1.0 - self._out)
        self._out = None
        return dx


def weighted_bce(scores: np.ndarray, labels: np.ndarray,
                 weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed weighted binary cross-entropy and its score gradient.

    loss = sum_j w_j * (-y_j log s_j - (1-y_j) log(1-s_j)) with scores
    clipped to [1e-7, 1-1e-7]; the gradient is zero where clipping binds
    (the clipped loss is flat there).
    """
    s = np.clip(scores, CLIP, 1.0 - CLIP)
    loss = float(np.sum(weights * (-labels * np.log(s)
                                   - (1.0 - labels) * np.log1p(-s))))
    inside = (scores > CLIP) & (scores < 1.0 - CLIP)
    grad = np.where(inside, weights * (s - labels) / (s * (1.0 - s)), 0.0)
    return loss, grad.astype(scores.dtype, copy=False)
