"""Minimal deterministic CNN building blocks with exact analytic gradients.

Tensors are float64 numpy arrays shaped (batch, channels, height, width).
Layers own their parameters (value/gradient/momentum triples); forward
returns (output, cache) and backward consumes that cache, accumulates
parameter gradients, and returns the input gradient.  Everything is
verified against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    pass


@dataclass
class Param:
    name: str
    value: np.ndarray
    decay: bool = True  # weight decay applies (False for biases and norm affine)
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def check_tensor4(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) tensor, got shape {x.shape}")
    return x


def init_conv_weight(out_ch: int, in_ch: int, rng, std: float | None = None) -> np.ndarray:
    """Zero-mean Gaussian with std sqrt(2 / fan_in) unless overridden."""
    if std is None:
        std = np.sqrt(2.0 / (in_ch * 9))
    return rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3))


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (C*9, B*H*W) patch matrix under zero padding."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    cols = np.empty((c, 9, b, h, w), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, di * 3 + dj] = xp[:, :, di : di + h, dj : dj + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, b * h * w)


def _col2im(dcols: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    dc = dcols.reshape(c, 3, 3, b, h, w)
    dxp = np.zeros((c, b, h + 2, w + 2), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + w] += dc[:, di, dj]
    return np.ascontiguousarray(dxp[:, :, 1 : h + 1, 1 : w + 1].transpose(1, 0, 2, 3))


class Conv3x3:
    """Same-size 3x3 convolution with zero padding and bias."""

    def __init__(self, in_ch: int, out_ch: int, rng=None, name: str = "conv", std=None):
        self.in_ch = in_ch
        self.out_ch = out_ch
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = Param(f"{name}.weight", init_conv_weight(out_ch, in_ch, rng, std))
        self.bias = Param(f"{name}.bias", np.zeros(out_ch), decay=False)
        self.name = name

    def forward(self, x: np.ndarray):
        x = check_tensor4(x)
        b, c, h, w = x.shape
        if c != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        cols = _im2col(x)
        wmat = self.weight.value.reshape(self.out_ch, self.in_ch * 9)
        y2 = wmat @ cols
        y2 += self.bias.value[:, None]
        y = np.ascontiguousarray(y2.reshape(self.out_ch, b, h, w).transpose(1, 0, 2, 3))
        return y, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        b, c, h, w = x.shape
        if dy.shape != (b, self.out_ch, h, w):
            raise ValueError(f"{self.name}: upstream gradient shape {dy.shape} mismatch")
        cols = _im2col(x)  # recomputed: cheaper than caching it
        dy2 = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(self.out_ch, b * h * w)
        self.weight.grad += (dy2 @ cols.T).reshape(self.weight.value.shape)
        self.bias.grad += dy2.sum(axis=1)
        wmat = self.weight.value.reshape(self.out_ch, self.in_ch * 9)
        return _col2im(wmat.T @ dy2, b, c, h, w)

    def params(self):
        return [self.weight, self.bias]


class BatchNorm:
    """Per-channel normalization to zero mean / unit variance.

    Train mode uses batch statistics (biased variance) and folds them into
    running statistics with momentum 0.9; eval mode uses the running
    statistics.  Scale and shift are learned and exempt from weight decay.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, name="norm"):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = Param(f"{name}.scale", np.ones(channels), decay=False)
        self.shift = Param(f"{name}.shift", np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.name = name

    def forward(self, x: np.ndarray, train: bool):
        x = check_tensor4(x)
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {c}")
        if train:
            n = b * h * w
            if n < 2:
                raise ValueError(f"{self.name}: batch statistics need more than one sample")
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mu = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        y = self.scale.value[None, :, None, None] * xhat + self.shift.value[None, :, None, None]
        return y, (xhat, inv, train)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        xhat, inv, train = cache
        self.scale.grad += np.sum(dy * xhat, axis=(0, 2, 3))
        self.shift.grad += np.sum(dy, axis=(0, 2, 3))
        s_inv = (self.scale.value * inv)[None, :, None, None]
        if not train:
            return dy * s_inv
        b, c, h, w = dy.shape
        n = b * h * w
        mean_dy = dy.mean(axis=(0, 2, 3))[None, :, None, None]
        mean_dy_xhat = (dy * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
        return s_inv * (dy - mean_dy - xhat * mean_dy_xhat)

    def params(self):
        return [self.scale, self.shift]

    def state(self):
        return [self.running_mean, self.running_var]


def relu_forward(x: np.ndarray):
    """max(0, x); the mask uses x > 0 so the subgradient at 0 is 0."""
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def l1_loss(u: np.ndarray, t: np.ndarray):
    """Mean absolute error with its subgradient; sign(0) = 0."""
    u = np.asarray(u, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if u.shape != t.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {t.shape}")
    diff = u - t
    loss = float(np.mean(np.abs(diff)))
    return loss, np.sign(diff) / diff.size


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    epochs: int = 20
    lr_decay: float = 0.5
    lr_decay_every: int = 5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad batch size or epoch count")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


def sgd_step(params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0005):
    """m <- momentum*m + grad + wd*param (wd only where decay applies);
    param <- param - lr*m.  Raises on non-finite gradients, naming the
    offending parameter."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {p.name}")
        g = p.grad + (weight_decay * p.value if p.decay else 0.0)
        p.momentum *= momentum
        p.momentum += g
        p.value -= lr * p.momentum
