"""Core image operations: discrete derivatives and their adjoint, noise
synthesis, quality metrics, and resampling.

Images are float64 numpy arrays in the nominal range [0, 255], shaped
(H, W) for a single channel or (C, H, W) channel-planar.  Gradient fields
stack the horizontal and vertical forward differences along a new axis:
(2, H, W) (or (C, 2, H, W)), index 0 = dx, index 1 = dy.

All functions are pure; randomness is confined to explicit seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8
DATA_RANGE = 255.0


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian noise: standard deviation in intensity units plus seed."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    bmp: float | None = None  # depth tasks only

    def row(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "bmp": self.bmp}


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate shape/finiteness and return the array as float64."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim not in (2, 3):
        raise ValueError(f"image must be (H, W) or (C, H, W), got shape {a.shape}")
    if a.size == 0:
        raise ValueError("image has zero size")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite samples")
    return a


def gradient(img: np.ndarray) -> np.ndarray:
    """Forward differences with replicate (Neumann) boundary.

    dx[i, j] = img[i, j+1] - img[i, j] (last column zero), dy likewise in
    the vertical direction.  Works on any array whose last two axes are the
    spatial ones; the result gains a length-2 axis before them.
    """
    a = np.asarray(img, dtype=np.float64)
    dx = np.zeros_like(a)
    dy = np.zeros_like(a)
    dx[..., :, :-1] = a[..., :, 1:] - a[..., :, :-1]
    dy[..., :-1, :] = a[..., 1:, :] - a[..., :-1, :]
    return np.stack([dx, dy], axis=-3)


def gradient_adjoint(v: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`gradient` (a negative divergence).

    The last column of the dx plane and last row of the dy plane are
    structurally zero in the range of the gradient and are ignored here,
    so <gradient(u), v> == <u, gradient_adjoint(v)> for arbitrary v.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-3] != 2:
        raise ValueError(f"gradient field must have a leading length-2 axis, got {v.shape}")
    vx = v[..., 0, :, :]
    vy = v[..., 1, :, :]
    out = np.zeros(vx.shape, dtype=np.float64)
    out[..., :, :-1] -= vx[..., :, :-1]
    out[..., :, 1:] += vx[..., :, :-1]
    out[..., :-1, :] -= vy[..., :-1, :]
    out[..., 1:, :] += vy[..., :-1, :]
    return out


def laplacian(img: np.ndarray) -> np.ndarray:
    """gradient_adjoint(gradient(img)): the 5-point Neumann Laplacian."""
    return gradient_adjoint(gradient(img))


def add_gaussian_noise(img: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """img + N(0, sigma^2) per sample, deterministic for a fixed seed.

    The output is intentionally not clipped to [0, 255]; clipping happens
    only at 8-bit export.
    """
    a = check_image(img)
    rng = np.random.default_rng(spec.seed)
    return a + rng.normal(0.0, spec.sigma, size=a.shape)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against a 255 peak.

    Identical inputs return +inf rather than raising.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    h, w = a.shape
    win = SSIM_WINDOW
    if h < win or w < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} SSIM window")
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    # All fully-contained win x win windows, stride 1; biased (population) moments.
    wa = np.lib.stride_tricks.sliding_window_view(a, (win, win))
    wb = np.lib.stride_tricks.sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM with an 8x8 uniform window, K1=0.01, K2=0.03, L=255.

    Multi-channel inputs are scored per channel and averaged.
    """
    a = check_image(a)
    b = check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_single(a, b)
    return float(np.mean([_ssim_single(ac, bc) for ac, bc in zip(a, b)]))


def bmp(pred: np.ndarray, truth: np.ndarray, delta: float = 3.0) -> float:
    """Bad matching percentage: percent of pixels with |pred - truth| > delta.

    Strict inequality, so an error of exactly delta does not count as bad.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth) > delta) * 100.0)


def metric_report(pred, truth, with_bmp: bool = False, delta: float = 3.0) -> MetricReport:
    return MetricReport(
        psnr=psnr(pred, truth),
        ssim=ssim(pred, truth),
        bmp=bmp(pred, truth, delta) if with_bmp else None,
    )


def _nearest_down(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"dimensions {h}x{w} not divisible by factor {factor}")
    return img[..., ::factor, ::factor].copy()


def _bilinear_axis_weights(n_out: int, n_in: int, factor: int):
    # align-corners-false: output sample centers at (i + 0.5)/factor - 0.5
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    return i0, i1, t


def _bilinear_up(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[-2:]
    r0, r1, tr = _bilinear_axis_weights(h * factor, h, factor)
    c0, c1, tc = _bilinear_axis_weights(w * factor, w, factor)
    rows = img[..., r0, :] * (1 - tr)[:, None] + img[..., r1, :] * tr[:, None]
    return rows[..., :, c0] * (1 - tc) + rows[..., :, c1] * tc


def resample(img: np.ndarray, factor: int, mode: str) -> np.ndarray:
    """Integer-factor resampling.

    mode 'nearest-down' keeps the top-left sample of each factor x factor
    block (dimensions must divide); mode 'bilinear-up' interpolates with
    the align-corners-false convention, which is shift-consistent with
    nearest-down.
    """
    a = check_image(img)
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return a.copy()
    if mode == "nearest-down":
        return _nearest_down(a, factor)
    if mode == "bilinear-up":
        return _bilinear_up(a, factor)
    raise ValueError(f"unknown resample mode {mode!r}")
