"""Offline data synthesis: a grayscale photo corpus tiled from bundled
scikit-image samples, procedurally generated depth/intensity scene pairs,
and the degradation pipelines (noise, low-resolution simulation)."""

from __future__ import annotations

import numpy as np

from .images import NoiseSpec, add_gaussian_noise, resample

# bundled with scikit-image (no download); mixed photographic content
_BUNDLED = (
    "camera",
    "moon",
    "coins",
    "page",
    "text",
    "clock",
    "cell",
    "brick",
    "grass",
    "gravel",
    "astronaut",
    "coffee",
    "rocket",
    "cat",
    "immunohistochemistry",
    "hubble_deep_field",
)


def to_gray255(arr: np.ndarray) -> np.ndarray:
    """Any bundled sample -> float64 grayscale in [0, 255]."""
    a = np.asarray(arr)
    if a.dtype == bool:
        a = a.astype(np.float64) * 255.0
    else:
        a = a.astype(np.float64)
    if a.ndim == 3:
        if a.shape[2] == 4:
            a = a[:, :, :3]
        a = a @ np.array([0.299, 0.587, 0.114])
    if a.max() <= 1.0:
        a = a * 255.0
    return a


def gray_tile_corpus(tile: int = 128, limit: int | None = None, seed: int = 0,
                     min_std: float = 8.0) -> list[np.ndarray]:
    """Non-overlapping tile x tile grayscale crops of the bundled photos,
    shuffled deterministically; near-constant tiles are dropped."""
    from skimage import data as skdata

    tiles = []
    for name in _BUNDLED:
        img = to_gray255(getattr(skdata, name)())
        h, w = img.shape
        for i in range(h // tile):
            for j in range(w // tile):
                t = img[i * tile : (i + 1) * tile, j * tile : (j + 1) * tile]
                if t.std() >= min_std:
                    tiles.append(np.ascontiguousarray(t))
    rng = np.random.default_rng(seed)
    rng.shuffle(tiles)
    if limit is not None:
        tiles = tiles[:limit]
    return tiles


def degrade_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    return add_gaussian_noise(img, NoiseSpec(sigma=sigma, seed=seed))


def sr_input(depth: np.ndarray, factor: int) -> np.ndarray:
    """Low-resolution simulation: nearest-neighbor downsample then bilinear
    upsample back onto the original grid."""
    lr = resample(depth, factor, "nearest-down")
    return resample(lr, factor, "bilinear-up")


def synthetic_depth_scene(size: int = 128, seed: int = 0, n_shapes: int = 7):
    """A piecewise-smooth depth map plus a structurally aligned intensity
    image (per-region albedo, texture, and shading); both in [0, 255]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size

    depth = 200.0 - 60.0 * (0.4 * xx + 0.6 * yy)  # background: receding plane
    guide = 120.0 + 50.0 * xx - 30.0 * yy

    for _ in range(n_shapes):
        kind = rng.choice(["ellipse", "rect"])
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        d_level = rng.uniform(20.0, 235.0)
        albedo = rng.uniform(40.0, 235.0)
        slope = rng.uniform(-25.0, 25.0, size=2)
        if kind == "ellipse":
            ry, rx = rng.uniform(0.08, 0.28, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        else:
            hy, hx = rng.uniform(0.07, 0.25, size=2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        plane = d_level + slope[0] * (yy - cy) + slope[1] * (xx - cx)
        depth = np.where(mask, plane, depth)
        texture = rng.uniform(2.0, 12.0) * np.sin(
            2 * np.pi * rng.uniform(2, 9) * (xx * rng.normal() + yy * rng.normal())
        )
        guide = np.where(mask, albedo + texture, guide)

    guide = guide + rng.normal(0.0, 2.0, size=guide.shape)  # sensor-ish grain
    return np.clip(depth, 0, 255), np.clip(guide, 0, 255)
