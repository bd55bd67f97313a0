"""Seeded synthetic image pairs with a known change region."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import bilinear_resize


@dataclass
class SyntheticPair:
    pre: np.ndarray
    post: np.ndarray
    truth: np.ndarray
    region: tuple[int, int, int, int]


def smooth_noise(rng: np.random.Generator, size: int, channels: int = 3, octaves: int = 4) -> np.ndarray:
    """Sum of bilinearly upsampled random grids, scaled to [0, 255]."""
    out = np.zeros((size, size, channels))
    for o in range(octaves):
        cells = 4 * 2 ** o
        for c in range(channels):
            out[:, :, c] += bilinear_resize(rng.standard_normal((cells, cells)), size, size) / 2 ** o
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) * 255.0


def channel_remap(img: np.ndarray, gammas=(0.6, 1.0, 1.6)) -> np.ndarray:
    """Monotone per-channel gamma curve, a stand-in for a different sensor response."""
    x = np.clip(img / 255.0, 0.0, 1.0)
    return np.stack([255.0 * x[:, :, c] ** g for c, g in enumerate(gammas)], axis=-1)


def make_pair(
    seed: int,
    size: int = 256,
    region: int = 48,
    cell: int = 4,
    noise: float = 10.0,
    gammas=(0.6, 1.0, 1.6),
) -> SyntheticPair:
    """Smooth pre image; post = remapped pre with a checkerboard block pasted in."""
    rng = np.random.default_rng(seed)
    pre = smooth_noise(rng, size)
    post = channel_remap(pre, gammas)
    y0, x0 = (int(v) for v in rng.integers(region // 2, size - region - region // 2, size=2))
    yy, xx = np.mgrid[0:region, 0:region]
    board = (((yy // cell) + (xx // cell)) % 2) * 255.0
    patch = board[:, :, None] + rng.normal(0.0, noise, (region, region, 3))
    post[y0:y0 + region, x0:x0 + region] = np.clip(patch, 0.0, 255.0)
    truth = np.zeros((size, size), dtype=np.uint8)
    truth[y0:y0 + region, x0:x0 + region] = 1
    return SyntheticPair(pre.astype(np.float32), post.astype(np.float32), truth, (y0, x0, region, region))
