"""Training-sample selection by patch-level affinity-matrix comparison.

Both images are cut into the same s x s grid.  Each image gets a Q x Q
affinity matrix over its patch means; patches whose affinity rows differ the
most between the two images are the likely changes (positives), those that
differ the least are the likely unchanged pairs (negatives).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import Q8Batch, quantize_batch

log = logging.getLogger(__name__)

DEFAULT_N_H = 20
DEFAULT_N_L = 30


@dataclass(frozen=True)
class PatchGrid:
    size: int
    rows: int
    cols: int

    @classmethod
    def for_image(cls, height: int, width: int, size: int) -> "PatchGrid":
        if size < 1:
            raise ValueError("patch size must be positive")
        return cls(size, height // size, width // size)

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def position(self, i: int) -> tuple[int, int]:
        return divmod(i, self.cols)

    def extract(self, img: np.ndarray, i: int) -> np.ndarray:
        r, c = self.position(i)
        s = self.size
        return img[r * s:(r + 1) * s, c * s:(c + 1) * s]


def patch_means(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Mean over pixels and channels of every patch (H x W or H x W x C input)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    s = grid.size
    crop = img[: grid.rows * s, : grid.cols * s]
    blocks = crop.reshape(grid.rows, s, grid.cols, s, -1)
    return blocks.mean(axis=(1, 3, 4)).reshape(-1)


def affinity(means: np.ndarray) -> np.ndarray:
    """exp(-d^2 / h^2) with d = |M_i - M_j| and h = max d; all ones when h = 0."""
    m = np.asarray(means, dtype=np.float64)
    d = np.abs(m[:, None] - m[None, :])
    h = d.max() if d.size else 0.0
    if h == 0:
        return np.ones_like(d)
    r = d / h
    return np.exp(-(r * r))


def change_scores(a_pre: np.ndarray, a_post: np.ndarray) -> np.ndarray:
    if a_pre.shape != a_post.shape:
        raise ValueError("affinity matrices must have the same shape")
    return np.abs(a_pre - a_post).sum(axis=1)


@dataclass
class SampleSet:
    positives: np.ndarray
    negatives: np.ndarray
    pre: Q8Batch
    post: Q8Batch

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.positives, self.negatives])

    @property
    def signs(self) -> np.ndarray:
        """-1 for positive (changed) samples, +1 for negative (unchanged) ones."""
        return np.concatenate([-np.ones(len(self.positives), np.int64), np.ones(len(self.negatives), np.int64)])

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)


def rank_patches(scores: np.ndarray, n_h: int, n_l: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-n_h scores as positives, bottom-n_l of the rest as negatives.

    Ties go to the lower patch index in both rankings.
    """
    q = len(scores)
    if q == 0:
        raise ValueError("no patches: the image is smaller than one patch")
    if n_h + n_l > q:
        log.warning("only %d patches for n_h=%d + n_l=%d samples; using all of them", q, n_h, n_l)
    idx = np.arange(q)
    desc = np.lexsort((idx, -scores))
    pos = desc[: min(n_h, q)]
    rest = np.setdiff1d(idx, pos)
    asc = rest[np.lexsort((rest, scores[rest]))]
    neg = asc[: min(n_l, len(rest))]
    return pos.astype(np.int64), neg.astype(np.int64)


def select_samples(
    scores: np.ndarray,
    n_h: int,
    n_l: int,
    pre: np.ndarray,
    post: np.ndarray,
    grid: PatchGrid,
) -> SampleSet:
    """Cut out the ranked patch pairs (H x W x C images), channel-first.

    Each extracted block is quantized on its own.
    """
    pos, neg = rank_patches(np.asarray(scores, dtype=np.float64), n_h, n_l)
    order = np.concatenate([pos, neg])

    def blocks(img):
        return quantize_batch(np.moveaxis(grid.extract(img, int(i)), -1, 0) for i in order)

    return SampleSet(pos, neg, blocks(pre), blocks(post))


def sample_pairs(
    pre: np.ndarray,
    post: np.ndarray,
    patch_size: int,
    n_h: int = DEFAULT_N_H,
    n_l: int = DEFAULT_N_L,
) -> SampleSet:
    """Grid, score and select in one call."""
    if pre.shape[:2] != post.shape[:2]:
        raise ValueError(f"image sizes differ: {pre.shape[:2]} vs {post.shape[:2]}")
    grid = PatchGrid.for_image(pre.shape[0], pre.shape[1], patch_size)
    scores = change_scores(affinity(patch_means(pre, grid)), affinity(patch_means(post, grid)))
    return select_samples(scores, n_h, n_l, pre, post, grid)
