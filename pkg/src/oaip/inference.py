"""Whole-image change maps: per-tap feature differences, fusion, Otsu, kappa.

Everything up to the per-tap squared-difference sums is integer.  The final
fusion and thresholding are one-shot post-processing in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .network import SiameseState, forward_branch
from .tensor import Q8Batch, Q8Tensor, align_pair, quantize


def layer_difference(a, b) -> np.ndarray:
    """Channel-mean squared difference of two C x H x W integer feature maps."""
    if isinstance(a, Q8Batch):
        a, b = a[0], b[0]
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    x, y, e = align_pair(a.mantissas, a.exponent, b.mantissas, b.exponent)
    d = x - y
    sq = np.einsum("chw,chw->hw", d, d)
    return np.ldexp(sq.astype(np.float64), 2 * e) / a.shape[0]


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling of a 2-D array (align_corners off)."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi, f = _axis_weights(img.shape[0], height)
    rows = img[lo] * (1 - f)[:, None] + img[hi] * f[:, None]
    lo, hi, f = _axis_weights(img.shape[1], width)
    return rows[:, lo] * (1 - f) + rows[:, hi] * f


def fuse(maps: list[np.ndarray], alphas, out_shape: tuple[int, int]) -> np.ndarray:
    """Weighted sum at the first map's resolution, then upscaled to ``out_shape``."""
    if len(maps) != len(alphas):
        raise ValueError(f"{len(maps)} maps for {len(alphas)} weights")
    base = maps[0].shape
    total = np.zeros(base, dtype=np.float64)
    for m, a in zip(maps, alphas):
        if m.shape[0] > base[0] or m.shape[1] > base[1]:
            raise ValueError(f"map {m.shape} is larger than the base map {base}")
        total += a * (m if m.shape == base else bilinear_resize(m, *base))
    return bilinear_resize(total, *out_shape)


def normalize_levels(img: np.ndarray) -> np.ndarray:
    """Min-max scale to integer grey levels 0..255; a constant map becomes all zeros."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("difference map has non-finite values")
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros(img.shape, dtype=np.int64)
    return np.floor((img - lo) / (hi - lo) * 255.0 + 0.5).astype(np.int64)


def otsu_threshold(hist) -> int:
    """Threshold t maximizing between-class variance of levels <= t vs > t.

    Exact integer comparison; ties keep the lowest t; 0 when no split separates anything.
    """
    h = [int(v) for v in hist]
    total = sum(h)
    weighted = sum(i * v for i, v in enumerate(h))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(len(h) - 1):
        n0 += h[t]
        s0 += t * h[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance * total^2 = (n0*s1 - n1*s0)^2 / (n0*n1)
        num = (n0 * (weighted - s0) - n1 * s0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def otsu(img: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
    """Returns (threshold, binary map, normalized 0..255 map)."""
    levels = normalize_levels(img)
    hist = np.bincount(levels.ravel(), minlength=256)
    t = otsu_threshold(hist)
    return t, (levels > t).astype(np.uint8), levels


@dataclass(frozen=True)
class MetricsReport:
    n_a: int
    n_c: int
    N_d: int
    N_c: int
    N_t: int
    R_a: float
    R_p: float
    R_r: float
    p_e: float
    Ka: float

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))


def metrics(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    p = pred.astype(bool)
    g = truth.astype(bool)
    n_t = int(p.size)
    n_a = int(np.count_nonzero(p & g))
    n_c = int(np.count_nonzero(~p & ~g))
    n_d = int(np.count_nonzero(p))
    n_g = int(np.count_nonzero(g))
    r_a = (n_a + n_c) / n_t
    r_p = n_a / n_d if n_d else 0.0
    r_r = n_a / n_g if n_g else 0.0
    p_e = (n_d * n_g + (n_t - n_d) * (n_t - n_g)) / (n_t * n_t)
    ka = (r_a - p_e) / (1 - p_e) if p_e != 1 else 0.0
    return MetricsReport(n_a, n_c, n_d, n_g, n_t, r_a, r_p, r_r, p_e, ka)


# -- whole-image and tiled inference ------------------------------------------------


def _to_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    return np.moveaxis(img, -1, 0)


def tap_strides(state: SiameseState) -> list[int]:
    out, stride = [], 1
    for spec in state.layers:
        if spec.frn_tap:
            out.append(stride)
        if spec.pool_after:
            stride *= 2
    return out


def _maps_for(state: SiameseState, xa: Q8Tensor, xb: Q8Tensor) -> list[np.ndarray]:
    fa = forward_branch(state, 0, xa)
    fb = forward_branch(state, 1, xb)
    return [layer_difference(a, b) for a, b in zip(fa.taps, fb.taps)]


def difference_maps(state: SiameseState, pre: np.ndarray, post: np.ndarray, tile: int | None = None) -> list[np.ndarray]:
    """Per-tap difference maps for an H x W x C image pair.

    Each image is quantized once as a whole.  With ``tile`` the image is
    processed in tile-sized cores (rounded up to the network's total stride)
    with a 32 px context margin, and the core regions are stitched.
    """
    if pre.shape != post.shape:
        raise ValueError(f"image shapes differ: {pre.shape} vs {post.shape}")
    xa, xb = quantize(_to_chw(pre)), quantize(_to_chw(post))
    if tile is None:
        return _maps_for(state, xa, xb)
    strides = tap_strides(state)
    unit = max(2 ** sum(s.pool_after for s in state.layers), 1)
    tile = max(unit, -(-int(tile) // unit) * unit)
    margin = -(-32 // unit) * unit
    height, width = pre.shape[:2]
    out = [np.zeros((height // s, width // s)) for s in strides]
    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            y1, x1 = min(y0 + tile, height), min(x0 + tile, width)
            cy0, cx0 = max(y0 - margin, 0), max(x0 - margin, 0)
            cy1, cx1 = min(y1 + margin, height), min(x1 + margin, width)
            ca = Q8Tensor(xa.mantissas[:, cy0:cy1, cx0:cx1], xa.exponent)
            cb = Q8Tensor(xb.mantissas[:, cy0:cy1, cx0:cx1], xb.exponent)
            maps = _maps_for(state, ca, cb)
            for full, part, s in zip(out, maps, strides):
                oy, ox = (y0 - cy0) // s, (x0 - cx0) // s
                ty0, tx0 = y0 // s, x0 // s
                ty1 = min(y1 // s if y1 < height else full.shape[0], ty0 + part.shape[0] - oy)
                tx1 = min(x1 // s if x1 < width else full.shape[1], tx0 + part.shape[1] - ox)
                full[ty0:ty1, tx0:tx1] = part[oy:oy + ty1 - ty0, ox:ox + tx1 - tx0]
    return out


@dataclass
class Detection:
    difference: np.ndarray
    levels: np.ndarray
    threshold: int
    change_map: np.ndarray


def detect_changes(state, pre, post, alphas, tile: int | None = None, maps_fn=difference_maps) -> Detection:
    maps = maps_fn(state, pre, post, tile)
    diff = fuse(maps, alphas, pre.shape[:2])
    t, binary, levels = otsu(diff)
    return Detection(diff, levels, t, binary)


def changed_fraction(binary: np.ndarray) -> float:
    return float(np.count_nonzero(binary)) / max(binary.size, 1)

