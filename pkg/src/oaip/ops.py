"""Integer layer kernels: 3x3 convolution (forward, input gradient, weight
gradient), ReLU, 2x2 max-pooling and L1 filter response normalization.

Convolution accumulators are computed exactly.  The products are formed by
a float BLAS GEMM whose inner dimension is chunked so that every partial sum
is an integer below 2**24 (float32) or 2**53 (float64); such sums are exact
in IEEE arithmetic regardless of summation order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Q8Batch,
    Q8Tensor,
    Q32Tensor,
    _maxabs,
    bitwidth,
    effective_bitwidth,
    rshift_round,
    shift_round,
    shift_round_batch,
)

_F32_EXACT = 1 << 24
_F64_EXACT = 1 << 53
INT32_MAX = (1 << 31) - 1


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if (self.kernel, self.stride, self.padding) != (3, 1, 1):
            raise ValueError("only 3x3 / stride 1 / padding 1 convolutions are supported")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @classmethod
    def of(cls, w: Q8Tensor) -> "ConvGeometry":
        return cls(w.shape[1], w.shape[0])


@dataclass(frozen=True, eq=False)
class PoolIndices:
    """Argmax position (0..3, row-major inside the 2x2 window) per output cell."""

    argmax: np.ndarray
    in_shape: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class FRNCache:
    nu: np.ndarray
    in_exponents: np.ndarray


# -- exact integer GEMM ------------------------------------------------------


def exact_matmul(a: np.ndarray, b: np.ndarray, bound: int) -> np.ndarray:
    """Integer-exact ``a @ b`` for integer-valued float operands.

    ``bound`` must be >= max|a| * max|b|.  Returns int64.
    """
    m, k = a.shape
    n = b.shape[1]
    if bound == 0 or k == 0:
        return np.zeros((m, n), dtype=np.int64)
    if bound >= _F64_EXACT:
        raise OverflowError("operand magnitudes too large for exact accumulation")
    if bound * k < _F32_EXACT:
        return np.matmul(a.astype(np.float32, copy=False), b.astype(np.float32, copy=False)).astype(np.int64)
    if bound < _F32_EXACT:
        dtype, limit = np.float32, _F32_EXACT
    else:
        dtype, limit = np.float64, _F64_EXACT
    if bound * k < limit:
        return np.matmul(a.astype(dtype, copy=False), b.astype(dtype, copy=False)).astype(np.int64)
    chunk = (limit - 1) // bound
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    out = np.zeros((m, n), dtype=np.int64)
    for k0 in range(0, k, chunk):
        out += np.matmul(a[:, k0:k0 + chunk], b[k0:k0 + chunk]).astype(np.int64)
    return out


def im2col(m: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, 9*C) patches for a zero-padded 3x3 window.

    Columns are ordered (ky, kx, channel).
    """
    n, c, h, w = m.shape
    p = np.zeros((n, h + 2, w + 2, c), dtype=dtype)
    p[:, 1:-1, 1:-1, :] = m.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, 9, c), dtype=dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, :, k, :] = p[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(O, C, 3, 3) -> (9*C, O) matching the im2col column order."""
    o = w.shape[0]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, o), dtype=np.float32)


def conv_acc(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact int64 accumulator of a zero-padded 3x3 correlation.

    a: (N, C, H, W) integers, w: (O, C, 3, 3) integers -> (N, O, H, W).
    """
    n, c, h, wd = a.shape
    o = w.shape[0]
    if w.shape[1] != c:
        raise ValueError(f"input has {c} channels, weights expect {w.shape[1]}")
    bound = _maxabs(a) * _maxabs(w)
    cols = im2col(a)
    acc = exact_matmul(cols, _kernel_matrix(w), bound)
    return np.ascontiguousarray(acc.reshape(n, h, wd, o).transpose(0, 3, 1, 2))


def conv_acc_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Full correlation of an output gradient with the weights -> input-shaped accumulator."""
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv_acc(g, wt)


def conv_acc_weight(a: np.ndarray, g: np.ndarray, shifts: np.ndarray | None = None) -> np.ndarray:
    """Sum over samples and pixels of g * a-window, optionally scaling sample n by 2**shifts[n].

    a: (N, C, H, W), g: (N, O, H, W) -> (O, C, 3, 3) int64.
    """
    n, c, h, wd = a.shape
    o = g.shape[1]
    if g.shape[0] != n or g.shape[2:] != (h, wd):
        raise ValueError(f"gradient shape {g.shape} does not match activation {a.shape}")
    cols = im2col(a)
    gm = g.astype(np.float32).transpose(1, 0, 2, 3).reshape(o, n * h * wd)
    top = 0
    if shifts is not None and np.any(shifts):
        top = int(np.max(shifts))
        scale = np.ldexp(np.float32(1), np.repeat(np.asarray(shifts, dtype=np.int64), h * wd))
        gm = gm * scale.astype(np.float32)
    bound = _maxabs(a) * _maxabs(g) << top
    acc = exact_matmul(gm, cols, bound)
    return np.ascontiguousarray(acc.reshape(o, 3, 3, c).transpose(0, 3, 1, 2))


# -- convolution layers --------------------------------------------------------


def _as4d(m: np.ndarray) -> np.ndarray:
    if m.ndim == 3:
        return m[None]
    if m.ndim != 4:
        raise ValueError(f"expected C x H x W or N x C x H x W, got shape {m.shape}")
    return m


def _check_geometry(w: Q8Tensor, geometry: ConvGeometry | None) -> None:
    if w.mantissas.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"weights must be Cout x Cin x 3 x 3, got {w.shape}")
    if geometry is not None and (geometry.out_channels, geometry.in_channels) != w.shape[:2]:
        raise ValueError(f"weights {w.shape} do not match {geometry}")


def _check_int32(acc: np.ndarray) -> None:
    if acc.size and int(np.abs(acc).max()) > INT32_MAX:
        raise OverflowError("accumulator exceeds the 32-bit range")


def conv_fwd(a: Q8Tensor, w: Q8Tensor, geometry: ConvGeometry | None = None) -> tuple[Q8Tensor, Q32Tensor]:
    """Forward convolution; output exponent = e_a + e_w + B."""
    _check_geometry(w, geometry)
    m = _as4d(a.mantissas)
    acc = conv_acc(m, w.mantissas)
    _check_int32(acc)
    if a.mantissas.ndim == 3:
        acc = acc[0]
    acc32 = Q32Tensor(acc, a.exponent + w.exponent)
    out = shift_round(acc32, 7)
    assert out.exponent == a.exponent + w.exponent + max(effective_bitwidth(acc32) - 7, 0)
    return out, acc32


def conv_bwd_input(ga: Q8Tensor, w: Q8Tensor, geometry: ConvGeometry | None = None) -> Q8Tensor:
    """Input gradient; output exponent = e_ga + e_w + B."""
    _check_geometry(w, geometry)
    m = _as4d(ga.mantissas)
    if m.shape[1] != w.shape[0]:
        raise ValueError(f"gradient has {m.shape[1]} channels, layer has {w.shape[0]} filters")
    acc = conv_acc_input(m, w.mantissas)
    _check_int32(acc)
    if ga.mantissas.ndim == 3:
        acc = acc[0]
    return shift_round(Q32Tensor(acc, ga.exponent + w.exponent), 7)


def conv_grad_weight(a: Q8Tensor, ga: Q8Tensor, b_gw: int, geometry: ConvGeometry | None = None) -> Q8Tensor:
    """Weight gradient shifted to at most ``b_gw`` bits; exponent = e_a + e_ga + B_gw."""
    if not 0 < b_gw <= 7:
        raise ValueError("b_gw must be in (0, 7]")
    am, gm = _as4d(a.mantissas), _as4d(ga.mantissas)
    if geometry is not None and (gm.shape[1], am.shape[1]) != (geometry.out_channels, geometry.in_channels):
        raise ValueError("activation/gradient channels do not match geometry")
    acc = conv_acc_weight(am, gm)
    return shift_round(Q32Tensor(acc, a.exponent + ga.exponent), b_gw)


def conv_fwd_batch(a: Q8Batch, w: Q8Tensor) -> Q8Batch:
    acc = conv_acc(a.mantissas, w.mantissas)
    return shift_round_batch(acc, a.exponents + w.exponent, 7)


def conv_bwd_input_batch(ga: Q8Batch, w: Q8Tensor) -> Q8Batch:
    acc = conv_acc_input(ga.mantissas, w.mantissas)
    return shift_round_batch(acc, ga.exponents + w.exponent, 7)


def conv_grad_weight_batch(a: Q8Batch, ga: Q8Batch, b_gw: int) -> Q8Tensor:
    """Weight gradient summed over a batch whose samples carry their own exponents.

    Per-sample accumulators are aligned to a common exponent and summed in
    int64 before the single ``b_gw`` shift.  Samples within a wide window
    below the largest exponent are aligned by exact left shifts; anything
    further below is right-shifted with rounding.
    """
    if not 0 < b_gw <= 7:
        raise ValueError("b_gw must be in (0, 7]")
    n, c, h, wd = a.shape
    o = ga.shape[1]
    exps = a.exponents + ga.exponents
    live = [i for i in range(n) if np.any(a.mantissas[i]) and np.any(ga.mantissas[i])]
    if not live:
        return Q8Tensor(np.zeros((o, c, 3, 3), dtype=np.int8), int(exps.max()) if n else 0)
    live = np.array(live)
    e_live = exps[live]
    window = min(38, 61 - 14 - bitwidth(h * wd + 1) - bitwidth(len(live) + 1))
    e_top = int(e_live.max())
    e_t = max(int(e_live.min()), e_top - window)
    near = live[e_live >= e_t]
    far = live[e_live < e_t]
    acc = conv_acc_weight(a.mantissas[near], ga.mantissas[near], exps[near] - e_t)
    for i in far:
        part = conv_acc_weight(a.mantissas[i:i + 1], ga.mantissas[i:i + 1])
        acc += rshift_round(part, e_t - int(exps[i]))
    return shift_round(Q32Tensor(acc, e_t), b_gw)


# -- elementwise and pooling -------------------------------------------------


def _like(t, m: np.ndarray):
    if isinstance(t, Q8Batch):
        return Q8Batch(m, t.exponents)
    return Q8Tensor(m, t.exponent)


def relu(t):
    mask = t.mantissas > 0
    return _like(t, np.where(mask, t.mantissas, 0).astype(np.int8)), mask


def relu_bwd(g, mask: np.ndarray):
    return _like(g, np.where(mask, g.mantissas, 0).astype(np.int8))


def maxpool(t):
    """2x2 / stride 2 max over mantissas; odd trailing rows/columns are cropped."""
    m = t.mantissas
    *lead, h, w = m.shape
    h2, w2 = h // 2, w // 2
    win = m[..., : 2 * h2, : 2 * w2].reshape(*lead, h2, 2, w2, 2)
    flat = np.swapaxes(win, -3, -2).reshape(*lead, h2, w2, 4)
    arg = flat.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(flat, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return _like(t, out), PoolIndices(arg, tuple(m.shape))


def maxpool_bwd(g, idx: PoolIndices):
    gm = g.mantissas
    *lead, h2, w2 = gm.shape
    flat = np.zeros((*lead, h2, w2, 4), dtype=np.int8)
    np.put_along_axis(flat, idx.argmax[..., None].astype(np.intp), gm[..., None], axis=-1)
    win = np.swapaxes(flat.reshape(*lead, h2, w2, 2, 2), -3, -2).reshape(*lead, 2 * h2, 2 * w2)
    out = np.zeros(idx.in_shape, dtype=np.int8)
    out[..., : 2 * h2, : 2 * w2] = win
    return _like(g, out)


# -- filter response normalization --------------------------------------------


def frn_nu(m: np.ndarray) -> np.ndarray:
    """Per-channel floor(mean |m|) with a floor of 1; m is (N, C, H, W)."""
    n, c, h, w = m.shape
    s = np.abs(m.astype(np.int64)).reshape(n, c, h * w).sum(axis=2)
    return np.maximum(s // (h * w), 1)


def _scale_by_nu(m: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """round(m * 128 / nu) per channel, half away from zero, in int64."""
    mag = np.abs(m.astype(np.int64))
    d = nu[:, :, None, None]
    q = (256 * mag + d) // (2 * d)
    return np.where(m < 0, -q, q)


def frn_fwd(t: Q8Tensor) -> tuple[Q8Tensor, FRNCache]:
    """y = x / mean|x| per channel; output exponent = B - 7."""
    m = _as4d(t.mantissas)
    nu = frn_nu(m)
    q = _scale_by_nu(m, nu)
    if t.mantissas.ndim == 3:
        q = q[0]
    out = shift_round(Q32Tensor(q, -7), 7)
    return out, FRNCache(nu, np.array([t.exponent]))


def frn_bwd(g: Q8Tensor, cache: FRNCache) -> Q8Tensor:
    """Gradient through FRN with the normalizer held constant."""
    m = _as4d(g.mantissas)
    q = _scale_by_nu(m, cache.nu)
    if g.mantissas.ndim == 3:
        q = q[0]
    return shift_round(Q32Tensor(q, g.exponent - int(cache.in_exponents[0]) - 7), 7)


def frn_fwd_batch(t: Q8Batch) -> tuple[Q8Batch, FRNCache]:
    nu = frn_nu(t.mantissas)
    q = _scale_by_nu(t.mantissas, nu)
    out = shift_round_batch(q, np.full(len(t), -7), 7)
    return out, FRNCache(nu, t.exponents.copy())


def frn_bwd_batch(g: Q8Batch, cache: FRNCache) -> Q8Batch:
    q = _scale_by_nu(g.mantissas, cache.nu)
    return shift_round_batch(q, g.exponents - cache.in_exponents - 7, 7)
