"""Block-exponent integer tensors.

A tensor is an array of small signed integer mantissas plus one shared
power-of-two exponent.  All scaling in the training engine happens through
the exponent; mantissas only ever see shifts, integer products and sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

MANTISSA_MAX = 127
_WIDE_LIMIT = 1 << 63


def bitwidth(maxabs: int) -> int:
    """ceil(log2(maxabs)) for maxabs >= 1; 0 for 0 and 1."""
    maxabs = int(maxabs)
    if maxabs <= 1:
        return 0
    return (maxabs - 1).bit_length()


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def rshift_round(values, shift) -> np.ndarray:
    """Arithmetic right shift of magnitudes with round-half-away-from-zero.

    Adds the highest discarded bit back in, then restores the sign.
    ``shift`` may be a scalar or broadcast against ``values``.
    """
    v = np.asarray(values, dtype=np.int64)
    if np.ndim(shift) == 0:
        s = min(int(shift), 62)
        if s < 0:
            raise ValueError("shift must be non-negative")
        if s == 0:
            return v.copy()
        mag = np.abs(v)
        mag += 1 << (s - 1)
        mag >>= s
        return np.where(v < 0, -mag, mag)
    s = np.minimum(np.asarray(shift, dtype=np.int64), 62)
    if np.any(s < 0):
        raise ValueError("shift must be non-negative")
    half = np.where(s > 0, np.left_shift(np.int64(1), np.maximum(s - 1, 0)), 0)
    mag = (np.abs(v) + half) >> s
    return np.where(v < 0, -mag, mag)


def saturate(values, limit: int = MANTISSA_MAX) -> np.ndarray:
    return np.clip(values, -limit, limit)


def _maxabs(m: np.ndarray) -> int:
    if m.size == 0:
        return 0
    return max(int(m.max()), -int(m.min()))


@dataclass(frozen=True, eq=False)
class Q8Tensor:
    """int8 mantissas sharing one exponent: value_i = mantissas[i] * 2**exponent."""

    mantissas: np.ndarray
    exponent: int

    def __post_init__(self):
        m = np.asarray(self.mantissas)
        if m.dtype != np.int8:
            if m.size and (m.min() < -MANTISSA_MAX or m.max() > MANTISSA_MAX):
                raise ValueError("mantissa out of [-127, 127]")
            m = m.astype(np.int8)
        elif m.size and m.min() == -128:
            raise ValueError("mantissa -128 is not allowed")
        object.__setattr__(self, "mantissas", m)
        object.__setattr__(self, "exponent", int(self.exponent))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mantissas.shape

    @classmethod
    def zeros(cls, shape) -> "Q8Tensor":
        return cls(np.zeros(shape, dtype=np.int8), 0)

    def is_zero(self) -> bool:
        return not np.any(self.mantissas)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Q8Tensor):
            return NotImplemented
        return (
            self.exponent == other.exponent
            and self.mantissas.shape == other.mantissas.shape
            and bool(np.array_equal(self.mantissas, other.mantissas))
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"Q8Tensor(shape={self.shape}, exponent={self.exponent})"


@dataclass(frozen=True, eq=False)
class Q32Tensor:
    """Wide integer accumulator with an exponent.

    Convolution accumulators always fit in int32; the storage dtype is int64
    so batch sums can stay in the same type.
    """

    mantissas: np.ndarray
    exponent: int

    def __post_init__(self):
        object.__setattr__(self, "mantissas", np.asarray(self.mantissas, dtype=np.int64))
        object.__setattr__(self, "exponent", int(self.exponent))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mantissas.shape


@dataclass(eq=False)
class Q8Batch:
    """A stack of per-sample Q8 tensors, each with its own exponent.

    Kernels process the whole stack in one pass; the result is identical to
    running them on every sample separately.
    """

    mantissas: np.ndarray
    exponents: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mantissas)
        if m.dtype != np.int8:
            if m.size and (m.min() < -MANTISSA_MAX or m.max() > MANTISSA_MAX):
                raise ValueError("mantissa out of [-127, 127]")
            m = m.astype(np.int8)
        self.mantissas = m
        self.exponents = np.asarray(self.exponents, dtype=np.int64).reshape(-1)
        if self.exponents.shape[0] != m.shape[0]:
            raise ValueError("one exponent per sample required")

    def __len__(self) -> int:
        return self.mantissas.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mantissas.shape

    def __getitem__(self, i: int) -> Q8Tensor:
        return Q8Tensor(self.mantissas[i], int(self.exponents[i]))

    def take(self, idx) -> "Q8Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Q8Batch(self.mantissas[idx], self.exponents[idx])

    @classmethod
    def stack(cls, tensors: Sequence[Q8Tensor]) -> "Q8Batch":
        return cls(
            np.stack([t.mantissas for t in tensors]),
            np.array([t.exponent for t in tensors], dtype=np.int64),
        )

    def unstack(self) -> list[Q8Tensor]:
        return [self[i] for i in range(len(self))]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Q8Batch):
            return NotImplemented
        return bool(
            np.array_equal(self.mantissas, other.mantissas)
            and np.array_equal(self.exponents, other.exponents)
        )

    __hash__ = None


def quantize(x) -> Q8Tensor:
    """Map a real tensor to int8 mantissas with a power-of-two exponent.

    The exponent is ceil(log2(max|x|)) - 7, so the largest magnitude lands in
    (64, 128] before saturation.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise ValueError(f"cannot quantize non-finite value at index {tuple(int(i) for i in bad)}")
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak == 0.0:
        return Q8Tensor(np.zeros(x.shape, dtype=np.int8), 0)
    frac, k = math.frexp(peak)
    e_real = k - 1 if frac == 0.5 else k
    e = e_real - 7
    m = saturate(round_half_away(np.ldexp(x, -e)))
    return Q8Tensor(m.astype(np.int8), e)


def quantize_batch(samples: Iterable) -> Q8Batch:
    return Q8Batch.stack([quantize(s) for s in samples])


def dequantize(t) -> np.ndarray:
    if isinstance(t, Q8Batch):
        shape = (-1,) + (1,) * (t.mantissas.ndim - 1)
        return np.ldexp(t.mantissas.astype(np.float64), t.exponents.reshape(shape))
    return np.ldexp(np.asarray(t.mantissas, dtype=np.float64), t.exponent)


def effective_bitwidth(t) -> int:
    """Bits needed for the largest magnitude of a tensor (0 for all-zero)."""
    m = t.mantissas if hasattr(t, "mantissas") else np.asarray(t)
    return bitwidth(_maxabs(m))


def shift_round(t: Q32Tensor, target_bits: int = 7) -> Q8Tensor:
    """Drop low bits so the result fits ``target_bits`` magnitude bits.

    B = max(E - target_bits, 0) bits are discarded with round-to-nearest and
    added to the exponent.  Results saturate at 2**target_bits - 1.
    """
    if not 1 <= target_bits <= 7:
        raise ValueError("target_bits must be in [1, 7]")
    b = max(effective_bitwidth(t) - target_bits, 0)
    m = saturate(rshift_round(t.mantissas, b), (1 << target_bits) - 1)
    return Q8Tensor(m.astype(np.int8), t.exponent + b)


def batch_shift_amounts(acc: np.ndarray, target_bits: int) -> np.ndarray:
    n = acc.shape[0]
    flat = np.abs(acc.reshape(n, -1)).max(axis=1) if acc.size else np.zeros(n, np.int64)
    return np.array([max(bitwidth(v) - target_bits, 0) for v in flat], dtype=np.int64)


def shift_round_batch(acc: np.ndarray, exponents, target_bits: int = 7) -> Q8Batch:
    """Per-sample shift_round over a stacked accumulator."""
    acc = np.asarray(acc, dtype=np.int64)
    b = batch_shift_amounts(acc, target_bits)
    shape = (-1,) + (1,) * (acc.ndim - 1)
    m = saturate(rshift_round(acc, b.reshape(shape)), (1 << target_bits) - 1)
    return Q8Batch(m.astype(np.int8), np.asarray(exponents, dtype=np.int64) + b)


def align_pair(m1: np.ndarray, e1: int, m2: np.ndarray, e2: int):
    """Bring two mantissa arrays to a common exponent.

    The lower-exponent operand is right-shifted with rounding.  An all-zero
    operand never drives the common exponent.
    """
    z1 = not np.any(m1)
    z2 = not np.any(m2)
    if z1 and not z2:
        e = e2
    elif z2 and not z1:
        e = e1
    else:
        e = max(e1, e2)
    a = rshift_round(m1, e - e1) if e > e1 else np.asarray(m1, dtype=np.int64)
    b = rshift_round(m2, e - e2) if e > e2 else np.asarray(m2, dtype=np.int64)
    return a, b, e


def align_add(a: Q8Tensor, b: Q8Tensor) -> Q8Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x, y, e = align_pair(a.mantissas, a.exponent, b.mantissas, b.exponent)
    return shift_round(Q32Tensor(x + y, e), 7)


def align_add_batch(a: Q8Batch, b: Q8Batch) -> Q8Batch:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    acc = np.empty(a.shape, dtype=np.int64)
    exps = np.empty(len(a), dtype=np.int64)
    for i in range(len(a)):
        x, y, e = align_pair(a.mantissas[i], int(a.exponents[i]), b.mantissas[i], int(b.exponents[i]))
        acc[i] = x + y
        exps[i] = e
    return shift_round_batch(acc, exps, 7)


def _round_div(num: int, den: int) -> int:
    """num / den rounded half away from zero (den > 0)."""
    q = (2 * abs(num) + den) // (2 * den)
    return q if num >= 0 else -q


class WideScalar:
    """Scalar with a signed 64-bit mantissa and an exponent.

    Comparison aligns by right-shifting the lower-exponent mantissa with
    round-to-nearest.  Addition and subtraction are exact, then narrowed.
    """

    __slots__ = ("mantissa", "exponent")

    def __init__(self, mantissa: int, exponent: int = 0):
        m, e = int(mantissa), int(exponent)
        excess = abs(m).bit_length() - 63
        if excess > 0:
            m = _rshift_int(m, excess)
            e += excess
            if abs(m) >= _WIDE_LIMIT:
                m = _rshift_int(m, 1)
                e += 1
        self.mantissa = m
        self.exponent = e

    @classmethod
    def exact_sum(cls, terms: Iterable[tuple[int, int]]) -> "WideScalar":
        """Sum (mantissa, exponent) pairs exactly, then narrow to 64 bits."""
        terms = [(int(m), int(e)) for m, e in terms if int(m) != 0]
        if not terms:
            return cls(0, 0)
        e0 = min(e for _, e in terms)
        total = sum(m << (e - e0) for m, e in terms)
        return cls(total, e0)

    def _aligned(self, other: "WideScalar") -> tuple[int, int, int]:
        if self.mantissa == 0:
            return 0, other.mantissa, other.exponent
        if other.mantissa == 0:
            return self.mantissa, 0, self.exponent
        e = max(self.exponent, other.exponent)
        return (
            _rshift_int(self.mantissa, e - self.exponent),
            _rshift_int(other.mantissa, e - other.exponent),
            e,
        )

    def __add__(self, other: "WideScalar") -> "WideScalar":
        """Exact sum, narrowed once to 64 bits."""
        return WideScalar.exact_sum([(self.mantissa, self.exponent), (other.mantissa, other.exponent)])

    def __sub__(self, other: "WideScalar") -> "WideScalar":
        return WideScalar.exact_sum([(self.mantissa, self.exponent), (-other.mantissa, other.exponent)])

    def __neg__(self) -> "WideScalar":
        return WideScalar(-self.mantissa, self.exponent)

    def __mul__(self, factor) -> "WideScalar":
        f = Fraction(factor)
        return WideScalar(_round_div(self.mantissa * f.numerator, f.denominator), self.exponent)

    __rmul__ = __mul__

    def _cmp(self, other) -> int:
        if not isinstance(other, WideScalar):
            other = WideScalar(int(other), 0)
        a, b, _ = self._aligned(other)
        return (a > b) - (a < b)

    def __lt__(self, other):
        return self._cmp(other) < 0

    def __le__(self, other):
        return self._cmp(other) <= 0

    def __gt__(self, other):
        return self._cmp(other) > 0

    def __ge__(self, other):
        return self._cmp(other) >= 0

    def __eq__(self, other):
        if not isinstance(other, (WideScalar, int)):
            return NotImplemented
        return self._cmp(other) == 0

    __hash__ = None

    def as_fraction(self) -> Fraction:
        if self.exponent >= 0:
            return Fraction(self.mantissa << self.exponent)
        return Fraction(self.mantissa, 1 << -self.exponent)

    def __float__(self) -> float:
        return math.ldexp(float(self.mantissa), self.exponent)

    def __repr__(self) -> str:
        return f"WideScalar({self.mantissa}, {self.exponent})"


def _rshift_int(m: int, s: int) -> int:
    if s <= 0:
        return m
    mag = (abs(m) + (1 << (s - 1))) >> s
    return mag if m >= 0 else -mag
