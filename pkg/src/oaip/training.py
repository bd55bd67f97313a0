"""Integer loss, backpropagation and int8 weight update for the Siamese stack.

Negative (unchanged) samples pull the two branches' FRN features together,
positive (changed) samples push them apart.  Every quantity is an integer
mantissa with a power-of-two exponent; the only wide values are the 64-bit
loss and the batch-summed weight-gradient accumulators.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .network import BranchForward, FrozenCache, SiameseState, build_cache, forward_branch
from .sampling import SampleSet
from .tensor import Q8Batch, Q8Tensor, WideScalar, align_add_batch, align_pair, shift_round_batch


@dataclass
class TrainConfig:
    iterations: int = 1000
    b_gw: int = 5
    alphas: tuple[int, ...] = (1, 1, 1)
    n_h: int = 20
    n_l: int = 30
    patch_size: int = 64

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not 0 < self.b_gw <= 7:
            raise ValueError("b_gw must be in (0, 7]")
        self.alphas = tuple(int(a) for a in self.alphas)
        if any(a <= 0 for a in self.alphas):
            raise ValueError("layer weights alpha must be positive integers")


@dataclass
class LossRecord:
    iteration: int
    value: WideScalar
    prune: bool = False


def floor_log2(n: int) -> int:
    return int(n).bit_length() - 1


def _aligned_diffs(a: Q8Batch, b: Q8Batch):
    """Per-sample branch difference in a common exponent frame."""
    for n in range(len(a)):
        x, y, e = align_pair(a.mantissas[n], int(a.exponents[n]), b.mantissas[n], int(b.exponents[n]))
        yield n, x - y, e


def loss(taps_t1: list[Q8Batch], taps_t2: list[Q8Batch], signs, alphas) -> WideScalar:
    """Signed, layer-weighted mean squared FRN distance as a WideScalar.

    ``signs`` is +1 for negative samples and -1 for positive ones.  The
    1 / (W H C) mean is applied as 2**-floor(log2(W H C)).
    """
    terms = []
    for m, (a, b) in enumerate(zip(taps_t1, taps_t2)):
        if a.shape != b.shape:
            raise ValueError(f"tap {m}: branch shapes differ {a.shape} vs {b.shape}")
        off = floor_log2(int(np.prod(a.shape[1:])))
        for n, d, e in _aligned_diffs(a, b):
            sq = int(np.dot(d.ravel(), d.ravel()))
            terms.append((int(signs[n]) * alphas[m] * sq, 2 * e - off))
    return WideScalar.exact_sum(terms)


def loss_grad(taps_t1: list[Q8Batch], taps_t2: list[Q8Batch], signs, alphas) -> tuple[list[Q8Batch], list[Q8Batch]]:
    """d loss / d FRN output for both branches at every tap.

    The t1 gradient is sign * alpha * (t1 - t2) with exponent offset
    1 - floor(log2(W H C)); the t2 gradient is its negation.
    """
    g1, g2 = [], []
    for m, (a, b) in enumerate(zip(taps_t1, taps_t2)):
        off = 1 - floor_log2(int(np.prod(a.shape[1:])))
        acc = np.empty(a.shape, dtype=np.int64)
        exps = np.empty(len(a), dtype=np.int64)
        for n, d, e in _aligned_diffs(a, b):
            acc[n] = d * (int(signs[n]) * alphas[m])
            exps[n] = e + off
        g = shift_round_batch(acc, exps, 7)
        g1.append(g)
        g2.append(Q8Batch(-g.mantissas, g.exponents))
    return g1, g2


def backward_branch(
    state: SiameseState,
    branch: int,
    fwd: BranchForward,
    tap_grads: list[Q8Batch],
    b_gw: int,
) -> dict[str, Q8Tensor]:
    """Backpropagate tap gradients down to the first trainable layer.

    Frozen layers in between pass activation gradients but get no weight
    gradient.  Where a tap layer also feeds deeper layers the two gradient
    paths are merged with an aligned add.
    """
    if not fwd.tape:
        raise ValueError("forward tape missing")
    grad_at = dict(zip(state.taps, tap_grads))
    start = state.boundary
    g = None
    out: dict[str, Q8Tensor] = {}
    for pos in range(len(state.layers) - 1, start - 1, -1):
        spec = state.layers[pos]
        rec = fwd.tape[spec.name]
        if g is not None:
            if spec.pool_after:
                g = ops.maxpool_bwd(g, rec.pool)
            g = ops.relu_bwd(g, rec.relu_mask)
        if spec.frn_tap:
            gt = ops.frn_bwd_batch(grad_at[spec.name], rec.frn)
            g = gt if g is None else align_add_batch(g, gt)
        if g is None:
            continue
        if not spec.frozen:
            out[spec.name] = ops.conv_grad_weight_batch(rec.input, g, b_gw)
        if pos > start:
            g = ops.conv_bwd_input_batch(g, state.weights[spec.name][branch])
    return out


def backward(
    state: SiameseState,
    forwards: tuple[BranchForward, BranchForward],
    tap_grads: tuple[list[Q8Batch], list[Q8Batch]],
    b_gw: int,
) -> dict[str, list[Q8Tensor]]:
    per_branch = [backward_branch(state, b, forwards[b], tap_grads[b], b_gw) for b in (0, 1)]
    return {name: [per_branch[0][name], per_branch[1][name]] for name in state.trainable}


def update_weights(w: Q8Tensor, gw: Q8Tensor) -> Q8Tensor:
    """w <- round((w - gw) * 127 / max|w - gw|) on mantissas; exponent kept."""
    if w.shape != gw.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {gw.shape}")
    d = w.mantissas.astype(np.int16) - gw.mantissas.astype(np.int16)
    peak = int(np.abs(d).max()) if d.size else 0
    if peak == 0:
        return Q8Tensor(np.zeros(w.shape, dtype=np.int8), w.exponent)
    mag = np.abs(d).astype(np.int32)
    q = (254 * mag + peak) // (2 * peak)
    return Q8Tensor(np.where(d < 0, -q, q).astype(np.int8), w.exponent)


@dataclass
class IterationCache:
    """Per-branch frozen-prefix activations, filled on the first iteration."""

    frozen: list[FrozenCache | None] = field(default_factory=lambda: [None, None])
    conv_calls: int = 0


def train_iteration(
    state: SiameseState,
    samples: SampleSet,
    cfg: TrainConfig,
    k: int,
    cache: IterationCache | None = None,
) -> tuple[SiameseState, LossRecord]:
    """One full-batch step: forward both branches, loss, backward, update the trainable layers."""
    cache = cache if cache is not None else IterationCache()
    alphas = _alphas_for(state, cfg)
    forwards = []
    calls = 0
    for b, x in enumerate((samples.pre, samples.post)):
        fwd = forward_branch(state, b, x, cache.frozen[b])
        if cache.frozen[b] is None:
            cache.frozen[b] = build_cache(state, b, fwd)
        calls += fwd.conv_calls
        forwards.append(fwd)
    cache.conv_calls = calls
    signs = samples.signs
    value = loss(forwards[0].taps, forwards[1].taps, signs, alphas)
    grads = loss_grad(forwards[0].taps, forwards[1].taps, signs, alphas)
    gw = backward(state, (forwards[0], forwards[1]), grads, cfg.b_gw)
    new = SiameseState(state.layers, dict(state.weights))
    for name, (g1, g2) in gw.items():
        w1, w2 = state.weights[name]
        new.weights[name] = [update_weights(w1, g1), update_weights(w2, g2)]
    return new, LossRecord(k, value)


def _alphas_for(state: SiameseState, cfg: TrainConfig) -> tuple[int, ...]:
    if len(cfg.alphas) != len(state.taps):
        raise ValueError(f"{len(cfg.alphas)} alpha values for {len(state.taps)} taps")
    return cfg.alphas


class IntegerTrainer:
    """Holds the mutable training state between controller iterations."""

    def __init__(self, state: SiameseState, samples: SampleSet, cfg: TrainConfig):
        self.state = state
        self.samples = samples
        self.cfg = cfg
        self.cache = IterationCache()
        self.k = 0

    def step(self) -> WideScalar:
        self.k += 1
        self.state, rec = train_iteration(self.state, self.samples, self.cfg, self.k, self.cache)
        return rec.value
