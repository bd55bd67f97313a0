"""Floating-point counterpart of the integer pipeline, used as a comparison baseline.

Same architecture, sampling, loss, update rule shape and pruning controller,
but activations, gradients and weights stay in float32/float64 with no
shifting or rounding.  The update keeps the integer path's behaviour of a
gradient scaled to ``b_gw`` bits and a 127/max renormalization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import SiameseState
from .ops import _kernel_matrix, im2col
from .sampling import SampleSet
from .tensor import dequantize


@dataclass
class FloatWeights:
    """Real-valued weights held as ``mantissas * 2**exponent``."""

    mantissas: np.ndarray
    exponent: int

    @property
    def shape(self):
        return self.mantissas.shape

    def values(self) -> np.ndarray:
        return np.ldexp(self.mantissas, self.exponent)


def to_float_state(state: SiameseState) -> SiameseState:
    weights = {
        name: [FloatWeights(w.mantissas.astype(np.float64), w.exponent) for w in pair]
        for name, pair in state.weights.items()
    }
    return SiameseState([s for s in state.copy().layers], weights)


def conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    o = w.shape[0]
    out = im2col(x) @ _kernel_matrix(w)
    return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)


def conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return conv(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))


def conv_weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    o = g.shape[1]
    gm = g.transpose(1, 0, 2, 3).reshape(o, -1).astype(np.float64)
    acc = gm @ im2col(x, dtype=np.float64)
    return acc.reshape(o, 3, 3, c).transpose(0, 3, 1, 2)


def pool(x: np.ndarray):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], -1)[..., 0], (arg, x.shape)


def pool_grad(g: np.ndarray, cache) -> np.ndarray:
    arg, shape = cache
    n, c, h2, w2 = g.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None], g[..., None], -1)
    out = np.zeros(shape, dtype=g.dtype)
    out[:, :, : 2 * h2, : 2 * w2] = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return out


def forward(state: SiameseState, branch: int, x: np.ndarray):
    """Returns (tap outputs, tape) where tape[name] = (input, relu mask, pool cache, nu)."""
    taps, tape = [], {}
    a = x
    for spec in state.layers:
        y = conv(a, state.weights[spec.name][branch].values())
        nu = None
        if spec.frn_tap:
            nu = frn_scale(y)
            taps.append(y / nu)
        mask = y > 0
        out = np.where(mask, y, 0)
        pc = None
        if spec.pool_after:
            out, pc = pool(out)
        tape[spec.name] = (a, mask, pc, nu)
        a = out
    return taps, tape


def frn_scale(y: np.ndarray) -> np.ndarray:
    """Per (sample, channel) mean |y|, floored at 2**-24 of the sample's largest.

    A channel that is identically zero gets an infinite scale, so both its
    output and its gradient are zero.
    """
    nu = np.abs(y.astype(np.float64)).mean(axis=(2, 3), keepdims=True)
    floor = nu.max(axis=1, keepdims=True) * 2.0 ** -24
    return np.where(nu == 0, np.inf, np.maximum(nu, floor))


def loss_and_grads(taps1, taps2, signs, alphas):
    sg = np.asarray(signs, dtype=np.float64)[:, None, None, None]
    total, g1 = 0.0, []
    for a, t1, t2 in zip(alphas, taps1, taps2):
        scale = a / float(np.prod(t1.shape[1:]))
        d = t1 - t2
        total += float((sg * d * d).sum()) * scale
        g1.append(2 * scale * sg * d)
    return total, g1, [-g for g in g1]


def backward(state: SiameseState, branch: int, tape, tap_grads) -> dict[str, np.ndarray]:
    grad_at = dict(zip(state.taps, tap_grads))
    start = state.boundary
    g = None
    out = {}
    for pos in range(len(state.layers) - 1, start - 1, -1):
        spec = state.layers[pos]
        x, mask, pc, nu = tape[spec.name]
        if g is not None:
            if spec.pool_after:
                g = pool_grad(g, pc)
            g = g * mask
        if spec.frn_tap:
            gt = grad_at[spec.name] / nu
            g = gt if g is None else g + gt
        if g is None:
            continue
        if not spec.frozen:
            out[spec.name] = conv_weight_grad(x, g)
        if pos > start:
            g = conv_input_grad(g, state.weights[spec.name][branch].values())
    return out


def update(w: FloatWeights, grad: np.ndarray, b_gw: int) -> FloatWeights:
    """Gradient in the weight frame, scaled so its peak sits just under 2**b_gw, then 127/max."""
    g = grad / 2.0 ** w.exponent
    peak = float(np.abs(g).max())
    if peak > 0:
        g = g * 2.0 ** (b_gw - math.ceil(math.log2(peak)))
    d = w.mantissas - g
    top = float(np.abs(d).max())
    if top == 0:
        return FloatWeights(np.zeros_like(d), w.exponent)
    return FloatWeights(d * (127.0 / top), w.exponent)


class FloatTrainer:
    def __init__(self, state: SiameseState, samples: SampleSet, b_gw: int = 5, alphas=(1, 1, 1)):
        self.state = to_float_state(state) if not isinstance(next(iter(state.weights.values()))[0], FloatWeights) else state
        self.x = (dequantize(samples.pre), dequantize(samples.post))
        self.signs = samples.signs
        self.b_gw = b_gw
        self.alphas = tuple(alphas)

    def step(self) -> float:
        taps, tapes = [], []
        for b in (0, 1):
            t, tp = forward(self.state, b, self.x[b])
            taps.append(t)
            tapes.append(tp)
        value, g1, g2 = loss_and_grads(taps[0], taps[1], self.signs, self.alphas)
        new = SiameseState(self.state.layers, dict(self.state.weights))
        grads = [backward(self.state, b, tapes[b], tg) for b, tg in ((0, g1), (1, g2))]
        for name in self.state.trainable:
            new.weights[name] = [update(self.state.weights[name][b], grads[b][name], self.b_gw) for b in (0, 1)]
        self.state = new
        return value


def difference_maps(state: SiameseState, pre: np.ndarray, post: np.ndarray, tile=None) -> list[np.ndarray]:
    xa = np.moveaxis(np.asarray(pre, dtype=np.float64), -1, 0)[None]
    xb = np.moveaxis(np.asarray(post, dtype=np.float64), -1, 0)[None]
    ta, _ = forward(state, 0, xa)
    tb, _ = forward(state, 1, xb)
    return [((a[0] - b[0]) ** 2).mean(axis=0) for a, b in zip(ta, tb)]
