"""Siamese VGG-19 convolution stack on int8 weights.

Two branches (t1 for the pre-event image, t2 for the post-event image) share
the layer structure but keep independent weights.  Only the last convolution
of blocks 3, 4 and 5 is trained; those layers also feed FRN taps.  Everything
from conv3_4 onward is prunable.
"""
from __future__ import annotations

import copy
import hashlib
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .tensor import Q8Batch, Q8Tensor

VGG19_BLOCKS: tuple[tuple[int, int], ...] = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))
BRANCHES = ("t1", "t2")
MAGIC = b"OAIPW1"
_NAME_RE = re.compile(r"^conv(\d+)_(\d+)$")


@dataclass
class LayerSpec:
    name: str
    block: int
    index: int
    in_channels: int
    out_channels: int
    frozen: bool
    prunable: bool
    frn_tap: bool
    pool_after: bool = False


@dataclass
class SiameseState:
    layers: list[LayerSpec]
    weights: dict[str, list] = field(default_factory=dict)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def position(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise KeyError(name)

    @property
    def trainable(self) -> list[str]:
        return [s.name for s in self.layers if not s.frozen]

    @property
    def prunable(self) -> list[str]:
        return [s.name for s in self.layers if s.prunable]

    @property
    def taps(self) -> list[str]:
        return [s.name for s in self.layers if s.frn_tap]

    @property
    def boundary(self) -> int:
        """Index of the first layer whose input can change during training."""
        return min(i for i, s in enumerate(self.layers) if s.prunable or not s.frozen)

    @property
    def live_filters(self) -> dict[str, int]:
        return {s.name: s.out_channels for s in self.layers}

    def prunable_total(self) -> int:
        return sum(s.out_channels for s in self.layers if s.prunable)

    def weight_bytes(self) -> int:
        """int8 weight storage of both branches."""
        return sum(w.mantissas.size for pair in self.weights.values() for w in pair)

    def copy(self) -> "SiameseState":
        return copy.deepcopy(self)

    def same_as(self, other: "SiameseState") -> bool:
        if [replace(s) for s in self.layers] != [replace(s) for s in other.layers]:
            return False
        return all(
            a == b
            for name in self.weights
            for a, b in zip(self.weights[name], other.weights[name])
        )


def _layer_list(blocks: Sequence[tuple[int, int]], in_channels: int, tap_blocks: int, pools: bool) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    c_in = in_channels
    nblocks = len(blocks)
    first_tap_block = nblocks - tap_blocks + 1
    for b, (width, depth) in enumerate(blocks, start=1):
        for i in range(1, depth + 1):
            tap = b >= first_tap_block and i == depth
            layers.append(
                LayerSpec(
                    name=f"conv{b}_{i}",
                    block=b,
                    index=i,
                    in_channels=c_in,
                    out_channels=width,
                    frozen=not tap,
                    prunable=False,
                    frn_tap=tap,
                    pool_after=pools and i == depth and b < nblocks,
                )
            )
            c_in = width
    first = next(i for i, s in enumerate(layers) if s.frn_tap)
    for s in layers[first:]:
        s.prunable = True
    return layers


def build_network(
    blocks: Sequence[tuple[int, int]] = VGG19_BLOCKS,
    in_channels: int = 3,
    tap_blocks: int = 3,
    pools: bool = True,
) -> SiameseState:
    """Layer structure with all-zero weights in both branches.

    ``blocks`` lists (width, depth) per block; the default is VGG-19's
    16-convolution feature extractor.
    """
    if not 1 <= tap_blocks <= len(blocks):
        raise ValueError("tap_blocks must be between 1 and the number of blocks")
    layers = _layer_list(blocks, in_channels, tap_blocks, pools)
    weights = {
        s.name: [Q8Tensor.zeros((s.out_channels, s.in_channels, 3, 3)) for _ in BRANCHES]
        for s in layers
    }
    return SiameseState(layers, weights)


def init_random_weights(state: SiameseState, seed: int) -> SiameseState:
    """Seeded He-scaled weights: mantissas uniform in [-32, 32], per-layer exponent.

    The exponent makes the dequantized standard deviation close to
    sqrt(2 / (9 * in_channels)).  Both branches get identical copies.
    """
    rng = np.random.default_rng(seed)
    mantissa_std = np.sqrt(((2 * 32 + 1) ** 2 - 1) / 12.0)
    out = state.copy()
    for spec in out.layers:
        target = np.sqrt(2.0 / (9 * spec.in_channels))
        e = int(np.round(np.log2(target / mantissa_std)))
        m = rng.integers(-32, 33, size=(spec.out_channels, spec.in_channels, 3, 3)).astype(np.int8)
        w = Q8Tensor(m, e)
        out.weights[spec.name] = [w, Q8Tensor(m.copy(), e)]
    return out


# -- forward ---------------------------------------------------------------------


def frozen_fingerprint(state: SiameseState, branch: int) -> str:
    h = hashlib.sha1()
    for spec in state.layers[: state.boundary]:
        w = state.weights[spec.name][branch]
        h.update(spec.name.encode())
        h.update(struct.pack("<i", w.exponent))
        h.update(np.ascontiguousarray(w.mantissas).tobytes())
    return h.hexdigest()


@dataclass
class FrozenCache:
    """Activation entering the first trainable layer, per sample, for one branch."""

    activation: Q8Batch
    fingerprint: str


@dataclass
class LayerTape:
    input: Q8Batch
    relu_mask: np.ndarray | None = None
    pool: ops.PoolIndices | None = None
    frn: ops.FRNCache | None = None


@dataclass
class BranchForward:
    taps: list[Q8Batch]
    tape: dict[str, LayerTape]
    boundary_activation: Q8Batch
    conv_calls: int


def min_input_size(state: SiameseState) -> int:
    return 2 ** sum(1 for s in state.layers if s.pool_after)


def forward_branch(
    state: SiameseState,
    branch: int,
    x,
    cache: FrozenCache | None = None,
) -> BranchForward:
    """Run one branch and return its FRN tap outputs plus the backprop tape.

    With a cache the frozen prefix is skipped and computation starts at the
    first trainable layer.
    """
    if isinstance(x, Q8Tensor):
        x = Q8Batch(x.mantissas[None], [x.exponent])
    if x.mantissas.ndim != 4 or x.shape[1] != state.layers[0].in_channels:
        raise ValueError(f"input must be N x {state.layers[0].in_channels} x H x W, got {x.shape}")
    need = min_input_size(state)
    if min(x.shape[2:]) < need:
        raise ValueError(f"input spatial size {x.shape[2:]} is below the minimum {need} px")
    start = state.boundary
    calls = 0
    if cache is not None:
        if cache.fingerprint != frozen_fingerprint(state, branch):
            raise ValueError("frozen cache does not match the current frozen weights")
        act = cache.activation
        layers = state.layers[start:]
        offset = start
    else:
        act = x
        layers = state.layers
        offset = 0
    taps: list[Q8Batch] = []
    tape: dict[str, LayerTape] = {}
    boundary_act = act if cache is not None else None
    for i, spec in enumerate(layers, start=offset):
        if i == start:
            boundary_act = act
        w = state.weights[spec.name][branch]
        out = ops.conv_fwd_batch(act, w)
        calls += 1
        rec = LayerTape(input=act) if i >= start else None
        if spec.frn_tap:
            y, fc = ops.frn_fwd_batch(out)
            taps.append(y)
            rec.frn = fc
        act, mask = ops.relu(out)
        if rec is not None:
            rec.relu_mask = mask
        if spec.pool_after:
            act, idx = ops.maxpool(act)
            if rec is not None:
                rec.pool = idx
        if rec is not None:
            tape[spec.name] = rec
    return BranchForward(taps, tape, boundary_act, calls)


def build_cache(state: SiameseState, branch: int, fwd: BranchForward) -> FrozenCache:
    return FrozenCache(fwd.boundary_activation, frozen_fingerprint(state, branch))


# -- structural pruning ------------------------------------------------------------


def remove_filters(state: SiameseState, layer: str, indices) -> SiameseState:
    """Drop output filters of ``layer`` in both branches and the matching
    input channels of the following layer."""
    pos = state.position(layer)
    spec = state.layers[pos]
    if not spec.prunable:
        raise ValueError(f"{layer} is not prunable")
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= spec.out_channels):
        raise IndexError(f"filter index out of range for {layer} ({spec.out_channels} filters)")
    if spec.out_channels - idx.size < 1:
        raise ValueError(f"removing {idx.size} filters would empty {layer}")
    out = SiameseState([replace(s) for s in state.layers], dict(state.weights))
    if idx.size == 0:
        return out
    out.weights[layer] = [
        type(w)(np.delete(w.mantissas, idx, axis=0), w.exponent) for w in state.weights[layer]
    ]
    out.layers[pos].out_channels -= idx.size
    if pos + 1 < len(out.layers):
        nxt = out.layers[pos + 1]
        out.weights[nxt.name] = [
            type(w)(np.delete(w.mantissas, idx, axis=1), w.exponent) for w in state.weights[nxt.name]
        ]
        nxt.in_channels -= idx.size
    return out


def check_structure(state: SiameseState) -> None:
    prev = state.layers[0].in_channels
    for spec in state.layers:
        if spec.in_channels != prev:
            raise ValueError(f"{spec.name}: in_channels {spec.in_channels} != previous out {prev}")
        for b, w in enumerate(state.weights[spec.name]):
            if w.shape != (spec.out_channels, spec.in_channels, 3, 3):
                raise ValueError(f"{spec.name}/{BRANCHES[b]}: weight shape {w.shape} disagrees with spec")
        prev = spec.out_channels


# -- weight file -------------------------------------------------------------------


def save_weights(state: SiameseState, path) -> None:
    parts = [MAGIC, struct.pack("<H", len(state.layers))]
    for spec in state.layers:
        name = spec.name.encode("ascii")
        w1, w2 = state.weights[spec.name]
        parts.append(struct.pack("<B", len(name)) + name)
        parts.append(struct.pack("<HHBhh", spec.in_channels, spec.out_channels, 3, w1.exponent, w2.exponent))
        parts.append(np.ascontiguousarray(w1.mantissas).tobytes())
        parts.append(np.ascontiguousarray(w2.mantissas).tobytes())
    Path(path).write_bytes(b"".join(parts))


class WeightFileError(ValueError):
    pass


def load_weights(path, architecture: SiameseState | None = None) -> SiameseState:
    """Read an OAIPW1 file.

    Channel counts come from the file; layer names, flags and pooling come
    from ``architecture`` (VGG-19 by default).  Non-prunable layers must match
    the architecture exactly, prunable layers may be narrower.
    """
    data = Path(path).read_bytes()
    arch = architecture if architecture is not None else build_network()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"truncated file: need {n} bytes for {what} at offset {pos}, have {len(data) - pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic = take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise WeightFileError(f"bad magic {magic!r} at offset 0, expected 'OAIPW1'")
    (count,) = struct.unpack("<H", take(2, "layer count"))
    if count != len(arch.layers):
        raise WeightFileError(f"file has {count} layers, architecture has {len(arch.layers)}")
    layers: list[LayerSpec] = []
    weights: dict[str, list] = {}
    for ref in arch.layers:
        at = pos
        (nlen,) = struct.unpack("<B", take(1, "name length"))
        name = take(nlen, "layer name").decode("ascii", errors="replace")
        if name != ref.name:
            raise WeightFileError(f"layer at offset {at} is {name!r}, expected {ref.name!r}")
        c_in, c_out, kernel, e1, e2 = struct.unpack("<HHBhh", take(9, f"{name} header"))
        if kernel != 3:
            raise WeightFileError(f"{name} at offset {at}: kernel {kernel}, expected 3")
        if ref.prunable:
            ok = 1 <= c_out <= ref.out_channels
        else:
            ok = c_out == ref.out_channels
        if not ok:
            raise WeightFileError(f"{name} at offset {at}: {c_out} filters incompatible with architecture ({ref.out_channels})")
        expect_in = layers[-1].out_channels if layers else ref.in_channels
        if c_in != expect_in:
            raise WeightFileError(f"{name} at offset {at}: in_channels {c_in}, expected {expect_in}")
        size = c_out * c_in * 9
        pair = []
        for b, e in zip(BRANCHES, (e1, e2)):
            raw = np.frombuffer(take(size, f"{name}/{b} mantissas"), dtype=np.int8).reshape(c_out, c_in, 3, 3)
            if raw.size and raw.min() == -128:
                raise WeightFileError(f"{name}/{b}: mantissa -128 is not allowed")
            pair.append(Q8Tensor(raw.copy(), e))
        layers.append(replace(ref, in_channels=c_in, out_channels=c_out))
        weights[name] = pair
    if pos != len(data):
        raise WeightFileError(f"{len(data) - pos} trailing bytes after offset {pos}")
    return SiameseState(layers, weights)
