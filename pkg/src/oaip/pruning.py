"""Online filter pruning interleaved with training, with loss-based rollback.

Every ``interval`` iterations the least significant filters of each prunable
layer are removed, up to a per-layer quota.  Half an interval later the loss
is compared to its pre-prune level: if it has not recovered enough, the
network is restored to the pre-prune snapshot and the quotas are halved;
otherwise the quotas are reset to the greedy rate of the remaining filters.
"""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Protocol

import numpy as np

from .network import SiameseState, remove_filters
from .tensor import WideScalar
from .training import LossRecord

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step", "iteration", "loss_mantissa", "loss_exponent", "event",
    "live_filters", "weight_bytes", "wall_ms", "detail",
)


def as_fraction(x) -> Fraction:
    """Exact rational from an int, Fraction, decimal string or float literal."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass
class PruneConfig:
    interval: int = 20
    max_rate: Fraction = Fraction(1, 16)
    theta: Fraction = Fraction(7, 10)

    def __post_init__(self):
        self.max_rate = as_fraction(self.max_rate)
        self.theta = as_fraction(self.theta)
        if self.interval < 2 or self.interval % 2:
            raise ValueError("prune interval must be an even integer >= 2")
        if not 0 < self.max_rate < 1:
            raise ValueError("max prune rate must be in (0, 1)")
        if not 0 < self.theta < 1:
            raise ValueError("theta must be in (0, 1)")


@dataclass
class Snapshot:
    state: SiameseState
    prune: "PruneState"
    iteration: int


@dataclass
class PruneState:
    quotas: dict[str, int]
    history: list[LossRecord] = field(default_factory=list)
    last_prune_iteration: int | None = None
    last_prune_removed: int = 0
    snapshot: Snapshot | None = None

    def detached(self) -> "PruneState":
        """Deep copy without the snapshot, so snapshots never nest."""
        return PruneState(
            dict(self.quotas), list(self.history), self.last_prune_iteration, self.last_prune_removed, None
        )


def greedy_quotas(state: SiameseState, max_rate: Fraction) -> dict[str, int]:
    live = state.live_filters
    return {name: int(max_rate * live[name]) for name in state.prunable}


def initial_prune_state(state: SiameseState, cfg: PruneConfig) -> PruneState:
    return PruneState(greedy_quotas(state, cfg.max_rate))


def significance(state: SiameseState, layer: str) -> np.ndarray:
    """Sum of absolute weight mantissas per output filter over both branches."""
    total = None
    for w in state.weights[layer]:
        m = np.abs(np.asarray(w.mantissas))
        s = m.reshape(m.shape[0], -1).sum(axis=1, dtype=np.int64 if m.dtype.kind in "iu" else np.float64)
        total = s if total is None else total + s
    return total


def least_significant(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` smallest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), scores))
    return np.sort(order[:count])


def prune_step(state: SiameseState, ps: PruneState, k: int) -> tuple[SiameseState, PruneState, dict[str, int]]:
    """Snapshot, then drop up to quota filters from every prunable layer.

    Each layer keeps at least one filter.
    """
    snap = Snapshot(state.copy(), ps.detached(), k)
    removed: dict[str, int] = {}
    for name in state.prunable:
        live = state.layer(name).out_channels
        n = min(ps.quotas.get(name, 0), live - 1)
        if n <= 0:
            continue
        state = remove_filters(state, name, least_significant(significance(state, name), n))
        removed[name] = n
    out = ps.detached()
    out.snapshot = snap
    out.last_prune_iteration = k
    out.last_prune_removed = sum(removed.values())
    if out.history and out.history[-1].iteration == k:
        out.history[-1] = LossRecord(k, out.history[-1].value, prune=True)
    return state, out, removed


def _loss_at(history: list[LossRecord], q: int):
    for rec in reversed(history):
        if rec.iteration == q:
            return rec.value
    raise KeyError(f"no loss recorded for iteration {q}")


def rollback_check(history: list[LossRecord], theta: Fraction, k: int, last_prune_iteration: int) -> str:
    """"rollback" if the loss recovered by less than theta of its pre-prune drop.

    Compares L_max - L_k against theta * (L_max - L_last), where L_max is the
    largest loss so far and L_last the loss just before the last prune.
    """
    current = _loss_at(history, k)
    peak = max(rec.value for rec in history if rec.iteration <= k)
    before = _loss_at(history, last_prune_iteration - 1)
    return "rollback" if peak - current < (peak - before) * theta else "greedy"


def apply_rollback(state: SiameseState, ps: PruneState, k: int, interval: int) -> tuple[SiameseState, PruneState, int]:
    """Restore the pre-prune snapshot, halve the quotas and rewind the iteration counter."""
    if ps.snapshot is None:
        raise RuntimeError("rollback requested before any pruning")
    snap = ps.snapshot
    out = snap.prune.detached()
    out.quotas = {name: q // 2 for name, q in ps.quotas.items()}
    out.snapshot = snap
    k_back = k - interval // 2
    out.history = [rec for rec in out.history if rec.iteration <= k_back]
    return snap.state.copy(), out, k_back


def apply_greedy_reset(ps: PruneState, state: SiameseState, max_rate: Fraction) -> PruneState:
    out = copy.copy(ps)
    out.quotas = greedy_quotas(state, max_rate)
    return out


class Trainer(Protocol):
    state: SiameseState

    def step(self): ...


@dataclass
class LogRow:
    step: int
    iteration: int
    loss: object
    event: str
    live_filters: int
    weight_bytes: int
    wall_ms: float
    detail: str = ""

    def as_dict(self) -> dict:
        if isinstance(self.loss, WideScalar):
            mant, exp = self.loss.mantissa, self.loss.exponent
        else:
            mant, exp = repr(float(self.loss)), ""
        return {
            "step": self.step, "iteration": self.iteration, "loss_mantissa": mant,
            "loss_exponent": exp, "event": self.event, "live_filters": self.live_filters,
            "weight_bytes": self.weight_bytes, "wall_ms": f"{self.wall_ms:.3f}", "detail": self.detail,
        }


@dataclass
class RunResult:
    state: SiameseState
    prune: PruneState
    rows: list[LogRow]

    @property
    def steps(self) -> int:
        return len(self.rows)


def run_oaip(
    trainer: Trainer,
    iterations: int,
    cfg: PruneConfig,
    on_row: Callable[[LogRow], None] | None = None,
) -> RunResult:
    """Train for ``iterations`` logical iterations with online pruning.

    Rollbacks rewind the iteration counter, so the number of executed steps
    can exceed ``iterations``.
    """
    ps = initial_prune_state(trainer.state, cfg)
    half = cfg.interval // 2
    rows: list[LogRow] = []
    k = 1
    while k <= iterations:
        t0 = time.perf_counter()
        value = trainer.step()
        ps.history.append(LossRecord(k, value))
        event, detail, logged_k = "none", "", k
        if k % cfg.interval == 0:
            trainer.state, ps, removed = prune_step(trainer.state, ps, k)
            event = "prune"
            detail = ";".join(f"{n}:{c}" for n, c in removed.items())
        elif (
            k % cfg.interval == half
            and ps.last_prune_iteration == k - half
            and ps.last_prune_removed > 0
        ):
            if rollback_check(ps.history, cfg.theta, k, ps.last_prune_iteration) == "rollback":
                trainer.state, ps, k = apply_rollback(trainer.state, ps, k, cfg.interval)
                event = "rollback"
                detail = "quotas " + ";".join(f"{n}:{q}" for n, q in ps.quotas.items())
            else:
                ps = apply_greedy_reset(ps, trainer.state, cfg.max_rate)
                detail = "greedy"
        row = LogRow(
            len(rows) + 1, logged_k, value, event, trainer.state.prunable_total(),
            trainer.state.weight_bytes(), (time.perf_counter() - t0) * 1000.0, detail,
        )
        rows.append(row)
        if event != "none":
            log.info("step %d iteration %d: %s %s", row.step, logged_k, event, detail)
        if on_row is not None:
            on_row(row)
        k += 1
    return RunResult(trainer.state, ps, rows)


def write_log(rows: list[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_dict())
