"""Command-line change detection: sample, train with online pruning, infer, report."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .inference import detect_changes, metrics
from .network import VGG19_BLOCKS, build_network, init_random_weights, load_weights, save_weights
from .pruning import PruneConfig, RunResult, run_oaip, write_log
from .raster import read_raster, write_pgm
from .sampling import sample_pairs
from .training import IntegerTrainer, TrainConfig

log = logging.getLogger("oaip")


@dataclass
class RunConfig:
    pre: str = ""
    post: str = ""
    out: str = ""
    gt: str | None = None
    weights: str | None = None
    patch_size: int = 64
    nh: int = 20
    nl: int = 30
    iters: int = 1000
    prune_interval: int = 20
    prune_rate: Fraction = Fraction(1, 16)
    theta: Fraction = Fraction(7, 10)
    bgw: int = 5
    alpha: tuple[int, ...] = (1, 1, 1)
    seed: int = 0
    tile: int | None = None
    width_divisor: int = 1

    def validate(self) -> None:
        for name in ("pre", "post", "out"):
            if not getattr(self, name):
                raise ValueError(f"missing required setting: {name}")
        for name in ("patch_size", "iters", "width_divisor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.nh < 0 or self.nl < 0 or self.nh + self.nl == 0:
            raise ValueError("need at least one training sample (nh + nl > 0)")
        if self.tile is not None and self.tile < 1:
            raise ValueError("tile must be positive")
        TrainConfig(self.iters, self.bgw, self.alpha, self.nh, self.nl, self.patch_size)
        PruneConfig(self.prune_interval, self.prune_rate, self.theta)

    def resolved_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {'' if v is None else v}\n")
        return "".join(lines)


def _parse_value(name: str, text: str):
    text = text.strip()
    if name in ("gt", "weights", "tile") and text in ("", "none", "None"):
        return None
    if name in ("prune_rate", "theta"):
        return Fraction(text)
    if name == "alpha":
        return tuple(int(x) for x in text.split(","))
    if name in ("pre", "post", "out", "gt", "weights"):
        return text
    return int(text)


_KEYS = {f.name for f in fields(RunConfig)}


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; dashes in keys are accepted."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detect", description="Integer-only Siamese change detection with online pruning.")
    p.add_argument("--pre", help="pre-event raster (PPM, PGM or RAWF)")
    p.add_argument("--post", help="post-event raster")
    p.add_argument("--gt", help="ground-truth change mask (PGM, nonzero = changed)")
    p.add_argument("--weights", help="initial weight file; seeded random weights otherwise")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--nh", type=int, help="number of changed (positive) training patches")
    p.add_argument("--nl", type=int, help="number of unchanged (negative) training patches")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--prune-interval", type=int)
    p.add_argument("--prune-rate", type=Fraction, help="maximum prune rate, e.g. 1/16")
    p.add_argument("--theta", type=Fraction, help="rollback threshold in (0, 1)")
    p.add_argument("--bgw", type=int, help="weight-gradient bit budget")
    p.add_argument("--alpha", type=lambda s: tuple(int(x) for x in s.split(",")), help="tap weights A3,A4,A5")
    p.add_argument("--seed", type=int)
    p.add_argument("--tile", type=int, help="tile size for inference on large images")
    p.add_argument("--width-divisor", type=int, help="divide every layer width (for seeded-init weights)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for name in _KEYS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


@dataclass
class PipelineResult:
    change_map: np.ndarray
    difference: np.ndarray
    run: RunResult
    metrics: object = None
    timings: dict = field(default_factory=dict)


def initial_state(cfg: RunConfig):
    arch = build_network(tuple((max(w // cfg.width_divisor, 1), d) for w, d in VGG19_BLOCKS))
    if cfg.weights:
        return load_weights(cfg.weights, arch)
    return init_random_weights(arch, cfg.seed)


def run_pipeline(cfg: RunConfig, pre=None, post=None, truth=None) -> PipelineResult:
    """Execute the whole flow and write all artifacts into ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text(cfg.resolved_text())
    timings = {}
    t0 = time.perf_counter()
    pre = read_raster(cfg.pre) if pre is None else pre
    post = read_raster(cfg.post) if post is None else post
    if pre.shape[:2] != post.shape[:2]:
        raise ValueError(f"pre and post sizes differ: {pre.shape[:2]} vs {post.shape[:2]}")
    if truth is None and cfg.gt:
        truth = (read_raster(cfg.gt, replicate=False)[:, :, 0] > 0).astype(np.uint8)
    samples = sample_pairs(pre, post, cfg.patch_size, cfg.nh, cfg.nl)
    state = initial_state(cfg)
    timings["prepare_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    trainer = IntegerTrainer(state, samples, TrainConfig(cfg.iters, cfg.bgw, cfg.alpha, cfg.nh, cfg.nl, cfg.patch_size))
    run = run_oaip(trainer, cfg.iters, PruneConfig(cfg.prune_interval, cfg.prune_rate, cfg.theta))
    timings["train_s"] = time.perf_counter() - t0
    write_log(run.rows, out / "train_log.csv")
    save_weights(run.state, out / "weights_final.oaipw")

    t0 = time.perf_counter()
    det = detect_changes(run.state, pre, post, cfg.alpha, tile=cfg.tile)
    timings["infer_s"] = time.perf_counter() - t0
    write_pgm(out / "change_map.pgm", det.change_map * 255)
    write_pgm(out / "difference_map.pgm", det.levels)
    report = None
    if truth is not None:
        if truth.shape != det.change_map.shape:
            raise ValueError(f"ground truth {truth.shape} does not match image {det.change_map.shape}")
        report = metrics(det.change_map, truth)
        (out / "metrics.txt").write_text(report.to_text())
    log.info("done: threshold %d, %d steps, %d live prunable filters", det.threshold, run.steps, run.state.prunable_total())
    return PipelineResult(det.change_map, det.difference, run, report, timings)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = run_pipeline(cfg)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 1
    if result.metrics is not None:
        print(f"Ka = {result.metrics.Ka:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
