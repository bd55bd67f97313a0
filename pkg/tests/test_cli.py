import csv
from fractions import Fraction

import numpy as np
import pytest

from oaip import cli
from oaip.network import load_weights
from oaip.raster import read_raster, write_pgm, write_ppm, write_rawf

FAST = ["--patch-size", "16", "--nh", "2", "--nl", "3", "--iters", "4", "--prune-interval", "2", "--width-divisor", "16"]


@pytest.fixture
def pair(tmp_path):
    rng = np.random.default_rng(0)
    pre = rng.uniform(0, 255, (48, 64, 3))
    post = pre.copy()
    post[16:32, 16:32] = 255 - post[16:32, 16:32]
    write_ppm(tmp_path / "pre.ppm", pre)
    write_rawf(tmp_path / "post.rawf", post.astype(np.uint8).astype(np.float32))
    truth = np.zeros((48, 64), np.uint8)
    truth[16:32, 16:32] = 255
    write_pgm(tmp_path / "gt.pgm", truth)
    return tmp_path


def run(pair, *extra):
    out = pair / "out"
    argv = ["--pre", str(pair / "pre.ppm"), "--post", str(pair / "post.rawf"), "--out", str(out), *FAST, *extra]
    return cli.main(argv), out


def test_pipeline_writes_all_artifacts(pair, capsys):
    code, out = run(pair, "--gt", str(pair / "gt.pgm"))
    assert code == 0
    names = {"change_map.pgm", "difference_map.pgm", "train_log.csv", "metrics.txt", "weights_final.oaipw", "config_resolved.txt"}
    assert names <= {p.name for p in out.iterdir()}
    cm = read_raster(out / "change_map.pgm", replicate=False)
    assert cm.shape == (48, 64, 1) and set(np.unique(cm)) <= {0.0, 255.0}
    rows = list(csv.DictReader((out / "train_log.csv").open()))
    assert rows[0]["iteration"] == "1" and rows[1]["event"] == "prune"
    assert {r["event"] for r in rows} <= {"none", "prune", "rollback"}
    # a rollback rewinds by half an interval, otherwise the iteration advances by one
    for a, b in zip(rows, rows[1:]):
        step = int(b["iteration"]) - int(a["iteration"])
        assert step == (0 if a["event"] == "rollback" else 1)
    assert "Ka = " in (out / "metrics.txt").read_text()
    assert "Ka =" in capsys.readouterr().out
    # the saved weights reload into the narrow architecture
    cfg = cli.resolve_config(cli.build_parser().parse_args(["--pre", "a", "--post", "b", "--out", "c", "--width-divisor", "16"]))
    state = load_weights(out / "weights_final.oaipw", cli.initial_state(cfg))
    assert state.prunable_total() == int(rows[-1]["live_filters"])


def test_same_seed_is_bit_identical(pair, tmp_path):
    code, out = run(pair)
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    (out / "change_map.pgm").unlink()
    code2, out = run(pair)
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert code == code2 == 0
    for name in ("change_map.pgm", "difference_map.pgm", "weights_final.oaipw"):
        assert first[name] == second[name]

    def strip(text):
        return [r[:7] + r[8:] for r in csv.reader(text.decode().splitlines())]

    assert strip(first["train_log.csv"]) == strip(second["train_log.csv"])


def test_identical_images_mark_nothing(pair):
    out = pair / "same"
    code = cli.main(["--pre", str(pair / "pre.ppm"), "--post", str(pair / "pre.ppm"), "--out", str(out), *FAST])
    assert code == 0
    cm = read_raster(out / "change_map.pgm", replicate=False)
    assert np.count_nonzero(cm) / cm.size < 0.02


def test_size_mismatch_fails_with_status(pair, caplog):
    write_pgm(pair / "small.pgm", np.zeros((8, 8)))
    code = cli.main(["--pre", str(pair / "pre.ppm"), "--post", str(pair / "small.pgm"), "--out", str(pair / "o"), *FAST])
    assert code == 1 and "differ" in caplog.text


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# settings\nnh = 7\ntheta = 0.6\nprune-rate = 1/8\nalpha = 2,1,1\niters = 50\n")
    args = cli.build_parser().parse_args(["--pre", "a", "--post", "b", "--out", "o", "--config", str(conf), "--iters", "9"])
    cfg = cli.resolve_config(args)
    assert (cfg.nh, cfg.iters, cfg.nl, cfg.patch_size) == (7, 9, 30, 64)
    assert cfg.theta == Fraction(3, 5) and cfg.prune_rate == Fraction(1, 8) and cfg.alpha == (2, 1, 1)
    text = cfg.resolved_text()
    assert "iters = 9\n" in text and "alpha = 2,1,1\n" in text and "gt = \n" in text


def test_config_errors(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("colour = blue\n")
    with pytest.raises(ValueError, match="unknown key"):
        cli.read_config_file(conf)
    parser = cli.build_parser()
    with pytest.raises(ValueError):
        cli.resolve_config(parser.parse_args(["--pre", "a", "--post", "b", "--out", "o", "--bgw", "9"]))
    with pytest.raises(ValueError):
        cli.resolve_config(parser.parse_args(["--pre", "a", "--post", "b", "--out", "o", "--prune-interval", "3"]))
    with pytest.raises(ValueError, match="missing"):
        cli.resolve_config(parser.parse_args(["--pre", "a"]))
    assert cli.main(["--pre", str(tmp_path / "nope.ppm"), "--post", "x", "--out", str(tmp_path / "o")]) == 1
