import numpy as np
import pytest

from oaip.network import (
    WeightFileError,
    build_network,
    check_structure,
    forward_branch,
    build_cache,
    init_random_weights,
    load_weights,
    remove_filters,
    save_weights,
)
from oaip.tensor import Q8Tensor, dequantize, quantize_batch

SMALL = ((4, 1), (4, 1), (6, 2), (8, 2), (8, 2))


def small_state(seed=0):
    return init_random_weights(build_network(SMALL), seed)


def test_vgg_structure():
    s = build_network()
    assert len(s.layers) == 16
    assert s.prunable == ["conv3_4", "conv4_1", "conv4_2", "conv4_3", "conv4_4", "conv5_1", "conv5_2", "conv5_3", "conv5_4"]
    assert s.trainable == s.taps == ["conv3_4", "conv4_4", "conv5_4"]
    live = s.live_filters
    assert live["conv3_4"] == 256 and all(live[f"conv{b}_{i}"] == 512 for b in (4, 5) for i in range(1, 5))
    assert [x.name for x in s.layers if x.pool_after] == ["conv1_2", "conv2_2", "conv3_4", "conv4_4"]
    check_structure(s)


def test_init_is_deterministic_symmetric_and_scaled():
    s = init_random_weights(build_network(), 3)
    again = init_random_weights(build_network(), 3)
    assert s.same_as(again)
    for spec in s.layers:
        w1, w2 = s.weights[spec.name]
        assert w1 == w2
        assert int(np.abs(w1.mantissas).max()) <= 32
        target = np.sqrt(2.0 / (9 * spec.in_channels))
        std = dequantize(w1).std()
        assert target / 2 <= std <= target * 2


def test_forward_tap_shapes_and_zero_input():
    s = small_state()
    x = quantize_batch(np.random.default_rng(1).normal(size=(2, 3, 32, 32)))
    fwd = forward_branch(s, 0, x)
    assert [t.shape for t in fwd.taps] == [(2, 6, 8, 8), (2, 8, 4, 4), (2, 8, 2, 2)]
    zero = forward_branch(s, 0, Q8Tensor.zeros((3, 16, 16)))
    assert all(not t.mantissas.any() for t in zero.taps)
    with pytest.raises(ValueError):
        forward_branch(s, 0, Q8Tensor.zeros((3, 8, 8)))


def test_cache_is_transparent_and_skips_frozen_layers():
    s = small_state(2)
    x = quantize_batch(np.random.default_rng(2).normal(size=(3, 3, 32, 32)))
    full = forward_branch(s, 1, x)
    cached = forward_branch(s, 1, x, build_cache(s, 1, full))
    assert full.conv_calls == 8 and cached.conv_calls == 8 - s.boundary
    assert all(a == b for a, b in zip(full.taps, cached.taps))


def test_cache_on_full_vgg_runs_nine_of_sixteen():
    s = init_random_weights(build_network(tuple((max(w // 16, 1), d) for w, d in ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4)))), 0)
    x = quantize_batch(np.random.default_rng(0).normal(size=(1, 3, 16, 16)))
    full = forward_branch(s, 0, x)
    cached = forward_branch(s, 0, x, build_cache(s, 0, full))
    assert (full.conv_calls, cached.conv_calls) == (16, 9)
    assert all(a == b for a, b in zip(full.taps, cached.taps))


def test_stale_cache_is_rejected():
    s = small_state()
    x = quantize_batch(np.ones((1, 3, 16, 16)))
    cache = build_cache(s, 0, forward_branch(s, 0, x))
    s.weights["conv1_1"][0] = Q8Tensor(s.weights["conv1_1"][0].mantissas // 2, 0)
    with pytest.raises(ValueError, match="frozen cache"):
        forward_branch(s, 0, x, cache)


def test_remove_filters_updates_both_branches_and_next_layer():
    s = small_state()
    out = remove_filters(s, "conv4_1", [0, 5])
    assert out.live_filters["conv4_1"] == 6 and out.layer("conv4_2").in_channels == 6
    for b in (0, 1):
        assert out.weights["conv4_1"][b].shape == (6, 6, 3, 3)
        assert out.weights["conv4_2"][b].shape == (8, 6, 3, 3)
    check_structure(out)
    assert s.live_filters["conv4_1"] == 8  # input untouched
    x = quantize_batch(np.random.default_rng(3).normal(size=(1, 3, 32, 32)))
    fwd = forward_branch(remove_filters(s, "conv3_2", [1]), 0, x)
    assert fwd.taps[0].shape[1] == 5
    with pytest.raises(ValueError):
        remove_filters(s, "conv2_1", [0])
    with pytest.raises(ValueError):
        remove_filters(s, "conv5_1", list(range(8)))
    with pytest.raises(IndexError):
        remove_filters(s, "conv5_1", [8])


def test_removing_dead_filter_keeps_downstream_accumulators():
    s = small_state(4)
    for b in (0, 1):
        w = s.weights["conv4_1"][b]
        m = w.mantissas.copy()
        m[2] = 0
        s.weights["conv4_1"][b] = Q8Tensor(m, w.exponent)
    x = quantize_batch(np.random.default_rng(4).normal(size=(2, 3, 32, 32)))
    before = forward_branch(s, 0, x)
    after = forward_branch(remove_filters(s, "conv4_1", [2]), 0, x)
    assert all(a == b for a, b in zip(before.taps[1:], after.taps[1:]))


def test_weight_file_round_trip(tmp_path):
    s = small_state(5)
    s = remove_filters(s, "conv3_2", [0, 1])
    path = tmp_path / "w.oaipw"
    save_weights(s, path)
    back = load_weights(path, build_network(SMALL))
    assert back.same_as(s)
    assert path.read_bytes()[:6] == b"OAIPW1"


def test_weight_file_errors(tmp_path):
    s = small_state()
    path = tmp_path / "w.oaipw"
    save_weights(s, path)
    data = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(WeightFileError, match="OAIPW1"):
        load_weights(bad, build_network(SMALL))
    bad.write_bytes(data[:-5])
    with pytest.raises(WeightFileError, match="truncated.*offset"):
        load_weights(bad, build_network(SMALL))
    with pytest.raises(WeightFileError, match="incompatible|in_channels"):
        load_weights(path, build_network(((4, 1), (4, 1), (6, 2), (8, 2), (4, 2))))


def test_pruned_vgg_file_loads_into_default_architecture(tmp_path):
    s = remove_filters(build_network(), "conv3_4", range(56))
    path = tmp_path / "p.oaipw"
    save_weights(s, path)
    back = load_weights(path)
    assert back.live_filters["conv3_4"] == 200 and back.layer("conv4_1").in_channels == 200
