import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oaip.sampling import PatchGrid, affinity, change_scores, patch_means, rank_patches, sample_pairs


def test_patch_means_examples():
    grid = PatchGrid.for_image(4, 4, 2)
    img = np.zeros((4, 4, 3))
    img[:2, :2] = 7.0
    img[2:, 2:, :] = [[0, 10, 0], [10, 0, 10]]
    assert patch_means(img, grid).tolist() == [7.0, 0.0, 0.0, 5.0]
    # edges that do not fill a patch are cropped
    assert PatchGrid.for_image(5, 7, 2).count == 6


def test_patch_means_brute_force():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, (9, 12, 3))
    grid = PatchGrid.for_image(9, 12, 4)
    got = patch_means(img, grid)
    for i in range(grid.count):
        r, c = grid.position(i)
        vals = [img[y, x, ch] for y in range(4 * r, 4 * r + 4) for x in range(4 * c, 4 * c + 4) for ch in range(3)]
        assert math.isclose(got[i], sum(vals) / len(vals), rel_tol=1e-15)


def test_affinity_and_score_examples():
    a = affinity(np.array([0.0, 10.0]))
    assert math.isclose(a[0, 1], math.exp(-1)) and a[0, 0] == 1.0
    assert np.all(affinity(np.full(4, 3.0)) == 1.0)
    scores = change_scores(a, np.ones((2, 2)))
    assert round(scores[0], 5) == 0.63212
    assert not change_scores(a, a).any()


def test_scores_brute_force():
    rng = np.random.default_rng(1)
    m1, m2 = rng.uniform(0, 100, 5), rng.uniform(0, 100, 5)
    a1, a2 = affinity(m1), affinity(m2)
    for i in range(5):
        assert math.isclose(change_scores(a1, a2)[i], sum(abs(a1[i, j] - a2[i, j]) for j in range(5)), rel_tol=1e-12)


def test_ranking_examples():
    pos, neg = rank_patches(np.array([0.1, 0.9, 0.5]), 1, 1)
    assert pos.tolist() == [1] and neg.tolist() == [0]
    pos, neg = rank_patches(np.zeros(6), 2, 3)
    assert pos.tolist() == [0, 1] and neg.tolist() == [2, 3, 4]
    pos, neg = rank_patches(np.arange(3.0), 2, 5)
    assert sorted(pos.tolist() + neg.tolist()) == [0, 1, 2]


means = hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3))


@given(means)
def test_affinity_symmetric_unit_diagonal(m):
    a = affinity(m)
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 1.0)
    assert np.all((a > 0) & (a <= 1))


@given(means, st.integers(-100, 100))
def test_affinity_shift_invariant(m, c):
    # integer-valued means keep the shift exact in floating point
    m = np.round(m)
    assert np.array_equal(affinity(m), affinity(m + c))


@given(st.integers(0, 2**32 - 1))
def test_scores_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    m1, m2 = rng.uniform(0, 9, 6), rng.uniform(0, 9, 6)
    p = rng.permutation(6)
    s = change_scores(affinity(m1), affinity(m2))
    sp = change_scores(affinity(m1[p]), affinity(m2[p]))
    assert np.allclose(sp, s[p], rtol=0, atol=1e-12)


def test_sample_pairs_finds_changed_patch():
    rng = np.random.default_rng(2)
    pre = rng.uniform(100, 110, (32, 32, 3))
    post = pre.copy()
    post[8:16, 16:24] = 250.0
    s = sample_pairs(pre, post, 8, 1, 3)
    assert s.positives.tolist() == [6]
    assert len(s) == 4 and not set(s.positives) & set(s.negatives)
    assert s.pre.shape == (4, 3, 8, 8) and s.signs.tolist() == [-1, 1, 1, 1]
    assert all(int(np.abs(s.post.mantissas[i]).max()) >= 64 for i in range(4))
