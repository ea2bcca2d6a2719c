import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diptych_edit.data.dataset import generate_pairs, ratio_counts
from diptych_edit.data.scenes import gen_edit_pair
from diptych_edit.data.palette import TASK_TYPES
from diptych_edit.metrics import (binarize_sc, edit_success, feat_sim, keep_region, l1, pq_score, sc_score,
                                  task_error, vie_overall)


def test_vie_overall_grid_exact():
    grid = [i for i in range(11)]
    for sc in grid:
        for pq in grid:
            assert vie_overall(sc, pq) == math.sqrt(sc * pq)
            assert vie_overall(sc, pq) == vie_overall(pq, sc)
    assert len(grid) ** 2 == 121


@given(st.floats(0, 10), st.floats(0, 10))
def test_vie_overall_bounds(sc, pq):
    assert 0 <= vie_overall(sc, pq) <= 10


def test_vie_rejects_out_of_range():
    with pytest.raises(ValueError):
        vie_overall(11, 5)
    with pytest.raises(ValueError):
        vie_overall(5, -0.1)


def test_binarize_sc_threshold_is_inclusive():
    assert binarize_sc(5.0) == 1.0
    assert binarize_sc(4.999999) == 0.0
    assert binarize_sc(10.0, threshold=10.0) == 1.0
    assert binarize_sc(0.0, threshold=0.5) == 0.0
    for bad in (0.0, -1.0, 10.5):
        with pytest.raises(ValueError):
            binarize_sc(5.0, bad)


def test_l1_metric_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b, c = (rng.random((4, 4, 3)) for _ in range(3))
        assert l1(a, a) == 0.0
        assert l1(a, b) == l1(b, a)
        assert l1(a, c) <= l1(a, b) + l1(b, c) + 1e-15


def test_l1_region_handling():
    a, b = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
    region = np.zeros((4, 4), bool)
    assert l1(a, b, region) == 0.0
    region[0, 0] = True
    assert l1(a, b, region) == 1.0
    with pytest.raises(ValueError):
        l1(a, np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        l1(a, b, np.ones((3, 3), bool))


def test_feat_sim_scale_invariance_and_degenerate():
    rng = np.random.default_rng(1)
    a = rng.random((16, 16, 3))
    assert feat_sim(a, a) == pytest.approx(1.0)
    assert feat_sim(a, 0.3 * a) == pytest.approx(1.0)
    assert feat_sim(a, np.full_like(a, 0.5)) == 0.0  # constant image has no centered features


@pytest.mark.parametrize("task", TASK_TYPES)
def test_ground_truth_always_succeeds(task):
    rng = np.random.default_rng(2)
    for i in range(50):
        pair = gen_edit_pair(rng, task, seed=i)
        assert edit_success(pair.target, pair)
        assert task_error(pair.target, pair) == 0.0
        assert sc_score(pair.target, pair) == 10.0


def test_source_fails_as_an_edit():
    pairs = generate_pairs(ratio_counts(200), 5)
    assert sum(edit_success(p.source, p) for p in pairs) == 0


def test_keep_violation_fails():
    rng = np.random.default_rng(3)
    pair = gen_edit_pair(rng, "removal", seed=0)
    bad = pair.target.copy()
    keep = keep_region(pair)
    bad[keep] = 1 - bad[keep]
    assert not edit_success(bad, pair)


def test_pq_score_palette():
    assert pq_score(np.ones((4, 4, 3))) == 10.0
    noisy = np.random.default_rng(0).random((16, 16, 3))
    assert pq_score(noisy) < 10.0
