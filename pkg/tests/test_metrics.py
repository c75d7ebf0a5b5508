import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from depthfuse.core import DepthMap
from depthfuse.corpus import two_planes
from depthfuse.metrics import (MetricsReport, OrdPairs, d3r, depth_metrics, evaluate, median_align,
                               ord_error, sample_edge_pairs)

from oracles import loop_d3r, loop_depth_metrics, loop_ord

SEVEN = ("abs_rel", "sq_rel", "rmse", "log10", "delta1", "delta2", "delta3")


def pairs_of(p0, p1, l):
    return OrdPairs(np.array(p0, dtype=np.int64), np.array(p1, dtype=np.int64), np.array(l, dtype=np.int8))


def three_planes():
    d = np.full((48, 48), 2.0)
    d[:, 16:32] = 4.0
    d[:, 32:] = 3.0
    return DepthMap(d)


# -- depth metrics -------------------------------------------------------------

def test_identity_gives_exact_zero_one_vector(rng):
    gt = DepthMap(rng.uniform(1, 10, (16, 16)))
    for align in (True, False):
        r = depth_metrics(gt, gt, align=align)
        assert [getattr(r, k) for k in SEVEN] == [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        assert r.n_valid == 256


def test_scaled_prediction_deltas():
    gt = DepthMap(np.linspace(1, 5, 64).reshape(8, 8))
    r = depth_metrics(DepthMap(1.3 * gt.values), gt, align=False)
    assert r.delta1 == 0.0 and r.delta2 == 1.0 and r.delta3 == 1.0
    assert r.abs_rel == pytest.approx(0.3, abs=1e-12)


def test_depth_metrics_match_scalar_loop(rng):
    gt = DepthMap(rng.uniform(1, 10, (8, 8)))
    pred = DepthMap(gt.values * rng.uniform(0.6, 1.6, (8, 8)))
    got = depth_metrics(pred, gt, align=False)
    ref = loop_depth_metrics(pred.values, gt.values)
    for k in SEVEN:
        assert abs(getattr(got, k) - ref[k]) < 1e-12, k


def test_depth_metrics_after_alignment_match_loop(rng):
    gt = DepthMap(rng.uniform(1, 10, (8, 8)))
    pred = DepthMap(0.5 * gt.values + 1 + rng.normal(0, 0.2, (8, 8)))
    got = depth_metrics(pred, gt)
    ref = loop_depth_metrics(median_align(pred, gt).values, gt.values)
    for k in SEVEN:
        assert abs(getattr(got, k) - ref[k]) < 1e-12, k


def test_invalid_and_nonpositive_gt_excluded(rng):
    v = rng.uniform(1, 10, (6, 6))
    g = v.copy()
    g[0, 0] = 0.0
    m = np.ones((6, 6), bool)
    m[1, 1] = False
    r = depth_metrics(DepthMap(v), DepthMap(g, m), align=False)
    assert r.n_valid == 34 and r.abs_rel == 0.0
    with pytest.raises(ValueError):
        depth_metrics(DepthMap(v), DepthMap(np.zeros((6, 6))), align=False)
    with pytest.raises(ValueError):
        depth_metrics(DepthMap(v), DepthMap(np.ones((5, 6))))


def test_delta_ordering_on_random_instances():
    r = np.random.default_rng(11)
    for _ in range(100):
        gt = DepthMap(r.uniform(0.5, 20, (10, 10)))
        pred = DepthMap(r.uniform(0.5, 20, (10, 10)))
        rep = depth_metrics(pred, gt, align=bool(r.integers(2)))
        assert 0 <= rep.delta1 <= rep.delta2 <= rep.delta3 <= 1
        assert min(rep.abs_rel, rep.sq_rel, rep.rmse, rep.log10) >= 0


def test_median_align_is_increasing_and_matches_statistics(rng):
    gt = DepthMap(rng.uniform(1, 10, (9, 9)))
    pred = DepthMap(rng.uniform(-3, 3, (9, 9)))
    a = median_align(pred, gt).values
    assert np.median(a) == pytest.approx(np.median(gt.values), abs=1e-12)
    assert np.array_equal(np.argsort(a, axis=None), np.argsort(pred.values, axis=None))


# -- pair sampling -------------------------------------------------------------

def test_constant_gt_labels_are_all_equal():
    p = sample_edge_pairs(DepthMap(np.full((32, 32), 3.0)), n_pairs=300)
    assert p.uniform and len(p) == 300
    assert not p.l.any()


def test_two_planes_cross_edge_labels():
    gt = DepthMap(two_planes(64, 64, 3.0, 6.0))
    p = sample_edge_pairs(gt, tau=0.03, n_pairs=500, seed=4)
    assert not p.uniform and len(p) == 500
    g = gt.values.ravel()
    cross = g[p.p0] != g[p.p1]
    assert cross.any() and (~cross).any()
    assert np.all(p.l[cross] == np.where(g[p.p0[cross]] > g[p.p1[cross]], 1, -1))
    assert np.all(p.l[~cross] == 0)


def test_pairs_respect_geometry(corpus):
    gt = corpus[5][1]
    p = sample_edge_pairs(gt, n_pairs=400, seed=2)
    w = gt.shape[1]
    dy = p.p0 // w - p.p1 // w
    dx = p.p0 % w - p.p1 % w
    assert np.all(p.p0 != p.p1)
    assert np.all(np.hypot(dy, dx) <= 16 + 1.0)


def test_pair_sampling_is_deterministic(corpus):
    gt = corpus[2][1]
    a, b = sample_edge_pairs(gt, seed=9), sample_edge_pairs(gt, seed=9)
    assert np.array_equal(a.p0, b.p0) and np.array_equal(a.p1, b.p1) and np.array_equal(a.l, b.l)
    c = sample_edge_pairs(gt, seed=10)
    assert not np.array_equal(a.p0, c.p0)


def test_tau_must_be_positive():
    with pytest.raises(ValueError):
        sample_edge_pairs(DepthMap(np.ones((8, 8))), tau=0.0)


# -- ORD -----------------------------------------------------------------------

def test_ord_single_pair_closed_forms():
    d = DepthMap(np.array([[2.0, 2.0], [1.0, 3.0]]))
    assert abs(ord_error(d, pairs_of([0], [1], [1])) - math.log(2.0)) < 1e-12
    assert abs(ord_error(d, pairs_of([0], [1], [0]))) < 1e-12
    assert abs(ord_error(d, pairs_of([2], [3], [0])) - 4.0) < 1e-12


def test_ord_matches_scalar_loop(rng):
    v = rng.normal(0, 3, (12, 12))
    n = 100
    p0 = rng.integers(0, 144, n)
    p1 = (p0 + 1 + rng.integers(0, 143, n)) % 144
    pr = pairs_of(p0, p1, rng.integers(-1, 2, n))
    assert abs(ord_error(DepthMap(v), pr) - loop_ord(v, list(pr))) < 1e-10


def test_ord_is_stable_at_large_margins():
    d = DepthMap(np.array([[1000.0, 0.0], [0.0, -1000.0]]))
    assert ord_error(d, pairs_of([0], [3], [1])) < 1e-6
    assert ord_error(d, pairs_of([0], [3], [-1])) == pytest.approx(2000.0)
    assert math.isfinite(ord_error(d, pairs_of([3], [0], [1])))


def test_ord_with_only_equal_pairs_is_mean_square(rng):
    v = rng.standard_normal(50).reshape(5, 10)
    p0, p1 = np.arange(0, 25), np.arange(25, 50)
    got = ord_error(DepthMap(v), pairs_of(p0, p1, np.zeros(25)))
    assert abs(got - np.mean((v.ravel()[p0] - v.ravel()[p1]) ** 2)) < 1e-12


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 5.0))
def test_ord_decreases_when_margins_grow(seed, bump):
    r = np.random.default_rng(seed)
    v = r.standard_normal(40)
    p0, p1 = np.arange(20), np.arange(20, 40)
    lab = r.choice([-1, 1], 20)
    base = ord_error(DepthMap(v.reshape(4, 10)), pairs_of(p0, p1, lab))
    w = v.copy()
    w[p0] += lab * bump
    assert ord_error(DepthMap(w.reshape(4, 10)), pairs_of(p0, p1, lab)) < base


def test_ord_needs_pairs():
    with pytest.raises(ValueError):
        ord_error(DepthMap(np.ones((3, 3))), pairs_of([], [], []))


# -- D3R -----------------------------------------------------------------------

def test_d3r_perfect_and_reversed():
    gt = three_planes()
    assert d3r(gt, gt) == 0.0
    assert d3r(DepthMap(-gt.values), gt) == 1.0


def test_d3r_three_planes_hand_enumerated():
    gt = three_planes()
    # 6x6 cells; discontinuities between cell columns 1|2 (2 vs 4) and 3|4 (4 vs 3), six rows each
    score, count = d3r(gt, gt, return_count=True)
    assert count == 12 and score == 0.0
    pred = gt.values.copy()
    pred[:, 32:] = 5.0  # flips the 4 -> 3 step, keeps the 2 -> 4 step
    assert d3r(DepthMap(pred), gt) == 0.5
    assert d3r(DepthMap(pred), gt) == loop_d3r(pred, gt.values, 8, 0.03)


def test_d3r_matches_loop_oracle(corpus):
    gt = corpus[7][1]
    r = np.random.default_rng(3)
    pred = gt.values + r.normal(0, 0.3, gt.shape)
    assert d3r(DepthMap(pred), gt) == loop_d3r(pred, gt.values, 8, 0.03)


def test_d3r_without_discontinuities():
    gt = DepthMap(np.full((32, 32), 2.0))
    assert d3r(gt, gt, return_count=True) == (0.0, 0)
    with pytest.raises(ValueError):
        d3r(gt, gt, cell=3)


@given(st.integers(0, 2 ** 31 - 1))
def test_d3r_bounded_and_invariant_to_increasing_maps(seed):
    r = np.random.default_rng(seed)
    gt = DepthMap(r.uniform(1, 4, (32, 32)))
    pred = r.uniform(1, 4, (32, 32))
    s = d3r(DepthMap(pred), gt)
    assert 0.0 <= s <= 1.0
    assert d3r(DepthMap(np.exp(pred) * 3 + 1), gt) == s


# -- full report ---------------------------------------------------------------

def test_evaluate_identity_and_flags():
    gt = DepthMap(two_planes(64, 64, 3.0, 6.0))
    rep = evaluate(gt, gt)
    assert rep.abs_rel == 0.0 and rep.d3r == 0.0 and rep.n_pairs == 2000
    assert rep.flags == []
    flat = DepthMap(np.full((32, 32), 2.0))
    rep = evaluate(flat, flat, n_pairs=50)
    assert "ord_pairs_uniform" in rep.flags and "d3r_no_discontinuities" in rep.flags
    assert rep.ord == 0.0


def test_report_dict_round_trip(corpus):
    gt = corpus[1][1]
    pred = DepthMap(gt.values * 1.1 + 0.2)
    rep = evaluate(pred, gt)
    again = MetricsReport.from_dict(rep.to_dict())
    assert again == rep
    assert all(type(v) in (float, int, list) for v in rep.to_dict().values())
