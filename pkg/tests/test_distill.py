import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter1d

from depthfuse.core import DepthMap, GradientField, Rect, Resolution, gradient
from depthfuse.distill import (AlignCoeffs, DistillParams, DistillState, WindowGrid, WindowTooSmallError,
                               _mean_grad, adaptive_resolution, align_scale_shift, distill_step, feather_weights,
                               init_edge_representation, initial_state, partition, refine_window,
                               run_distillation, update_window, window_prediction)
from depthfuse.fusion import FusionParams
from depthfuse.noise import NoiseSpec, compute_alpha

from oracles import lstsq_align

SHAPES = [(128, 128), (192, 128), (128, 192), (400, 40), (33, 517)]


def step_scene(n=48, edge=24):
    v = np.full((n, n), 2.0)
    v[:, edge:] = 5.0
    return v


def rand_field(r, h, w):
    return GradientField(r.standard_normal((h, w)), r.standard_normal((h, w)))


# -- windows -------------------------------------------------------------------

def test_partition_two_by_two_with_overlap():
    g = partition(128, 128, 1, 0.25)
    assert len(g) == 4
    assert [(r.x0, r.y0, r.x1, r.y1) for r in g.windows] == [
        (0, 0, 80, 80), (48, 0, 128, 80), (0, 48, 80, 128), (48, 48, 128, 128)]


def test_partition_zero_overlap_quadrants():
    g = partition(100, 100, 1, 0.0)
    assert [(r.x0, r.y0, r.x1, r.y1) for r in g.windows] == [
        (0, 0, 50, 50), (50, 0, 100, 50), (0, 50, 50, 100), (50, 50, 100, 100)]
    assert np.all(g.coverage() == 1)


def test_partition_three_by_three():
    g = partition(128, 128, 2)
    assert len(g) == 9 and g.coverage().min() >= 1


@pytest.mark.parametrize("h,w", SHAPES)
def test_partition_covers_every_pixel(h, w):
    for s in range(1, 7):
        try:
            g = partition(w, h, s)
        except WindowTooSmallError:
            assert min(h, w) * 1.25 / (s + 1) < 16 + 1
            continue
        assert len(g) == (s + 1) ** 2
        assert g.coverage().min() >= 1
        sides = {(r.width, r.height) for r in g.windows}
        assert len(sides) == 1


def test_neighbouring_windows_overlap():
    g = partition(160, 160, 1, 0.25)
    a, b = g.windows[0], g.windows[1]
    assert a.x1 - b.x0 == 40  # 100-px windows centred at 40 and 120


def test_partition_rejects_bad_arguments():
    with pytest.raises(ValueError):
        partition(64, 64, 0)
    with pytest.raises(ValueError):
        partition(64, 64, 1, 0.5)
    with pytest.raises(WindowTooSmallError):
        partition(40, 40, 3)


def test_feather_weights_shape_and_range():
    f = feather_weights(Rect(48, 0, 128, 80), 128, 128, 10)
    assert f.shape == (80, 80)
    assert f[0, -1] == 1.0  # image corner keeps full weight
    assert f[-1, 0] == pytest.approx(0.01)  # both interior borders ramp
    assert np.all((f > 0) & (f <= 1))


# -- alignment -----------------------------------------------------------------

def test_align_identity_and_in_family(rng):
    g = rand_field(rng, 6, 6)
    c = align_scale_shift(g, g)
    assert (c.beta1, c.beta0) == pytest.approx((1.0, 0.0), abs=1e-14)
    c = align_scale_shift(g, g.affine(2.0, 3.0))
    assert abs(c.beta1 - 2.0) < 1e-12 and abs(c.beta0 - 3.0) < 1e-12 and not c.degenerate


def test_align_matches_normal_equation_oracle(rng):
    a, b = rand_field(rng, 6, 6), rand_field(rng, 6, 6)
    c = align_scale_shift(a, b)
    ref = lstsq_align(a.entries(), b.entries())
    assert abs(c.beta1 - ref[0]) < 1e-10 and abs(c.beta0 - ref[1]) < 1e-10


def test_align_uses_shared_entries_only(rng):
    a = rand_field(rng, 5, 5)
    vx = np.ones((5, 5), bool)
    vx[:, -1] = False
    vx[2, 1] = False
    b = GradientField(2 * a.gx + 1, 2 * a.gy + 1, vx, a.valid_y)
    c = align_scale_shift(a, b)
    assert abs(c.beta1 - 2) < 1e-12 and abs(c.beta0 - 1) < 1e-12


def test_align_constant_source_is_degenerate(rng):
    src = GradientField(np.full((4, 4), 0.5), np.full((4, 4), 0.5))
    tgt = rand_field(rng, 4, 4)
    c = align_scale_shift(src, tgt)
    assert c.degenerate and c.reason == "constant_source" and c.beta1 == 1.0
    assert c.beta0 == pytest.approx(np.mean(tgt.entries() - src.entries()), abs=1e-14)


def test_align_reversed_target_flagged(rng):
    a = rand_field(rng, 5, 5)
    c = align_scale_shift(a, a.affine(-1.0, 0.0))
    assert c.degenerate and c.reason == "nonpositive_scale"


def test_align_depth_maps_and_errors(rng):
    d = DepthMap(rng.uniform(1, 3, (4, 4)))
    c = align_scale_shift(d, DepthMap(0.5 * d.values - 1))
    assert (c.beta1, c.beta0) == pytest.approx((0.5, -1.0), abs=1e-12)
    with pytest.raises(ValueError):
        align_scale_shift(np.array([1.0]), np.array([2.0]))
    with pytest.raises(ValueError):
        AlignCoeffs(float("nan"), 0.0)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.5, 2.0), st.floats(-5.0, 5.0))
def test_align_recovers_planted_coefficients(seed, b1, b0):
    g = rand_field(np.random.default_rng(seed), 7, 7)
    c = align_scale_shift(g, g.affine(b1, b0))
    assert abs(c.beta1 - b1) < 1e-9 and abs(c.beta0 - b0) < 1e-9


@given(st.integers(0, 2 ** 31 - 1))
def test_alignment_is_idempotent(seed):
    r = np.random.default_rng(seed)
    a, b = rand_field(r, 6, 6), rand_field(r, 6, 6)
    c = align_scale_shift(a, b)
    aligned = a.affine(c.beta1, c.beta0)
    again = align_scale_shift(aligned, b)
    assert abs(again.beta1 - 1) < 1e-10 and abs(again.beta0) < 1e-10


# -- edge representation -------------------------------------------------------

def test_init_edge_constant_and_ramp():
    g = init_edge_representation(DepthMap(np.full((10, 10), 3.0)))
    assert not g.gx.any() and not g.gy.any()
    k = 0.4
    g = init_edge_representation(DepthMap(np.tile(k * np.arange(12.0), (9, 1))))
    assert np.allclose(g.gx[g.valid_x], k, atol=1e-14)
    assert np.allclose(g.gy[g.valid_y], 0.0, atol=1e-14)


def test_init_edge_preserves_step_peak():
    d = DepthMap(step_scene())
    raw = gradient(d).magnitude().max()
    g = init_edge_representation(d, 1.0, 0.1 * raw)
    assert g.magnitude().max() >= 0.9 * raw
    assert init_edge_representation(d).magnitude().max() >= 0.9 * raw


# -- window update -------------------------------------------------------------

def test_update_window_fixed_point(corpus):
    d = corpus[4][1].crop(Rect(0, 0, 96, 96))
    state = DistillState(0, d, init_edge_representation(d))
    w = Rect(16, 24, 80, 72)
    u = refine_window(state, w, d.crop(w))
    assert np.max(np.abs(u.depth.values - d.crop(w).values)) < 1e-12
    prev_g = state.G.crop(w)
    # the new gradient is aligned onto the old edges; only the alignment residual remains
    new = update_window(state, w, d.crop(w))
    ga = new.G.crop(w)
    ref = gradient(d.crop(w)).affine(u.coeffs.beta1, u.coeffs.beta0)
    assert np.max(np.abs(ga.gx[ga.valid_x] - ref.gx[ref.valid_x])) < 1e-12
    resid = np.mean(np.abs(ref.entries() - prev_g.entries()))
    assert resid < 0.1 * np.mean(np.abs(prev_g.entries()))
    assert np.array_equal(new.D.values, state.D.values)


def test_update_window_noise_free_edges_are_fixed_point():
    # a ramp has a constant gradient, which the bilateral filter keeps exactly
    d = DepthMap(np.tile(0.3 * np.arange(40.0), (40, 1)) + np.arange(40.0)[:, None] * 0.1)
    state = DistillState(0, d, init_edge_representation(d))
    w = Rect(8, 8, 32, 32)
    new = update_window(state, w, d.crop(w))
    a, b = new.G.crop(w), state.G.crop(w)
    assert np.max(np.abs(a.gx[a.valid_x] - b.gx[b.valid_x])) < 1e-6


def test_update_window_flat_takes_degenerate_path():
    d = DepthMap(np.full((32, 32), 2.0))
    g = GradientField(np.full((32, 32), 0.25), np.zeros((32, 32)))
    state = DistillState(0, d, g)
    w = Rect(0, 0, 32, 32)
    u = refine_window(state, w, d)
    assert u.coeffs.degenerate and u.coeffs.reason == "constant_source"
    new = update_window(state, w, d)
    # a flat window carries no edge shape, only the mean of the old edges
    assert np.allclose(new.G.entries(), state.G.entries().mean(), atol=1e-14)
    const = DistillState(0, d, GradientField(np.full((32, 32), 0.25), np.full((32, 32), 0.25)))
    again = update_window(const, w, d)
    assert np.allclose(again.G.entries(), const.G.entries(), atol=1e-14)


def test_update_window_sharper_prediction_raises_edge_energy():
    v = step_scene()
    prev = DepthMap(gaussian_filter1d(v, 3.0, axis=1))
    high = DepthMap(gaussian_filter1d(v, 1.0, axis=1))
    state = DistillState(0, prev, init_edge_representation(prev))
    new = update_window(state, Rect(0, 0, 48, 48), high)
    before = np.abs(state.G.gx[:, 23]).mean()
    after = np.abs(new.G.gx[:, 23]).mean()
    assert after > 1.2 * before


def test_refine_window_rejects_wrong_prediction_size(corpus):
    d = corpus[0][1]
    state = DistillState(0, d, init_edge_representation(d))
    with pytest.raises(ValueError):
        refine_window(state, Rect(0, 0, 20, 20), DepthMap(np.ones((10, 10))))


def test_state_validation():
    d = DepthMap(np.ones((8, 8)))
    with pytest.raises(ValueError):
        DistillState(0, d, GradientField.zeros(8, 9))
    with pytest.raises(ValueError):
        DistillState(-1, d, GradientField.zeros(8, 8))


# -- adaptive resolution -------------------------------------------------------

def test_adaptive_resolution_examples():
    r = Resolution(192)
    assert adaptive_resolution(r, r, 0.3, 0.3) == r
    assert adaptive_resolution(r, r, 0.15, 0.3) == Resolution(96)
    assert adaptive_resolution(r, r, 0.3, 0.3, 2.0, 1.0) == Resolution(384)
    assert adaptive_resolution(r, r, 0.3, 0.3, 5.0, 1.0) == Resolution(384)
    assert adaptive_resolution(r, r, 0.01, 0.3) == Resolution(96)
    # the third term is ignored for the initial prediction and for a flat image
    assert adaptive_resolution(r, r, 0.3, 0.3, 2.0, 1.0, initial=True) == r
    assert adaptive_resolution(r, r, 0.3, 0.3, 2.0, 0.0) == r
    assert adaptive_resolution(r, Resolution(96), 0.3, 0.3) == Resolution(144)
    with pytest.raises(ValueError):
        adaptive_resolution(r, r, 0.3, 0.0)


@given(st.integers(2, 2000), st.integers(2, 2000), st.floats(0, 10), st.floats(0.01, 10),
       st.floats(0, 10), st.floats(0, 10))
def test_adaptive_resolution_stays_in_clamp(rh, rs, mg, al, mw, mgl):
    h = adaptive_resolution(Resolution(rh), Resolution(rs), mg, al, mw, mgl).long_side
    assert round(rh / 2) - 1 <= h <= 2 * max(rh, rs) + 1


# -- driver --------------------------------------------------------------------

@pytest.mark.parametrize("index", [0, 3, 4])
def test_noiseless_pipeline_is_fixed_point(corpus, index):
    ideal = corpus[index][1]
    tol = 10 * FusionParams().cg_tol * np.abs(ideal.values).max()
    state, hist, recs = run_distillation(ideal, NoiseSpec.zero(), 3, keep_states=True)
    for rec in recs:
        assert np.max(np.abs(rec.state.D.values - ideal.values)) <= tol
    assert len(hist) == 4 and hist[-1].abs_rel < 1e-9


def test_single_full_window_equals_extra_global_refinement(corpus):
    ideal = corpus[2][1]
    noise = NoiseSpec(seed=3)
    p = DistillParams(overlap_frac=0.0)

    def full(width, height, s):
        return WindowGrid(s, (Rect(0, 0, width, height),), 0.0, width, height)

    final, _ = run_distillation(ideal, noise, 1, p, grid_fn=full)
    alpha = compute_alpha([ideal])
    s0, _ = initial_state(ideal, noise, p, alpha)
    w = Rect(0, 0, ideal.width, ideal.height)
    high, _ = window_prediction(ideal, s0, w, 1, 0, noise, p, alpha, _mean_grad(s0.G))
    u = refine_window(s0, w, high, p.fusion, p.a, p.n_w)
    assert np.max(np.abs(final.D.values - u.depth.values)) < 1e-8
    assert np.max(np.abs(final.G.gx - u.edges.gx)) < 1e-8
    assert np.max(np.abs(final.G.gy - u.edges.gy)) < 1e-8


def test_distillation_is_deterministic(corpus):
    ideal = corpus[5][1]
    a, ha = run_distillation(ideal, NoiseSpec(seed=5), 2)
    b, hb = run_distillation(ideal, NoiseSpec(seed=5), 2)
    assert np.array_equal(a.D.values, b.D.values)
    assert np.array_equal(a.G.gx, b.G.gx) and np.array_equal(a.G.gy, b.G.gy)
    assert [h.to_dict() for h in ha] == [h.to_dict() for h in hb]


def test_window_order_does_not_change_merge(corpus):
    ideal = corpus[1][1]
    noise = NoiseSpec(seed=1)
    p = DistillParams()
    s0, _ = initial_state(ideal, noise, p, 0.3)
    grid = partition(ideal.width, ideal.height, 1)
    a, ha, _ = distill_step(ideal, s0, grid, noise, p, 0.3)
    b, hb, _ = distill_step(ideal, s0, grid, noise, p, 0.3)
    assert np.array_equal(a.D.values, b.D.values) and ha == hb
    assert a.s == 1 and len(ha) == 4


def test_run_distillation_rejects_bad_input(corpus):
    with pytest.raises(ValueError):
        run_distillation(corpus[0][1], NoiseSpec(), -1)
    v = np.ones((32, 32))
    v[0, 0] = np.nan
    with pytest.raises(ValueError):
        run_distillation(DepthMap(v), NoiseSpec(), 0)
