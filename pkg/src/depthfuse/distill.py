"""Coarse-to-fine refinement of the depth edge representation.

Iteration 0 fuses two whole-image predictions.  Iteration ``s`` splits the
image into ``(s+1)**2`` overlapping windows, re-predicts each window at an
adaptive resolution, fuses it against the previous depth, aligns the new
window gradient to the previous edge representation and merges everything
back with feathered weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DepthMap, GradientField, Rect, Resolution, bilateral_filter, gradient
from .fusion import FusionParams, FusionResult, refine
from .metrics import evaluate, sample_edge_pairs
from .noise import NoiseSpec, compute_alpha, predict_native

MIN_WINDOW_PX = 16
DEGENERATE_VAR = 1e-12


class NonConvergenceError(RuntimeError):
    """A fusion solve stopped at its iteration cap."""


class WindowTooSmallError(ValueError):
    pass


# --------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowGrid:
    s: int
    windows: tuple
    overlap_frac: float
    width: int
    height: int

    def __len__(self):
        return len(self.windows)

    def coverage(self) -> np.ndarray:
        c = np.zeros((self.height, self.width), dtype=np.int32)
        for r in self.windows:
            c[r.slices] += 1
        return c


def axis_intervals(n: int, k: int, overlap_frac: float):
    """``k`` intervals of equal length with uniformly spaced centres, shifted inside [0, n)."""
    side = math.ceil(n * (1.0 + overlap_frac) / k)
    side = min(side, n)
    out = []
    for i in range(k):
        c = (i + 0.5) * n / k
        start = math.floor(c - side / 2.0)
        start = min(max(start, 0), n - side)
        out.append((start, start + side))
    return out


def partition(width: int, height: int, s: int, overlap_frac: float = 0.25) -> WindowGrid:
    if s < 1:
        raise ValueError("partition needs s >= 1")
    if not 0.0 <= overlap_frac < 0.5:
        raise ValueError("overlap_frac must lie in [0, 0.5)")
    k = s + 1
    xs = axis_intervals(width, k, overlap_frac)
    ys = axis_intervals(height, k, overlap_frac)
    if xs[0][1] - xs[0][0] < MIN_WINDOW_PX or ys[0][1] - ys[0][0] < MIN_WINDOW_PX:
        raise WindowTooSmallError(
            f"{width}x{height} image is too small for iteration {s}: windows under {MIN_WINDOW_PX} px")
    wins = tuple(Rect(x0, y0, x1, y1) for (y0, y1) in ys for (x0, x1) in xs)
    return WindowGrid(s, wins, overlap_frac, width, height)


def feather_weights(r: Rect, width: int, height: int, ramp: int) -> np.ndarray:
    """Linear ramp from the window's interior borders inwards, flat 1 against image borders."""
    def axis(a0, a1, n):
        t = np.arange(a1 - a0, dtype=np.float64)
        w = np.ones(a1 - a0)
        if a0 > 0:
            w = np.minimum(w, (t + 1.0) / ramp)
        if a1 < n:
            w = np.minimum(w, (a1 - a0 - t) / ramp)
        return w
    return np.outer(axis(r.y0, r.y1, height), axis(r.x0, r.x1, width))


# --------------------------------------------------------------------------
# alignment


@dataclass(frozen=True)
class AlignCoeffs:
    beta1: float
    beta0: float
    degenerate: bool = False
    reason: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.beta1) and math.isfinite(self.beta0)):
            raise ValueError("alignment coefficients must be finite")


def align_arrays(source, target) -> AlignCoeffs:
    """Least-squares ``beta1 * source + beta0 ~ target`` over paired samples."""
    x = np.asarray(source, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("source and target sizes differ")
    if x.size < 2:
        raise ValueError("alignment needs at least two shared entries")
    mx, my = x.mean(), y.mean()
    dx = x - mx
    var = float(np.mean(dx * dx))
    if var < DEGENERATE_VAR:
        return AlignCoeffs(1.0, float(np.mean(y - x)), True, "constant_source")
    b1 = float(np.mean(dx * (y - my))) / var
    b0 = float(my - b1 * mx)
    if b1 <= 0.0:
        return AlignCoeffs(b1, b0, True, "nonpositive_scale")
    return AlignCoeffs(b1, b0)


def align_scale_shift(source, target) -> AlignCoeffs:
    """Scale and shift taking ``source`` onto ``target``.

    Gradient fields are matched on entries defined in both, with the two
    channels pooled; depth maps on pixels valid in both.
    """
    if isinstance(source, GradientField) and isinstance(target, GradientField):
        if source.shape != target.shape:
            raise ValueError("shape mismatch")
        mx = source.valid_x & target.valid_x
        my = source.valid_y & target.valid_y
        return align_arrays(np.concatenate([source.gx[mx], source.gy[my]]),
                            np.concatenate([target.gx[mx], target.gy[my]]))
    if isinstance(source, DepthMap) and isinstance(target, DepthMap):
        m = source.valid & target.valid
        return align_arrays(source.values[m], target.values[m])
    return align_arrays(source, target)


# --------------------------------------------------------------------------
# state and updates


@dataclass(frozen=True, eq=False)
class DistillState:
    s: int
    D: DepthMap
    G: GradientField

    def __post_init__(self):
        if self.D.shape != self.G.shape:
            raise ValueError("depth and edge representation differ in size")
        if self.s < 0:
            raise ValueError("iteration index must be >= 0")


def default_sigma_range(g: GradientField, frac: float = 0.1) -> float:
    peak = float(g.magnitude().max())
    return frac * peak if peak > 0 else 1.0


def init_edge_representation(d0: DepthMap, sigma_s: float = 1.0,
                             sigma_r: float | None = None) -> GradientField:
    """Bilateral-smoothed gradient of the first refined depth."""
    g = gradient(d0)
    if sigma_r is None:
        sigma_r = default_sigma_range(g)
    return bilateral_filter(g, sigma_s, sigma_r)


@dataclass(frozen=True, eq=False)
class WindowUpdate:
    rect: Rect
    depth: DepthMap
    edges: GradientField
    coeffs: AlignCoeffs
    fusion: FusionResult


def refine_window(prev: DistillState, w: Rect, pred_high: DepthMap,
                  fp: FusionParams = FusionParams(), a: float = 0.02, n_w: int = 4) -> WindowUpdate:
    """Fuse one window against the previous iteration; does not touch ``prev``."""
    w.check_inside(prev.D.width, prev.D.height)
    if pred_high.shape != (w.height, w.width):
        raise ValueError(f"window prediction is {pred_high.shape}, window is {(w.height, w.width)}")
    guide = prev.G.crop(w)
    res = refine(prev.D.crop(w), pred_high, guide, fp, a, n_w)
    gd = gradient(res.depth)
    co = align_scale_shift(gd, guide)
    return WindowUpdate(w, res.depth, gd.affine(co.beta1, co.beta0), co, res)


class WindowMerger:
    """Accumulates window results into the next state as a feather-weighted average.

    Windows are added one at a time in grid order, which fixes the floating
    point summation order regardless of how the windows were computed.
    Pixels and entries no window defines keep their previous values.
    """

    def __init__(self, prev: DistillState, ramp: int = 1):
        h, w = prev.D.shape
        self.prev = prev
        self.ramp = max(int(ramp), 1)
        self.dsum = np.zeros((h, w))
        self.dw = np.zeros((h, w))
        self.xsum = np.zeros((h, w))
        self.xw = np.zeros((h, w))
        self.ysum = np.zeros((h, w))
        self.yw = np.zeros((h, w))

    def add(self, u: WindowUpdate):
        h, w = self.prev.D.shape
        sl = u.rect.slices
        f = feather_weights(u.rect, w, h, self.ramp)
        fd = f * u.depth.valid
        self.dsum[sl] += fd * u.depth.values
        self.dw[sl] += fd
        fx = f * u.edges.valid_x
        self.xsum[sl] += fx * u.edges.gx
        self.xw[sl] += fx
        fy = f * u.edges.valid_y
        self.ysum[sl] += fy * u.edges.gy
        self.yw[sl] += fy

    def finish(self, s: int) -> DistillState:
        p = self.prev
        d = _blend(p.D.values, self.dsum, self.dw)
        gx = _blend(p.G.gx, self.xsum, self.xw)
        gy = _blend(p.G.gy, self.ysum, self.yw)
        return DistillState(s, DepthMap(d, p.D.valid),
                            GradientField(gx, gy, p.G.valid_x, p.G.valid_y))


def _blend(old, acc, wt):
    out = np.array(old, dtype=np.float64, copy=True)
    m = wt > 0
    out[m] = acc[m] / wt[m]
    return out


def update_window(state: DistillState, w: Rect, pred_high: DepthMap,
                  fp: FusionParams = FusionParams(), a: float = 0.02, n_w: int = 4,
                  ramp: int = 1) -> DistillState:
    """Refine a single window and feather it into ``state`` (weight 1 inside, ramping at interior borders)."""
    u = refine_window(state, w, pred_high, fp, a, n_w)
    h, wd = state.D.shape
    f = feather_weights(w, wd, h, ramp)
    sl = w.slices

    def mix(old, new, mask):
        out = np.array(old, dtype=np.float64, copy=True)
        t = f * mask
        out[sl] = t * new + (1.0 - t) * out[sl]
        return out

    d = mix(state.D.values, u.depth.values, u.depth.valid)
    gx = mix(state.G.gx, u.edges.gx, u.edges.valid_x)
    gy = mix(state.G.gy, u.edges.gy, u.edges.valid_y)
    return DistillState(state.s, DepthMap(d, state.D.valid),
                        GradientField(gx, gy, state.G.valid_x, state.G.valid_y))


# --------------------------------------------------------------------------
# resolution


def adaptive_resolution(r_hat: Resolution, r_sw: Resolution, mean_grad_low: float, alpha: float,
                        mean_grad_window: float = 1.0, mean_grad_global: float = 1.0,
                        initial: bool = False) -> Resolution:
    """High inference resolution for a window, scaled by edge density and clamped."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    base = 0.5 * (r_hat.long_side + r_sw.long_side)
    ratio = 1.0 if (initial or mean_grad_global <= 0) else mean_grad_window / mean_grad_global
    h = base * (mean_grad_low / alpha) * ratio
    lo = r_hat.long_side / 2.0
    hi = 2.0 * max(r_hat.long_side, r_sw.long_side)
    h = min(max(h, lo), hi)
    return Resolution(max(int(round(h)), 2))


def _mean_grad(g: GradientField) -> float:
    mag = g.magnitude()
    m = g.valid_x | g.valid_y
    return float(mag[m].mean()) if m.any() else 0.0


# --------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class DistillParams:
    fusion: FusionParams = FusionParams()
    a: float = 0.02
    n_w: int = 4
    overlap_frac: float = 0.25
    r_hat: Resolution = Resolution(192)
    alpha: float | None = None  # None: computed from the scene itself
    sigma_spatial: float = 1.0
    sigma_range: float | None = None  # None: 10 % of the peak gradient magnitude
    tau: float = 0.03
    n_pairs: int = 2000
    metric_seed: int = 0
    cell: int = 8
    strict: bool = True


@dataclass(frozen=True, eq=False)
class IterationRecord:
    s: int
    state: DistillState
    resolutions: tuple = ()
    flags: tuple = ()


def _check(res: FusionResult, params: DistillParams, where: str):
    if params.strict and not res.converged:
        raise NonConvergenceError(f"fusion did not converge at {where} (residual {res.residual:.3e})")


def initial_state(ideal: DepthMap, noise: NoiseSpec, params: DistillParams, alpha: float):
    """Whole-image fusion of the low and adaptive high predictions, plus G0."""
    r_img = Resolution(ideal.long_side)
    low = predict_native(ideal, params.r_hat, noise, (params.r_hat.long_side, 0, 0, 0))
    mg_low = _mean_grad(gradient(low))
    h = adaptive_resolution(params.r_hat, r_img, mg_low, alpha, initial=True)
    high = predict_native(ideal, h, noise, (h.long_side, 0, 0, 1))
    guide = bilateral_filter(gradient(low), params.sigma_spatial,
                             params.sigma_range or default_sigma_range(gradient(low)))
    res = refine(low, high, guide, params.fusion, params.a, params.n_w)
    _check(res, params, "s=0")
    g0 = init_edge_representation(res.depth, params.sigma_spatial, params.sigma_range)
    return DistillState(0, res.depth, g0), (h.long_side,)


def window_prediction(ideal: DepthMap, prev: DistillState, w: Rect, s: int, k: int,
                      noise: NoiseSpec, params: DistillParams, alpha: float, g_global: float):
    """Simulated prediction of window ``k`` at its adaptive resolution."""
    r_sw = Resolution(max(w.width, w.height))
    mg_low = _mean_grad(gradient(prev.D.crop(w)))
    mg_win = _mean_grad(prev.G.crop(w))
    h = adaptive_resolution(params.r_hat, r_sw, mg_low, alpha, mg_win, g_global)
    return predict_native(ideal.crop(w), h, noise, (h.long_side, s, k, 1)), h


def distill_step(ideal: DepthMap, prev: DistillState, grid: WindowGrid, noise: NoiseSpec,
                 params: DistillParams, alpha: float):
    s = prev.s + 1
    g_global = _mean_grad(prev.G)
    ramp = max(1, int(round(params.overlap_frac * min(grid.windows[0].width, grid.windows[0].height))))
    merger = WindowMerger(prev, ramp)
    hs, flags = [], []
    for k, w in enumerate(grid.windows):
        high, h = window_prediction(ideal, prev, w, s, k, noise, params, alpha, g_global)
        u = refine_window(prev, w, high, params.fusion, params.a, params.n_w)
        _check(u.fusion, params, f"s={s} window {k}")
        if u.coeffs.degenerate:
            flags.append(f"window {k}: {u.coeffs.reason}")
        merger.add(u)
        hs.append(h.long_side)
    return merger.finish(s), tuple(hs), tuple(flags)


def run_distillation(ideal: DepthMap, noise: NoiseSpec, S: int, params: DistillParams = DistillParams(),
                     grid_fn=None, keep_states: bool = False):
    """Run iterations 0..S and score every refined depth against ``ideal``.

    Returns ``(final_state, history)`` where ``history`` holds one
    MetricsReport per iteration.  ``grid_fn(width, height, s)`` overrides
    the window layout.  With ``keep_states`` a third element lists the
    per-iteration records.
    """
    if S < 0:
        raise ValueError("S must be >= 0")
    if not ideal.dense:
        raise ValueError("ideal depth must be dense")
    alpha = params.alpha if params.alpha is not None else compute_alpha([ideal])
    if alpha <= 0:
        alpha = 1.0
    if grid_fn is None:
        def grid_fn(width, height, s):
            return partition(width, height, s, params.overlap_frac)
    pairs = sample_edge_pairs(ideal, params.tau, params.n_pairs, params.metric_seed)

    def score(st):
        return evaluate(st.D, ideal, params.tau, params.n_pairs, params.metric_seed,
                        params.cell, pairs=pairs)

    state, hs = initial_state(ideal, noise, params, alpha)
    history = [score(state)]
    records = [IterationRecord(0, state, hs)]
    for s in range(1, S + 1):
        grid = grid_fn(ideal.width, ideal.height, s)
        state, hs, flags = distill_step(ideal, state, grid, noise, params, alpha)
        rep = score(state)
        rep.flags.extend(flags)
        history.append(rep)
        records.append(IterationRecord(s, state, hs, flags))
    if keep_states:
        return state, history, records
    return state, history
