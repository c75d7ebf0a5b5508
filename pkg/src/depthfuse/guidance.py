"""Edge-based guidance losses evaluated against an edge pseudo-label."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import DepthMap, GradientField, SoftMask, lower_quantile
from .distill import align_arrays


@dataclass(frozen=True)
class QuantileSpec:
    a: float = 0.02
    n_w: int = 4

    def __post_init__(self):
        if not (self.a > 0 and self.n_w >= 1 and self.n_w * self.a < 0.5):
            raise ValueError("need a > 0, n_w >= 1 and n_w * a < 0.5")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True, eq=False)
class EdgeRegions:
    """Disjoint pixel sets, each given as (rows, cols) index arrays."""

    regions: tuple
    centroids: np.ndarray
    reduced: bool = False

    def __len__(self):
        return len(self.regions)


def quantile(values, q: float) -> float:
    return lower_quantile(values, q)


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centres = [x[rng.integers(n)]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            i = rng.integers(n)
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.uniform(0.0, tot), side="right"))
            i = min(i, n - 1)
        centres.append(x[i])
        d2 = np.minimum(d2, np.sum((x - x[i]) ** 2, axis=1))
    return np.array(centres, dtype=np.float64)


def kmeans(x, k, seed=0, max_iter=100, tol=0.5):
    """Lloyd iterations from k-means++ seeds; stops when no centre moves ``tol`` or more."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 11])
    c = _kmeans_pp_init(x, k, rng)
    for _ in range(max_iter):
        d2 = np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=2)
        lab = np.argmin(d2, axis=1)
        new = c.copy()
        for j in range(k):
            sel = lab == j
            if sel.any():
                new[j] = x[sel].mean(axis=0)
        moved = np.max(np.sqrt(np.sum((new - c) ** 2, axis=1)))
        c = new
        if moved < tol:
            break
    lab = np.argmin(np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=2), axis=1)
    for j in range(k):
        sel = lab == j
        if sel.any():
            c[j] = x[sel].mean(axis=0)
    return c, lab


def edge_pixels(g: GradientField) -> np.ndarray:
    """Top 5 % of pixels by gradient magnitude (strictly above the 95th percentile)."""
    mag = g.magnitude()
    return (mag > max(lower_quantile(mag, 0.95), 0.0))


def extract_edge_regions(g_s: GradientField, n_g: int = 4, seed: int = 0) -> EdgeRegions:
    """Cluster the binarised edge pixels by position into ``n_g`` disjoint regions."""
    if n_g < 1:
        raise ValueError("n_g must be >= 1")
    ys, xs = np.nonzero(edge_pixels(g_s))
    if ys.size == 0:
        raise ValueError("edge representation has no edge pixels")
    reduced = ys.size < n_g
    k = min(n_g, ys.size)
    pts = np.stack([ys, xs], axis=1).astype(np.float64)
    cent, lab = kmeans(pts, k, seed=seed)
    regions = []
    kept = []
    for j in range(k):
        sel = lab == j
        if sel.any():
            regions.append((ys[sel], xs[sel]))
            kept.append(cent[j])
    reduced = reduced or len(regions) < n_g
    return EdgeRegions(tuple(regions), np.array(kept), reduced)


def _region_entries(a: GradientField, b: GradientField, rows, cols):
    """Entries of both fields at the region pixels, restricted to those defined in both."""
    mx = a.valid_x[rows, cols] & b.valid_x[rows, cols]
    my = a.valid_y[rows, cols] & b.valid_y[rows, cols]
    return tuple(np.concatenate([g.gx[rows, cols][mx], g.gy[rows, cols][my]]) for g in (a, b))


def loss_grad(g0: GradientField, g_s: GradientField, regions: EdgeRegions) -> float:
    """Mean over regions of the per-entry L1 gap after aligning ``g0`` to ``g_s`` in scale and shift.

    The L1 sum of a region is divided by its pixel count so that small and
    large regions weigh alike.
    """
    if g0.shape != g_s.shape:
        raise ValueError("shape mismatch")
    if len(regions) == 0:
        return 0.0
    total = 0.0
    for rows, cols in regions.regions:
        src, tgt = _region_entries(g0, g_s, rows, cols)
        co = align_arrays(src, tgt)
        total += float(np.sum(np.abs(co.beta1 * src + co.beta0 - tgt))) / rows.size
    return total / len(regions)


def loss_fusion(omega: SoftMask, g_s: GradientField, spec: QuantileSpec = QuantileSpec()) -> float:
    """Quantile-synchronisation penalty between omega and the edge magnitude."""
    if omega.shape != g_s.shape:
        raise ValueError("shape mismatch")
    mag = g_s.magnitude().ravel()
    om = omega.w.ravel()
    n_p = mag.size
    acc = 0.0
    for n in range(1, spec.n_w + 1):
        q = n * spec.a
        t_lo, t_hi = quantile(mag, q), quantile(mag, 1.0 - q)
        w_lo, w_hi = quantile(om, q), quantile(om, 1.0 - q)
        acc += float(np.sum(np.maximum(0.0, om[mag < t_lo] - w_lo)))
        acc += float(np.sum(np.maximum(0.0, w_hi - om[mag > t_hi])))
    return acc / (spec.n_w * n_p)


def loss_gt(d0: DepthMap, gt: DepthMap) -> float:
    """Scale-and-shift-invariant mean absolute error."""
    if d0.shape != gt.shape:
        raise ValueError("shape mismatch")
    m = d0.valid & gt.valid
    if m.sum() < 2:
        raise ValueError("need at least two shared valid pixels")
    src, tgt = d0.values[m], gt.values[m]
    co = align_arrays(src, tgt)
    return float(np.mean(np.abs(co.beta1 * src + co.beta0 - tgt)))


def combine_losses(l_gt: float, l_grad: float, l_fusion: float,
                   weights: LossWeights = LossWeights()) -> float:
    """Weighted total, evaluated exactly and rounded once."""
    tot = (Fraction(l_gt) + Fraction(weights.lambda1) * Fraction(l_grad)
           + Fraction(weights.lambda2) * Fraction(l_fusion))
    return float(tot)


def loss_total(d0: DepthMap, gt: DepthMap, g0: GradientField, g_s: GradientField,
               regions: EdgeRegions, omega: SoftMask, qspec: QuantileSpec = QuantileSpec(),
               weights: LossWeights = LossWeights()) -> float:
    return combine_losses(loss_gt(d0, gt), loss_grad(g0, g_s, regions),
                          loss_fusion(omega, g_s, qspec), weights)
