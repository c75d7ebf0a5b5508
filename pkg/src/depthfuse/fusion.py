"""Gradient-domain fusion of a structure (low-res) and a detail (high-res) prediction.

The refined depth minimises, over pixels valid in both inputs,

    sum_p  lambda_value * (1 - omega_p) * (D_p - low_p)^2
  + sum_e  lambda_grad  * omega_e * (D_b - D_a - (high_b - high_a))^2

where ``e = (a, b)`` runs over horizontal and vertical neighbour links and
``omega_e`` is the mean of the mask at its two pixels.  ``omega`` therefore
selects gradient fidelity to ``high`` (edges, detail) against value fidelity
to ``low`` (structure) pixel by pixel.  With ``mean_anchor`` the mean of D is
pinned to the mean of ``low``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _kernels
from .core import DepthMap, GradientField, SoftMask


class SingularSystemError(ValueError):
    """The fusion objective does not determine a unique depth."""


@dataclass(frozen=True)
class FusionParams:
    lambda_value: float = 1.0
    lambda_grad: float = 1.0
    cg_tol: float = 1e-8
    cg_max_iters: int | None = None  # None: 10 * longest pixel side
    mean_anchor: bool = True

    def __post_init__(self):
        if self.lambda_value <= 0 or self.lambda_grad <= 0:
            raise ValueError("fusion weights must be positive")
        if not 0.0 < self.cg_tol < 1.0:
            raise ValueError("cg_tol must lie in (0, 1)")
        if self.cg_max_iters is not None and self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be >= 1")

    def max_iters_for(self, shape) -> int:
        return self.cg_max_iters if self.cg_max_iters is not None else 10 * max(shape)


@dataclass(frozen=True, eq=False)
class FusionResult:
    depth: DepthMap
    omega: SoftMask
    iters: int
    residual: float
    converged: bool
    energy: tuple = ()


def derive_omega(g: GradientField, a: float = 0.02, n_w: int = 4) -> SoftMask:
    """Soft high-frequency mask from the rank of the gradient magnitude.

    Normalised rank (ties share their average rank) below ``a`` maps to 0,
    above ``1 - a`` to 1, linearly in between.  Omega is a non-decreasing
    function of ``|g|``, so its quantiles coincide with those of ``|g|``.
    """
    if not (a > 0 and n_w * a < 0.5):
        raise ValueError("need a > 0 and n_w * a < 0.5")
    mag = g.magnitude().ravel()
    n = mag.size
    if np.ptp(mag) == 0.0:
        return SoftMask(np.full(g.shape, 0.5))
    u = (stats.rankdata(mag, method="average") - 1.0) / (n - 1.0)
    w = np.clip((u - a) / (1.0 - 2.0 * a), 0.0, 1.0)
    return SoftMask(w.reshape(g.shape))


def _system(low: DepthMap, high: DepthMap, omega: SoftMask, p: FusionParams):
    """Weights and right-hand side of the normal equations."""
    if not (low.shape == high.shape == omega.shape):
        raise ValueError(f"shape mismatch: low {low.shape}, high {high.shape}, omega {omega.shape}")
    active = low.valid & high.valid
    om = omega.w
    vw = np.where(active, p.lambda_value * (1.0 - om), 0.0)
    wx = p.lambda_grad * 0.5 * (om[:, 1:] + om[:, :-1]) * (active[:, 1:] & active[:, :-1])
    wy = p.lambda_grad * 0.5 * (om[1:, :] + om[:-1, :]) * (active[1:, :] & active[:-1, :])
    lo = np.where(active, low.values, 0.0)
    hi = np.where(active, high.values, 0.0)
    # inactive pixels become decoupled identity rows with zero target
    vw = np.where(active, vw, 1.0)
    b = vw * lo
    tx = wx * (hi[:, 1:] - hi[:, :-1])
    b[:, 1:] += tx
    b[:, :-1] -= tx
    ty = wy * (hi[1:, :] - hi[:-1, :])
    b[1:, :] += ty
    b[:-1, :] -= ty
    diag = vw.copy()
    diag[:, 1:] += wx
    diag[:, :-1] += wx
    diag[1:, :] += wy
    diag[:-1, :] += wy
    return active, vw, np.ascontiguousarray(wx), np.ascontiguousarray(wy), b, diag, lo


def _check_solvable(active, vw, wx, wy, anchor):
    """Every linked group of active pixels needs a value term, except one if anchored."""
    free = active & (vw <= 0.0)
    if not free.any():
        return
    h, w = active.shape
    idx = np.arange(h * w).reshape(h, w)
    kx = wx > 0
    ky = wy > 0
    rows = np.concatenate([idx[:, :-1][kx], idx[:-1, :][ky]])
    cols = np.concatenate([idx[:, 1:][kx], idx[1:, :][ky]])
    g = coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    _, lab = connected_components(g, directed=False)
    lab = lab.reshape(h, w)
    anchored = np.zeros(lab.max() + 1, dtype=bool)
    anchored[lab[active & (vw > 0.0)]] = True
    floating = np.unique(lab[active & ~anchored[lab]])
    if floating.size > (1 if anchor else 0):
        raise SingularSystemError(
            f"{floating.size} pixel group(s) carry only gradient constraints"
            + ("" if anchor else "; enable mean_anchor or lower omega"))


def poisson_fuse(low: DepthMap, high: DepthMap, omega: SoftMask,
                 p: FusionParams = FusionParams(), record_energy: bool = False) -> FusionResult:
    """Solve the fusion objective by Jacobi-preconditioned conjugate gradient.

    The iteration starts from ``low``, so consistent inputs are returned
    unchanged.  With ``mean_anchor`` the sum constraint is enforced exactly by
    projecting every residual onto the constraint's null space before
    preconditioning.
    A run that hits ``cg_max_iters`` is returned with ``converged=False``.
    """
    active, vw, wx, wy, b, diag, lo = _system(low, high, omega, p)
    _check_solvable(active, vw, wx, wy, p.mean_anchor)
    apply = _kernels.poisson_apply
    inv_m = 1.0 / diag
    c = active.astype(np.float64)
    ncon = float(c.sum())

    if p.mean_anchor:
        cmc = float(np.sum(c * inv_m * c))

        def project(r):
            # drop the multiplier component so r stays small; without this
            # the projected iteration loses conjugacy in floating point
            return r - c * (float(np.sum(c * inv_m * r)) / cmc)

        def measure(r):
            return r - c * (float(np.sum(c * r)) / ncon)
    else:
        def project(r):
            return r

        def measure(r):
            return r

    x = lo.copy()
    r = b - apply(x, vw, wx, wy)
    bnorm = float(np.linalg.norm(measure(b)))
    scale = bnorm if bnorm > 0 else 1.0
    res = float(np.linalg.norm(measure(r))) / scale
    energy = []

    def objective(xv):
        return 0.5 * float(np.sum(xv * apply(xv, vw, wx, wy))) - float(np.sum(b * xv))

    if record_energy:
        energy.append(objective(x))
    max_it = p.max_iters_for(low.shape)
    it = 0
    if res > p.cg_tol:
        r = project(r)
        z = inv_m * r
        pdir = z.copy()
        rz = float(np.sum(r * z))
        while it < max_it:
            q = apply(pdir, vw, wx, wy)
            pq = float(np.sum(pdir * q))
            if pq <= 0.0:
                break
            alpha = rz / pq
            x += alpha * pdir
            r -= alpha * q
            it += 1
            if record_energy:
                energy.append(objective(x))
            res = float(np.linalg.norm(measure(r))) / scale
            if res <= p.cg_tol:
                break
            r = project(r)
            z = inv_m * r
            rz_new = float(np.sum(r * z))
            pdir = z + (rz_new / rz) * pdir
            rz = rz_new
    depth = DepthMap(np.where(active, x, 0.0), active)
    return FusionResult(depth, omega, it, res, res <= p.cg_tol, tuple(energy))


def direct_solve_oracle(low: DepthMap, high: DepthMap, omega: SoftMask,
                        p: FusionParams = FusionParams()) -> DepthMap:
    """Dense reference solve of the same objective, built row by row from its terms."""
    h, w = low.shape
    n = h * w
    if n > 4096:
        raise ValueError("direct oracle limited to 4096 pixels")
    if not (low.shape == high.shape == omega.shape):
        raise ValueError("shape mismatch")
    active = low.valid & high.valid
    om = omega.w
    rows, rhs = [], []
    for i in range(h):
        for j in range(w):
            if not active[i, j]:
                continue
            wt = p.lambda_value * (1.0 - om[i, j])
            if wt > 0:
                row = np.zeros(n)
                row[i * w + j] = np.sqrt(wt)
                rows.append(row)
                rhs.append(np.sqrt(wt) * low.values[i, j])
            for di, dj in ((0, 1), (1, 0)):
                ii, jj = i + di, j + dj
                if ii >= h or jj >= w or not active[ii, jj]:
                    continue
                we = p.lambda_grad * 0.5 * (om[i, j] + om[ii, jj])
                if we <= 0:
                    continue
                row = np.zeros(n)
                row[ii * w + jj] = np.sqrt(we)
                row[i * w + j] = -np.sqrt(we)
                rows.append(row)
                rhs.append(np.sqrt(we) * (high.values[ii, jj] - high.values[i, j]))
    idx = np.flatnonzero(active.ravel())
    a = np.array(rows).reshape(-1, n)[:, idx] if rows else np.zeros((0, idx.size))
    y = np.array(rhs)
    normal = a.T @ a
    rhs_n = a.T @ y
    if p.mean_anchor:
        k = idx.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = normal
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs_k = np.concatenate([rhs_n, [low.values.ravel()[idx].sum()]])
        if np.linalg.matrix_rank(kkt) < k + 1:
            raise SingularSystemError("anchored system is singular")
        sol = np.linalg.solve(kkt, rhs_k)[:k]
    else:
        if np.linalg.matrix_rank(normal) < idx.size:
            raise SingularSystemError("system is singular without a mean anchor")
        sol = np.linalg.solve(normal, rhs_n)
    out = np.zeros(n)
    out[idx] = sol
    return DepthMap(out.reshape(h, w), active)


def refine(pred_low: DepthMap, pred_high: DepthMap, guide: GradientField,
           p: FusionParams = FusionParams(), a: float = 0.02, n_w: int = 4) -> FusionResult:
    """Derive omega from ``guide`` and fuse the two predictions on the common grid."""
    if guide.shape != pred_low.shape:
        raise ValueError("guide must be at the common resolution")
    return poisson_fuse(pred_low, pred_high, derive_omega(guide, a, n_w), p)
