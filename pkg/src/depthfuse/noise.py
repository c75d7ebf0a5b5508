"""Synthetic degradations of an ideal depth map, their fitting, and a simulated predictor.

A prediction is modelled as ``ideal + cons + edge``:

* ``cons`` (local inconsistency): the image is tiled by overlapping patches;
  inside each patch every depth-connected region gets its own affine map
  ``d -> b1*d + b0``.  Each pixel takes the map of the patch whose centre is
  nearest, so the field is exactly affine on every (patch, region) piece.
* ``edge`` (edge deformation): a down/up-sampling round trip residual plus a
  sum of small Gaussian bumps whose centres sit in a band around depth edges.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _kernels
from .core import DepthMap, Resolution, gradient, lower_quantile, psnr, resample, resample_to_shape

EDGE_PERCENTILE = 0.95
EDGE_BAND_PX = 3
BLOBS_PER_PIXEL = 500.0 / (128 * 128)


class NoiseWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    patch_size: int = 64
    patch_overlap: int | None = None
    scale_sigma: float = 0.02
    shift_sigma: float = 0.05
    edge_blur_resolution: Resolution | None = Resolution(48)
    n_gaussians: int | None = None
    blob_sigma: float = 1.5
    blob_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.patch_overlap is None:
            object.__setattr__(self, "patch_overlap", self.patch_size // 2)
        if isinstance(self.edge_blur_resolution, int):
            object.__setattr__(self, "edge_blur_resolution", Resolution(self.edge_blur_resolution))
        if self.patch_size < 8:
            raise ValueError("patch_size must be >= 8")
        if not 0 <= self.patch_overlap < self.patch_size:
            raise ValueError("patch_overlap must lie in [0, patch_size)")
        if min(self.scale_sigma, self.shift_sigma, self.blob_amplitude) < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be positive")
        if self.n_gaussians is not None and self.n_gaussians < 0:
            raise ValueError("n_gaussians must be >= 0")

    @classmethod
    def zero(cls, **kw):
        """A spec that leaves the ideal depth untouched."""
        base = dict(scale_sigma=0.0, shift_sigma=0.0, edge_blur_resolution=None,
                    n_gaussians=0, blob_amplitude=0.0)
        base.update(kw)
        return cls(**base)

    def blob_count(self, height, width) -> int:
        if self.n_gaussians is not None:
            return self.n_gaussians
        return int(round(BLOBS_PER_PIXEL * height * width))

    @property
    def blob_radius(self) -> int:
        return int(math.ceil(4.0 * self.blob_sigma))


@dataclass(frozen=True, eq=False)
class NoiseField:
    cons: np.ndarray
    edge: np.ndarray

    @property
    def total(self):
        return self.cons + self.edge


@dataclass(frozen=True)
class GaussianBlob:
    cx: float
    cy: float
    sigma: float
    amplitude: float


def _require_dense(d: DepthMap, what="ideal depth"):
    if not d.dense:
        raise ValueError(f"{what} must be dense (no invalid pixels)")


def _rng(spec: NoiseSpec, kind: int, stream):
    return np.random.default_rng([int(spec.seed) & 0xFFFFFFFF, kind, *[int(s) for s in stream]])


# --------------------------------------------------------------------------
# edge segmentation


def edge_threshold(ideal: DepthMap) -> float:
    """95th-percentile gradient magnitude, floored just above round-off."""
    mag = gradient(ideal).magnitude()[ideal.valid]
    vals = ideal.values[ideal.valid]
    span = float(vals.max() - vals.min()) if vals.size else 0.0
    floor = 1e-9 * max(span, 1e-300)
    return max(lower_quantile(mag, EDGE_PERCENTILE), floor)


def edge_mask(ideal: DepthMap) -> np.ndarray:
    """Pixels whose gradient magnitude exceeds the edge threshold."""
    return (gradient(ideal).magnitude() > edge_threshold(ideal)) & ideal.valid


def edge_band(ideal: DepthMap, radius: int = EDGE_BAND_PX) -> np.ndarray:
    e = edge_mask(ideal)
    if not e.any():
        return e
    return (ndimage.distance_transform_edt(~e) <= radius) & ideal.valid


def connected_regions(values: np.ndarray, valid: np.ndarray, threshold: float):
    """4-connected regions where neighbouring depths differ by at most ``threshold``.

    Returns (n_regions, labels) with labels -1 on invalid pixels.  Labels are
    numbered in raster order of each region's first pixel.
    """
    h, w = values.shape
    idx = np.arange(h * w).reshape(h, w)
    kx = (np.abs(values[:, 1:] - values[:, :-1]) <= threshold) & valid[:, 1:] & valid[:, :-1]
    ky = (np.abs(values[1:, :] - values[:-1, :]) <= threshold) & valid[1:, :] & valid[:-1, :]
    rows = np.concatenate([idx[:, :-1][kx], idx[:-1, :][ky]])
    cols = np.concatenate([idx[:, 1:][kx], idx[1:, :][ky]])
    g = coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    _, lab = connected_components(g, directed=False)
    lab = lab.reshape(h, w)
    lab = np.where(valid, lab, -1)
    # renumber densely in raster order
    flat = lab.ravel()
    keep = flat >= 0
    uniq, first = np.unique(flat[keep], return_index=True)
    order = np.argsort(first)
    remap = np.empty(uniq.size, dtype=np.int64)
    remap[order] = np.arange(uniq.size)
    out = np.full(flat.shape, -1, dtype=np.int64)
    out[keep] = remap[np.searchsorted(uniq, flat[keep])]
    return uniq.size, out.reshape(h, w)


def count_components(ideal: DepthMap) -> int:
    """Number of depth-connected regions of the whole image under the edge threshold."""
    n, _ = connected_regions(ideal.values, ideal.valid, edge_threshold(ideal))
    return n


def patch_starts(n: int, size: int, overlap: int):
    if size >= n:
        return [0], n
    stride = size - overlap
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] + size < n:
        starts.append(n - size)
    return starts, size


def _owner(n, starts, size):
    centres = np.asarray(starts, dtype=np.float64) + size / 2.0
    pos = np.arange(n) + 0.5
    return np.argmin(np.abs(pos[:, None] - centres[None, :]), axis=1)


def inconsistency_pieces(ideal: DepthMap, spec: NoiseSpec):
    """Partition into affine pieces.

    Returns ``(labels, patch_of_piece, n_per_patch)``: ``labels`` maps each
    pixel to a piece id, pieces are numbered patch by patch (row-major patch
    order) and, within a patch, by region label.
    """
    h, w = ideal.shape
    if spec.patch_size > min(h, w):
        warnings.warn(f"patch size {spec.patch_size} exceeds image {w}x{h}; "
                      "clamping to a single patch along the short axes", NoiseWarning, stacklevel=3)
    ys, sy = patch_starts(h, spec.patch_size, spec.patch_overlap)
    xs, sx = patch_starts(w, spec.patch_size, spec.patch_overlap)
    own_y = _owner(h, ys, sy)
    own_x = _owner(w, xs, sx)
    t = edge_threshold(ideal)
    labels = np.full((h, w), -1, dtype=np.int64)
    n_per_patch = []
    offset = 0
    for py, y0 in enumerate(ys):
        for px, x0 in enumerate(xs):
            sl = (slice(y0, y0 + sy), slice(x0, x0 + sx))
            n, lab = connected_regions(ideal.values[sl], ideal.valid[sl], t)
            owned = (own_y[y0:y0 + sy] == py)[:, None] & (own_x[x0:x0 + sx] == px)[None, :]
            owned &= lab >= 0
            labels[sl][owned] = lab[owned] + offset
            n_per_patch.append(n)
            offset += n
    return labels, np.repeat(np.arange(len(n_per_patch)), n_per_patch), np.asarray(n_per_patch)


def local_inconsistency_coefficients(ideal: DepthMap, spec: NoiseSpec, stream=None):
    """Piece labels plus the drawn (b1, b0) for every piece."""
    if stream is None:
        stream = (ideal.long_side,)
    labels, _, n_per_patch = inconsistency_pieces(ideal, spec)
    b1 = np.empty(int(n_per_patch.sum()))
    b0 = np.empty_like(b1)
    off = 0
    for k, n in enumerate(n_per_patch):
        z = _rng(spec, 1, (*stream, k)).standard_normal((n, 2))
        b1[off:off + n] = 1.0 + spec.scale_sigma * z[:, 0]
        b0[off:off + n] = spec.shift_sigma * z[:, 1]
        off += n
    return labels, b1, b0


def synth_local_inconsistency(ideal: DepthMap, spec: NoiseSpec, stream=None) -> np.ndarray:
    _require_dense(ideal)
    if spec.scale_sigma == 0 and spec.shift_sigma == 0:
        return np.zeros(ideal.shape)
    labels, b1, b0 = local_inconsistency_coefficients(ideal, spec, stream)
    d = ideal.values
    return (b1[labels] * d + b0[labels]) - d


def blur_residual(ideal: DepthMap, target: Resolution | None) -> np.ndarray:
    """resample(resample(ideal, target), original) - ideal."""
    if target is None or target.long_side >= ideal.long_side:
        return np.zeros(ideal.shape)
    low = resample(ideal, target)
    back = resample_to_shape(low, ideal.shape)
    return np.where(ideal.valid & back.valid, back.values - ideal.values, 0.0)


def sample_blob_centres(ideal: DepthMap, spec: NoiseSpec, stream=None):
    """Blob centres drawn in the edge band; returns (cy, cx, amplitude)."""
    if stream is None:
        stream = (ideal.long_side,)
    h, w = ideal.shape
    n = spec.blob_count(h, w)
    if n > h * w:
        raise ValueError(f"n_gaussians={n} exceeds pixel count {h * w}")
    band = edge_band(ideal)
    if n == 0 or not band.any():
        z = np.zeros(0)
        return z, z.copy(), z.copy()
    rng = _rng(spec, 2, stream)
    iy, ix = np.nonzero(band)
    pick = rng.integers(0, iy.size, size=n)
    jitter = rng.uniform(-0.5, 0.5, size=(n, 2))
    amp = rng.normal(0.0, 1.0, size=n) * spec.blob_amplitude
    return iy[pick] + jitter[:, 0], ix[pick] + jitter[:, 1], amp


def render_blobs(shape, cy, cx, sigma, amp, radius) -> np.ndarray:
    h, w = shape
    if len(cy) == 0:
        return np.zeros((h, w))
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), np.shape(cy)).copy()
    return _kernels.blob_render(h, w, np.ascontiguousarray(cy, dtype=np.float64),
                                np.ascontiguousarray(cx, dtype=np.float64), sig,
                                np.ascontiguousarray(amp, dtype=np.float64), radius)


def synth_blobs(ideal: DepthMap, spec: NoiseSpec, stream=None):
    cy, cx, amp = sample_blob_centres(ideal, spec, stream)
    return [GaussianBlob(float(x), float(y), spec.blob_sigma, float(a)) for y, x, a in zip(cy, cx, amp)]


def synth_edge_deformation(ideal: DepthMap, spec: NoiseSpec, stream=None) -> np.ndarray:
    _require_dense(ideal)
    field = blur_residual(ideal, spec.edge_blur_resolution)
    cy, cx, amp = sample_blob_centres(ideal, spec, stream)
    if len(cy):
        field = field + render_blobs(ideal.shape, cy, cx, spec.blob_sigma, amp, spec.blob_radius)
    return field


def synthesize(ideal: DepthMap, spec: NoiseSpec, stream=None) -> NoiseField:
    return NoiseField(synth_local_inconsistency(ideal, spec, stream),
                      synth_edge_deformation(ideal, spec, stream))


# --------------------------------------------------------------------------
# fitting


def _piecewise_affine_fit(d, t, labels, mask):
    """Least-squares t ~ a*d + b on each piece; returns the fitted field."""
    lab = np.where(mask, labels, -1)
    sel = lab >= 0
    li = lab[sel]
    dv = d[sel]
    tv = t[sel]
    n_lab = int(labels.max()) + 1 if labels.size else 0
    cnt = np.bincount(li, minlength=n_lab).astype(np.float64)
    safe = np.maximum(cnt, 1.0)
    md = np.bincount(li, dv, n_lab) / safe
    mt = np.bincount(li, tv, n_lab) / safe
    dc = dv - md[li]
    tc = tv - mt[li]
    var = np.bincount(li, dc * dc, n_lab) / safe
    cov = np.bincount(li, dc * tc, n_lab) / safe
    slope = np.where(var >= 1e-12, cov / np.where(var >= 1e-12, var, 1.0), 0.0)
    out = np.zeros_like(d)
    out[sel] = slope[li] * dc + mt[li]
    return out


def _adam_blobs(resid, mask, cy, cx, amp, sig, spec, steps, lr=0.05):
    """Gradient descent (Adam) on blob amplitude and log-sigma; keeps the best iterate."""
    radius = spec.blob_radius
    shape = resid.shape
    a_scale = max(spec.blob_amplitude, 1e-6)
    sig_max = radius / 2.0
    theta = np.concatenate([amp / a_scale, np.log(sig)])
    n = len(cy)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)

    def unpack(th):
        return th[:n] * a_scale, np.clip(np.exp(th[n:]), 0.25, sig_max)

    def loss_of(a, s):
        r = (resid - render_blobs(shape, cy, cx, s, a, radius)) * mask
        return 0.5 * float(np.sum(r * r)), r

    best_a, best_s = unpack(theta)
    best_loss, r = loss_of(best_a, best_s)
    b1, b2, eps = 0.9, 0.999, 1e-12
    for it in range(1, steps + 1):
        a, s = unpack(theta)
        ga, gs = _kernels.blob_grads(np.ascontiguousarray(r), cy, cx, s, a, radius)
        grad = -np.concatenate([ga * a_scale, gs * s])
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        theta = theta - lr * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + eps)
        a, s = unpack(theta)
        loss, r = loss_of(a, s)
        if loss < best_loss:
            best_loss, best_a, best_s = loss, a, s
    return best_a, best_s, best_loss


def fit_noise(ideal: DepthMap, degraded: DepthMap, spec: NoiseSpec, iters: int = 200,
              rounds: int = 4):
    """Fit ``degraded ~ ideal + cons + edge`` inside the synthesis family of ``spec``.

    ``cons`` is re-estimated per piece in closed form, the blur residual gets
    a closed-form gain, and the edge-band blobs (centres as in synthesis) are
    tuned by gradient descent, at most ``iters`` steps in total.  Every stage
    is a block minimiser or keeps its best iterate, so the residual never
    exceeds that of the zero-noise hypothesis.

    Returns ``(NoiseField, psnr_db)`` with PSNR of ``degraded`` against the
    fitted reconstruction.
    """
    if ideal.shape != degraded.shape:
        raise ValueError("ideal and degraded must have the same size")
    mask = ideal.valid & degraded.valid
    if not mask.any():
        raise ValueError("ideal and degraded share no valid pixels")
    d = ideal.values
    r = np.where(mask, degraded.values - d, 0.0)
    mf = mask.astype(np.float64)

    labels, _, _ = inconsistency_pieces(ideal, spec)
    blur = blur_residual(ideal, spec.edge_blur_resolution) * mf
    bb = float(np.sum(blur * blur))
    cy, cx, _ = sample_blob_centres(ideal, spec)
    amp = np.zeros(len(cy))
    sig = np.full(len(cy), spec.blob_sigma)

    cons = np.zeros_like(d)
    gain = 0.0
    blobs = np.zeros_like(d)
    steps_left = int(iters)
    for k in range(rounds):
        cons = _piecewise_affine_fit(d, r - gain * blur - blobs, labels, mask)
        if bb > 0:
            gain = float(np.sum(blur * (r - cons - blobs))) / bb
        if len(cy) and steps_left > 0:
            steps = steps_left // (rounds - k)
            steps_left -= steps
            target = (r - cons - gain * blur) * mf
            amp, sig, _ = _adam_blobs(target, mf, cy, cx, amp, sig, spec, steps)
            blobs = render_blobs(d.shape, cy, cx, sig, amp, spec.blob_radius)

    field = NoiseField(cons * mf, (gain * blur + blobs) * mf)
    recon = DepthMap(d + field.total, mask)
    return field, psnr(DepthMap(degraded.values, mask), recon)


# --------------------------------------------------------------------------
# simulated predictor


def scaled_spec(spec: NoiseSpec, rho: float, native_long: int) -> NoiseSpec:
    """Noise of a predictor run at ``rho`` times the native resolution.

    Inconsistency grows with ``rho``; edge blur and bump amplitude shrink.
    """
    blur = spec.edge_blur_resolution
    if blur is not None:
        target = int(round(blur.long_side * rho))
        blur = Resolution(max(target, 2)) if target < native_long else None
    return replace(spec, scale_sigma=spec.scale_sigma * rho, shift_sigma=spec.shift_sigma * rho,
                   blob_amplitude=spec.blob_amplitude / rho, edge_blur_resolution=blur)


def predict_native(ideal: DepthMap, res: Resolution, spec: NoiseSpec, stream=None) -> DepthMap:
    """Simulated prediction at inference resolution ``res``, expressed on the native grid.

    Resolution enters only through the noise scaling, so a zero-noise spec
    reproduces ``ideal`` exactly.  ``stream`` keys the random draw and
    defaults to the resolution.
    """
    _require_dense(ideal)
    rho = res.long_side / ideal.long_side
    s = scaled_spec(spec, rho, ideal.long_side)
    stream = (res.long_side,) if stream is None else tuple(stream)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoiseWarning)
        f = synthesize(ideal, s, stream)
    return DepthMap(ideal.values + f.total)


def simulate_predictor(ideal: DepthMap, res: Resolution, spec: NoiseSpec) -> DepthMap:
    """Stand-in for a monocular depth network evaluated at ``res``."""
    return resample(predict_native(ideal, res, spec), res)


def compute_alpha(corpus) -> float:
    """Mean over images of the mean gradient magnitude on valid pixels."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("compute_alpha needs a non-empty corpus")
    means = [float(np.mean(gradient(d).magnitude()[d.valid])) for d in corpus]
    return float(np.mean(means))
