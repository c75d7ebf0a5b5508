"""Domain types and the low-level field operations everything else builds on."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels


def _frozen(a, dtype):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Single-channel depth with a validity mask.

    ``values`` is (height, width) float64.  Pixels where ``valid`` is False
    carry no information and are ignored by every statistic; their stored
    value is not meaningful.
    """

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"depth map must be 2-D and at least 2x2, got {v.shape}")
        m = np.isfinite(v) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if m.shape != v.shape:
            raise ValueError("valid mask shape does not match values")
        if not np.all(np.isfinite(v[m])):
            raise ValueError("valid pixels must be finite")
        object.__setattr__(self, "values", _frozen(np.where(m, v, 0.0), np.float64))
        object.__setattr__(self, "valid", _frozen(m, bool))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def long_side(self) -> int:
        return max(self.values.shape)

    @property
    def dense(self) -> bool:
        return bool(self.valid.all())

    def crop(self, r: "Rect") -> "DepthMap":
        return DepthMap(self.values[r.y0:r.y1, r.x0:r.x1], self.valid[r.y0:r.y1, r.x0:r.x1])

    def with_nan(self) -> np.ndarray:
        """Values with invalid pixels as NaN (file interchange convention)."""
        return np.where(self.valid, self.values, np.nan)


def _default_entry_masks(h, w):
    vx = np.ones((h, w), dtype=bool)
    vx[:, -1] = False
    vy = np.ones((h, w), dtype=bool)
    vy[-1, :] = False
    return vx, vy


@dataclass(frozen=True, eq=False)
class GradientField:
    """Two-channel forward-difference field.

    ``valid_x``/``valid_y`` flag the entries that hold an actual difference;
    the last column of ``gx`` and last row of ``gy`` never do, and neither
    does a difference touching an invalid depth pixel.  Unflagged entries are
    stored as zero.
    """

    gx: np.ndarray
    gy: np.ndarray
    valid_x: np.ndarray = None
    valid_y: np.ndarray = None

    def __post_init__(self):
        gx = np.asarray(self.gx, dtype=np.float64)
        gy = np.asarray(self.gy, dtype=np.float64)
        if gx.shape != gy.shape or gx.ndim != 2:
            raise ValueError("gx and gy must be 2-D arrays of equal shape")
        h, w = gx.shape
        dvx, dvy = _default_entry_masks(h, w)
        vx = dvx if self.valid_x is None else np.asarray(self.valid_x, dtype=bool) & dvx
        vy = dvy if self.valid_y is None else np.asarray(self.valid_y, dtype=bool) & dvy
        gx = np.where(vx, gx, 0.0)
        gy = np.where(vy, gy, 0.0)
        if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))):
            raise ValueError("gradient field must be finite")
        object.__setattr__(self, "gx", _frozen(gx, np.float64))
        object.__setattr__(self, "gy", _frozen(gy, np.float64))
        object.__setattr__(self, "valid_x", _frozen(vx, bool))
        object.__setattr__(self, "valid_y", _frozen(vy, bool))

    @property
    def height(self) -> int:
        return self.gx.shape[0]

    @property
    def width(self) -> int:
        return self.gx.shape[1]

    @property
    def shape(self):
        return self.gx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)

    def entries(self):
        """Concatenated defined entries of both channels (x first)."""
        return np.concatenate([self.gx[self.valid_x], self.gy[self.valid_y]])

    def affine(self, beta1: float, beta0: float) -> "GradientField":
        """``beta1 * g + beta0`` on defined entries; undefined stay zero."""
        return GradientField(beta1 * self.gx + beta0, beta1 * self.gy + beta0,
                             self.valid_x, self.valid_y)

    def crop(self, r: "Rect") -> "GradientField":
        sl = (slice(r.y0, r.y1), slice(r.x0, r.x1))
        return GradientField(self.gx[sl], self.gy[sl], self.valid_x[sl], self.valid_y[sl])

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass(frozen=True, eq=False)
class SoftMask:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.all((w >= 0.0) & (w <= 1.0)):
            raise ValueError("mask weights must lie in [0, 1]")
        object.__setattr__(self, "w", _frozen(w, np.float64))

    @property
    def shape(self):
        return self.w.shape

    @classmethod
    def full(cls, height, width, value):
        return cls(np.full((height, width), float(value)))


@dataclass(frozen=True, order=True)
class Resolution:
    """Target size expressed as the long side in pixels; aspect is preserved."""

    long_side: int

    def __post_init__(self):
        if int(self.long_side) != self.long_side or self.long_side < 2:
            raise ValueError(f"long_side must be an integer >= 2, got {self.long_side}")
        object.__setattr__(self, "long_side", int(self.long_side))

    def shape_for(self, height: int, width: int):
        """(height, width) for an image of the given size resampled to this resolution."""
        if width >= height:
            nw = self.long_side
            nh = int(round(height * self.long_side / width))
        else:
            nh = self.long_side
            nw = int(round(width * self.long_side / height))
        return nh, nw


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def check_inside(self, width, height):
        if self.x1 > width or self.y1 > height:
            raise ValueError(f"{self} exceeds image bounds {width}x{height}")

    @property
    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


# --------------------------------------------------------------------------
# operations


def gradient(d: DepthMap) -> GradientField:
    """Forward differences with zero boundary; invalid neighbours zero the entry."""
    v = d.values
    m = d.valid
    gx = np.zeros_like(v)
    gy = np.zeros_like(v)
    vx = np.zeros_like(m)
    vy = np.zeros_like(m)
    vx[:, :-1] = m[:, :-1] & m[:, 1:]
    vy[:-1, :] = m[:-1, :] & m[1:, :]
    gx[:, :-1] = v[:, 1:] - v[:, :-1]
    gy[:-1, :] = v[1:, :] - v[:-1, :]
    return GradientField(gx, gy, vx, vy)


def bilateral_filter(g: GradientField, sigma_spatial: float, sigma_range: float) -> GradientField:
    """Edge-preserving smoothing applied to each channel independently.

    Only defined entries take part, as sources and as outputs, so the output
    keeps the zero-boundary convention of the input.
    """
    if sigma_spatial <= 0 or sigma_range <= 0:
        raise ValueError("bilateral sigmas must be positive")
    radius = int(math.ceil(3.0 * sigma_spatial))
    gx = _kernels.bilateral_channel(np.ascontiguousarray(g.gx), np.ascontiguousarray(g.valid_x),
                                    radius, float(sigma_spatial), float(sigma_range))
    gy = _kernels.bilateral_channel(np.ascontiguousarray(g.gy), np.ascontiguousarray(g.valid_y),
                                    radius, float(sigma_spatial), float(sigma_range))
    return GradientField(gx, gy, g.valid_x, g.valid_y)


def _axis_weights(n_src, n_dst):
    # align-corners mapping: both end samples coincide
    if n_dst == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_src - 1)
    f = pos - i0
    i1 = np.minimum(i0 + 1, n_src - 1)
    f = np.where(i1 == i0, 0.0, f)
    return i0, i1, f


def resample_array(values: np.ndarray, valid: np.ndarray, out_shape):
    """Bilinear resampling of a masked array; returns (values, valid)."""
    h, w = values.shape
    nh, nw = out_shape
    y0, y1, fy = _axis_weights(h, nh)
    x0, x1, fx = _axis_weights(w, nw)
    v = np.where(valid, values, 0.0)
    fy = fy[:, None]
    fx = fx[None, :]
    top = (1.0 - fx) * v[y0][:, x0] + fx * v[y0][:, x1]
    bot = (1.0 - fx) * v[y1][:, x0] + fx * v[y1][:, x1]
    out = (1.0 - fy) * top + fy * bot
    # a destination pixel is valid only if every source with nonzero weight is
    need_x1 = fx > 0
    need_y1 = fy > 0
    ok = valid[y0][:, x0].copy()
    ok &= valid[y0][:, x1] | ~need_x1
    ok &= valid[y1][:, x0] | ~need_y1
    ok &= valid[y1][:, x1] | ~(need_x1 & need_y1)
    return out, ok


def resample(d: DepthMap, target: Resolution) -> DepthMap:
    """Bilinear resampling to ``target`` long side, aspect preserved."""
    nh, nw = target.shape_for(d.height, d.width)
    if nh < 2 or nw < 2:
        raise ValueError(f"target {target} gives {nh}x{nw}, below 2 pixels on a side")
    if (nh, nw) == d.shape:
        return d
    out, ok = resample_array(d.values, d.valid, (nh, nw))
    return DepthMap(out, ok)


def resample_to_shape(d: DepthMap, shape) -> DepthMap:
    if tuple(shape) == d.shape:
        return d
    out, ok = resample_array(d.values, d.valid, tuple(shape))
    return DepthMap(out, ok)


# MSE at or below this fraction of peak**2 is indistinguishable from float64
# round-off and is reported as the infinite sentinel.
_PSNR_ZERO_REL = (64.0 * np.finfo(np.float64).eps) ** 2

PSNR_INF = math.inf


def psnr(a: DepthMap, b: DepthMap, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB over pixels valid in both maps.

    ``peak`` defaults to the maximum valid value of ``a`` (the reference).
    Returns ``math.inf`` when the two maps agree to round-off.
    """
    if a.shape != b.shape:
        raise ValueError("psnr needs maps of identical size")
    m = a.valid & b.valid
    if not m.any():
        raise ValueError("no shared valid pixels")
    if peak is None:
        peak = float(np.max(a.values[a.valid]))
        if peak <= 0.0:
            peak = float(np.max(np.abs(a.values[a.valid])))
    diff = a.values[m] - b.values[m]
    mse = float(np.mean(diff * diff))
    if mse <= _PSNR_ZERO_REL * peak * peak:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def quantile_rank(n: int, q: float) -> int:
    """1-based rank of the lower empirical ``q``-quantile among ``n`` values."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    # round first so that e.g. 0.06 * 100 does not ceil to 7
    return max(1, math.ceil(round(q * n, 9)))


def lower_quantile(values, q: float) -> float:
    """The ceil(q*N)-th smallest value, no interpolation."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty set")
    k = quantile_rank(v.size, q)
    return float(np.partition(v, k - 1)[k - 1])
