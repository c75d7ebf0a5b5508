"""Hot inner loops, each with a numba and a pure-numpy implementation.

The active implementation is picked once at import time.  Set
``DEPTHFUSE_DISABLE_NUMBA=1`` to force the numpy path (useful for debugging
and for machines without a working LLVM).  Both variants are always importable
as ``<name>_numba`` / ``<name>_numpy`` so they can be cross-checked.
"""
import math
import os

import numpy as np

_FLAG = os.environ.get("DEPTHFUSE_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# bilateral filter, one channel


def _bilateral_loop(values, mask, radius, sigma_s, sigma_r):
    h, w = values.shape
    out = np.zeros((h, w))
    inv_s = 1.0 / (2.0 * sigma_s * sigma_s)
    inv_r = 1.0 / (2.0 * sigma_r * sigma_r)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            vp = values[i, j]
            num = 0.0
            den = 0.0
            for di in range(-radius, radius + 1):
                ii = i + di
                if ii < 0 or ii >= h:
                    continue
                for dj in range(-radius, radius + 1):
                    jj = j + dj
                    if jj < 0 or jj >= w or not mask[ii, jj]:
                        continue
                    vq = values[ii, jj]
                    d = vq - vp
                    wt = math.exp(-(di * di + dj * dj) * inv_s - d * d * inv_r)
                    num += wt * vq
                    den += wt
            out[i, j] = num / den
    return out


bilateral_channel_numba = _njit(_bilateral_loop)


def bilateral_channel_numpy(values, mask, radius, sigma_s, sigma_r):
    h, w = values.shape
    pad_v = np.zeros((h + 2 * radius, w + 2 * radius))
    pad_m = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    pad_v[radius:radius + h, radius:radius + w] = values
    pad_m[radius:radius + h, radius:radius + w] = mask
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    inv_s = 1.0 / (2.0 * sigma_s * sigma_s)
    inv_r = 1.0 / (2.0 * sigma_r * sigma_r)
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            vq = pad_v[radius + di:radius + di + h, radius + dj:radius + dj + w]
            mq = pad_m[radius + di:radius + di + h, radius + dj:radius + dj + w]
            d = vq - values
            wt = np.exp(-(di * di + dj * dj) * inv_s - d * d * inv_r) * mq
            num += wt * vq
            den += wt
    out = np.zeros((h, w))
    np.divide(num, den, out=out, where=mask)
    return out


# --------------------------------------------------------------------------
# screened Poisson operator: A x = vw*x + L^T W L x


def _poisson_apply_loop(x, vw, wx, wy):
    h, w = x.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            xc = x[i, j]
            acc = vw[i, j] * xc
            if j + 1 < w:
                acc += wx[i, j] * (xc - x[i, j + 1])
            if j > 0:
                acc += wx[i, j - 1] * (xc - x[i, j - 1])
            if i + 1 < h:
                acc += wy[i, j] * (xc - x[i + 1, j])
            if i > 0:
                acc += wy[i - 1, j] * (xc - x[i - 1, j])
            out[i, j] = acc
    return out


poisson_apply_numba = _njit(_poisson_apply_loop)


def poisson_apply_numpy(x, vw, wx, wy):
    out = vw * x
    t = wx * (x[:, 1:] - x[:, :-1])
    out[:, 1:] += t
    out[:, :-1] -= t
    t = wy * (x[1:, :] - x[:-1, :])
    out[1:, :] += t
    out[:-1, :] -= t
    return out


# --------------------------------------------------------------------------
# isotropic Gaussian blobs: rendering and gradients w.r.t. (amplitude, sigma)


def _blob_render_loop(h, w, cy, cx, sigma, amp, radius):
    out = np.zeros((h, w))
    for k in range(cy.shape[0]):
        yc = cy[k]
        xc = cx[k]
        inv = 1.0 / (2.0 * sigma[k] * sigma[k])
        a = amp[k]
        y0 = int(math.floor(yc)) - radius
        x0 = int(math.floor(xc)) - radius
        for i in range(max(y0, 0), min(y0 + 2 * radius + 2, h)):
            dy = i - yc
            for j in range(max(x0, 0), min(x0 + 2 * radius + 2, w)):
                dx = j - xc
                r2 = dy * dy + dx * dx
                if r2 <= radius * radius:
                    out[i, j] += a * math.exp(-r2 * inv)
    return out


def _blob_grads_loop(resid, cy, cx, sigma, amp, radius):
    h, w = resid.shape
    n = cy.shape[0]
    g_amp = np.zeros(n)
    g_sig = np.zeros(n)
    for k in range(n):
        yc = cy[k]
        xc = cx[k]
        s = sigma[k]
        inv = 1.0 / (2.0 * s * s)
        a = amp[k]
        y0 = int(math.floor(yc)) - radius
        x0 = int(math.floor(xc)) - radius
        ga = 0.0
        gs = 0.0
        for i in range(max(y0, 0), min(y0 + 2 * radius + 2, h)):
            dy = i - yc
            for j in range(max(x0, 0), min(x0 + 2 * radius + 2, w)):
                dx = j - xc
                r2 = dy * dy + dx * dx
                if r2 <= radius * radius:
                    phi = math.exp(-r2 * inv)
                    ga += resid[i, j] * phi
                    gs += resid[i, j] * a * phi * r2 / (s * s * s)
        g_amp[k] = ga
        g_sig[k] = gs
    return g_amp, g_sig


blob_render_numba = _njit(_blob_render_loop)
blob_grads_numba = _njit(_blob_grads_loop)


def _blob_footprint(h, w, yc, xc, radius):
    y0 = int(math.floor(yc)) - radius
    x0 = int(math.floor(xc)) - radius
    ys = np.arange(max(y0, 0), min(y0 + 2 * radius + 2, h))
    xs = np.arange(max(x0, 0), min(x0 + 2 * radius + 2, w))
    r2 = (ys[:, None] - yc) ** 2 + (xs[None, :] - xc) ** 2
    return ys, xs, r2, r2 <= radius * radius


def blob_render_numpy(h, w, cy, cx, sigma, amp, radius):
    out = np.zeros((h, w))
    for k in range(len(cy)):
        ys, xs, r2, inside = _blob_footprint(h, w, cy[k], cx[k], radius)
        if ys.size == 0 or xs.size == 0:
            continue
        phi = np.exp(-r2 / (2.0 * sigma[k] ** 2)) * inside
        out[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] += amp[k] * phi
    return out


def blob_grads_numpy(resid, cy, cx, sigma, amp, radius):
    h, w = resid.shape
    n = len(cy)
    g_amp = np.zeros(n)
    g_sig = np.zeros(n)
    for k in range(n):
        ys, xs, r2, inside = _blob_footprint(h, w, cy[k], cx[k], radius)
        if ys.size == 0 or xs.size == 0:
            continue
        s = sigma[k]
        phi = np.exp(-r2 / (2.0 * s * s)) * inside
        r = resid[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
        g_amp[k] = np.sum(r * phi)
        g_sig[k] = np.sum(r * amp[k] * phi * r2) / (s * s * s)
    return g_amp, g_sig


# --------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    bilateral_channel = bilateral_channel_numba
    poisson_apply = poisson_apply_numba
    blob_render = blob_render_numba
    blob_grads = blob_grads_numba
else:
    bilateral_channel = bilateral_channel_numpy
    poisson_apply = poisson_apply_numpy
    blob_render = blob_render_numpy
    blob_grads = blob_grads_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
