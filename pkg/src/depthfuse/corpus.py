"""Seeded synthetic depth scenes at desk scale."""
from __future__ import annotations

import numpy as np

from .core import DepthMap

KINDS = ("plane_stack", "ramp", "step_pyramid", "sinusoid")
N_SCENES = 20
DEFAULT_LONG_SIDE = 192


def _grid(h, w):
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return y, x


def two_planes(h=128, w=192, near=3.0, far=6.0):
    """Left half near, right half far; one vertical discontinuity."""
    d = np.full((h, w), far)
    d[:, : w // 2] = near
    return d


def _bars(d, rng, n, depth_lo, depth_hi):
    h, w = d.shape
    for _ in range(n):
        wid = int(rng.integers(2, 5))
        z = rng.uniform(depth_lo, depth_hi)
        if rng.random() < 0.5:
            x0 = int(rng.integers(4, w - wid - 4))
            y0, y1 = sorted(rng.integers(0, h, size=2))
            y1 = max(y1, y0 + h // 3)
            d[y0:y1, x0:x0 + wid] = z
        else:
            y0 = int(rng.integers(4, h - wid - 4))
            x0, x1 = sorted(rng.integers(0, w, size=2))
            x1 = max(x1, x0 + w // 3)
            d[y0:y0 + wid, x0:x1] = z
    return d


def plane_stack(h, w, rng):
    y, x = _grid(h, w)
    d = 8.0 + rng.uniform(-0.01, 0.01) * x + rng.uniform(-0.01, 0.01) * y
    for _ in range(int(rng.integers(2, 5))):
        rh, rw = int(rng.integers(h // 5, h // 2)), int(rng.integers(w // 5, w // 2))
        y0, x0 = int(rng.integers(0, h - rh)), int(rng.integers(0, w - rw))
        d[y0:y0 + rh, x0:x0 + rw] = rng.uniform(3.5, 7.0)
    return _bars(d, rng, int(rng.integers(2, 5)), 2.0, 3.5)


def ramp(h, w, rng):
    y, x = _grid(h, w)
    ang = rng.uniform(0, 2 * np.pi)
    t = (np.cos(ang) * x + np.sin(ang) * y) / max(h, w)
    d = 6.0 + 2.5 * t
    cut = rng.uniform(0.3, 0.7) * w
    d = np.where(x > cut, d - rng.uniform(1.0, 2.0), d)
    return _bars(d, rng, int(rng.integers(1, 4)), 2.0, 3.0)


def step_pyramid(h, w, rng):
    y, x = _grid(h, w)
    cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
    r = np.maximum(np.abs(y - cy) / h, np.abs(x - cx) / w)
    steps = int(rng.integers(3, 6))
    level = np.floor(np.clip(r / 0.5, 0, 0.999) * steps)
    d = 3.0 + level * (5.0 / steps)
    return _bars(d, rng, int(rng.integers(1, 3)), 2.0, 2.8)


def sinusoid(h, w, rng):
    y, x = _grid(h, w)
    fx, fy = rng.uniform(1.0, 3.0, size=2)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    d = 6.5 + 1.2 * np.sin(2 * np.pi * fx * x / w + ph[0]) * np.cos(2 * np.pi * fy * y / h + ph[1])
    rh, rw = h // 3, w // 4
    y0, x0 = int(rng.integers(0, h - rh)), int(rng.integers(0, w - rw))
    d[y0:y0 + rh, x0:x0 + rw] = rng.uniform(3.0, 4.0)
    return _bars(d, rng, int(rng.integers(2, 4)), 2.0, 2.8)


_MAKERS = {"plane_stack": plane_stack, "ramp": ramp, "step_pyramid": step_pyramid, "sinusoid": sinusoid}


def scene_shape(index: int, long_side: int = DEFAULT_LONG_SIDE):
    short = int(round(long_side * 2 / 3))
    if index % 5 == 4:
        return long_side, short  # portrait
    if index % 2 == 1:
        return short, long_side
    return long_side, long_side


def make_scene(index: int, seed: int = 0, long_side: int = DEFAULT_LONG_SIDE, shape=None):
    """(name, DepthMap) for scene ``index``; scene 0 is always the two-plane scene.

    ``shape`` overrides the corpus layout of ``scene_shape``.
    """
    h, w = shape if shape is not None else scene_shape(index, long_side)
    if index == 0:
        return "two_planes", DepthMap(two_planes(h, w))
    kind = KINDS[(index - 1) % len(KINDS)]
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 101, index])
    return f"{kind}_{index:02d}", DepthMap(_MAKERS[kind](h, w, rng))


def standard_corpus(seed: int = 0, n: int = N_SCENES, long_side: int = DEFAULT_LONG_SIDE):
    return [make_scene(i, seed, long_side) for i in range(n)]
