"""PFM read/write and read-only 16-bit PGM."""
from __future__ import annotations

import os

import numpy as np

from .core import DepthMap, GradientField


class PFMFormatError(ValueError):
    """Base class for unreadable depth files."""


class PFMHeaderError(PFMFormatError):
    pass


class PFMTruncatedError(PFMFormatError):
    pass


class PFMChannelError(PFMFormatError):
    pass


def _tokens(buf: bytes, count: int, pos: int = 0):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, payload offset)."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PFMHeaderError("header ends early")
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the payload
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise PFMHeaderError("missing separator after header")
    return out, pos + 1


def parse_pfm(buf: bytes):
    """Decode PFM bytes into a top-to-bottom float64 array of shape (H, W) or (H, W, 3)."""
    toks, off = _tokens(buf, 4)
    kind = toks[0]
    if kind == b"Pf":
        ch = 1
    elif kind == b"PF":
        ch = 3
    elif kind.startswith(b"P") and len(kind) == 2:
        raise PFMChannelError(f"unsupported PFM type {kind!r}")
    else:
        raise PFMHeaderError(f"bad magic {kind[:8]!r}")
    try:
        w, h = int(toks[1]), int(toks[2])
        scale = float(toks[3])
    except ValueError as e:
        raise PFMHeaderError(f"bad header field: {e}") from None
    if w <= 0 or h <= 0 or scale == 0.0 or not np.isfinite(scale):
        raise PFMHeaderError("dimensions must be positive and scale nonzero")
    dt = np.dtype("<f4" if scale < 0 else ">f4")
    need = w * h * ch * 4
    if len(buf) - off < need:
        raise PFMTruncatedError(f"payload has {len(buf) - off} bytes, expected {need}")
    a = np.frombuffer(buf, dtype=dt, count=w * h * ch, offset=off).astype(np.float64)
    a = a.reshape(h, w, ch) if ch == 3 else a.reshape(h, w)
    return a[::-1].copy()


def encode_pfm(arr) -> bytes:
    """Little-endian PFM bytes for a (H, W) or (H, W, 3) array given top row first."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        magic = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"PF"
    else:
        raise PFMChannelError(f"cannot encode array of shape {a.shape}")
    h, w = a.shape[:2]
    head = magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    return head + np.ascontiguousarray(a[::-1], dtype="<f4").tobytes()


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_pfm(f.read())


def write_pfm(path, arr):
    data = encode_pfm(arr)
    with open(path, "wb") as f:
        f.write(data)


def depth_to_array(d: DepthMap) -> np.ndarray:
    return d.with_nan()


def write_depth(path, d: DepthMap):
    write_pfm(path, depth_to_array(d))


def read_depth(path) -> DepthMap:
    a = read_pfm(path)
    if a.ndim != 2:
        raise PFMChannelError("expected a one-channel depth file")
    return DepthMap(a, np.isfinite(a))


def write_gradient(path, g: GradientField):
    """Gradient as channels x, y and a zero third channel; undefined entries are NaN."""
    a = np.zeros(g.shape + (3,))
    a[..., 0] = np.where(g.valid_x, g.gx, np.nan)
    a[..., 1] = np.where(g.valid_y, g.gy, np.nan)
    write_pfm(path, a)


def read_gradient(path) -> GradientField:
    a = read_pfm(path)
    if a.ndim != 3:
        raise PFMChannelError("expected a three-channel gradient file")
    gx, gy = a[..., 0], a[..., 1]
    vx, vy = np.isfinite(gx), np.isfinite(gy)
    return GradientField(np.where(vx, gx, 0.0), np.where(vy, gy, 0.0), vx, vy)


def read_pgm16(path, scale: float = 1.0, invalid_zero: bool = True) -> DepthMap:
    """Binary 16-bit PGM (big-endian per the format) as depth ``value * scale``."""
    with open(path, "rb") as f:
        buf = f.read()
    toks, off = _tokens(buf, 4)
    if toks[0] != b"P5":
        raise PFMHeaderError(f"not a binary PGM: {toks[0][:8]!r}")
    try:
        w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    except ValueError as e:
        raise PFMHeaderError(f"bad header field: {e}") from None
    if w <= 0 or h <= 0 or not 255 < maxval < 65536:
        raise PFMChannelError("only 16-bit PGM is supported")
    need = w * h * 2
    if len(buf) - off < need:
        raise PFMTruncatedError(f"payload has {len(buf) - off} bytes, expected {need}")
    raw = np.frombuffer(buf, dtype=">u2", count=w * h, offset=off).reshape(h, w)
    vals = raw.astype(np.float64) * scale
    valid = raw > 0 if invalid_zero else np.ones((h, w), dtype=bool)
    return DepthMap(vals, valid)


def read_any_depth(path, pgm_scale: float = 1.0) -> DepthMap:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm16(path, pgm_scale)
    return read_depth(path)
