"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``COLLABINFER_DISABLE_NUMBA=1`` to force the numpy implementations (also
used automatically when numba is not importable).
"""
from __future__ import annotations

import math
import os

import numpy as np

_DISABLED = os.environ.get("COLLABINFER_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


# --------------------------------------------------------------------------
# uint64 matmul modulo 2**64
# --------------------------------------------------------------------------

def ring_matmul_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # numpy integer matmul wraps silently on uint64 overflow
    return np.matmul(a, b)


def _ring_matmul_py(a, b):
    m, n = a.shape
    p = b.shape[1]
    out = np.zeros((m, p), dtype=np.uint64)
    for i in range(m):
        for k in range(n):
            aik = a[i, k]
            if aik == 0:
                continue
            for j in range(p):
                out[i, j] += aik * b[k, j]
    return out


def _bilinear_rotate_py(img, angle_rad):
    h, w, c = img.shape
    out = np.zeros((h, w, c), dtype=np.float64)
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    cos_t = math.cos(angle_rad)
    sin_t = math.sin(angle_rad)
    for i in range(h):
        for j in range(w):
            # inverse map: output pixel -> source coordinate
            dy = i - cy
            dx = j - cx
            sy = cos_t * dy - sin_t * dx + cy
            sx = sin_t * dy + cos_t * dx + cx
            y0 = math.floor(sy)
            x0 = math.floor(sx)
            fy = sy - y0
            fx = sx - x0
            for dyi in range(2):
                yy = y0 + dyi
                if yy < 0 or yy >= h:
                    continue
                wy = fy if dyi == 1 else 1.0 - fy
                for dxi in range(2):
                    xx = x0 + dxi
                    if xx < 0 or xx >= w:
                        continue
                    wx = fx if dxi == 1 else 1.0 - fx
                    wgt = wy * wx
                    if wgt == 0.0:
                        continue
                    for ch in range(c):
                        out[i, j, ch] += wgt * img[yy, xx, ch]
    return out


def bilinear_rotate_numpy(img: np.ndarray, angle_rad: float) -> np.ndarray:
    h, w, c = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = ii - cy, jj - cx
    cos_t, sin_t = math.cos(angle_rad), math.sin(angle_rad)
    sy = cos_t * dy - sin_t * dx + cy
    sx = sin_t * dy + cos_t * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros((h, w, c), dtype=np.float64)
    for dyi in (0, 1):
        yy = y0 + dyi
        wy = fy if dyi else 1.0 - fy
        for dxi in (0, 1):
            xx = x0 + dxi
            wx = fx if dxi else 1.0 - fx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wgt = np.where(ok, wy * wx, 0.0)
            vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += wgt[..., None] * vals
    return out


if HAVE_NUMBA:
    ring_matmul_numba = njit(cache=True, nogil=True)(_ring_matmul_py)
    bilinear_rotate_numba = njit(cache=True, nogil=True)(_bilinear_rotate_py)
else:  # pragma: no cover
    ring_matmul_numba = None
    bilinear_rotate_numba = None


def ring_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D uint64 arrays modulo 2**64."""
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"incompatible shapes {a.shape} @ {b.shape}")
    if USE_NUMBA:
        return ring_matmul_numba(a, b)
    return ring_matmul_numpy(a, b)


def bilinear_rotate(img: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rotate an H x W x C image about its centre; zero padding outside."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    if USE_NUMBA:
        return bilinear_rotate_numba(img, float(angle_rad))
    return bilinear_rotate_numpy(img, float(angle_rad))
