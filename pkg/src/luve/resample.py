"""Separable bilinear / bicubic resampling with half-pixel centres.

Conventions follow the usual ``align_corners=False`` rule: output sample
``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5`` and
out-of-range taps are clamped to the border.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _cubic(x: np.ndarray, a: float = -0.75) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    m1 = x <= 1
    m2 = (x > 1) & (x < 2)
    out[m1] = ((a + 2) * x[m1] - (a + 3)) * x[m1] ** 2 + 1
    out[m2] = ((a * x[m2] - 5 * a) * x[m2] + 8 * a) * x[m2] - 4 * a
    return out


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int, kind: str = "bilinear") -> np.ndarray:
    """Dense ``(n_out, n_in)`` matrix mapping a 1-D signal to the new length."""
    mat = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if kind == "bilinear":
        src = np.maximum(src, 0.0)
        i0 = np.floor(src).astype(int)
        frac = src - i0
        for i in range(n_out):
            mat[i, min(i0[i], n_in - 1)] += 1.0 - frac[i]
            mat[i, min(i0[i] + 1, n_in - 1)] += frac[i]
    elif kind == "bicubic":
        i0 = np.floor(src).astype(int)
        frac = src - i0
        for i in range(n_out):
            for k in range(-1, 3):
                w = _cubic(np.array([k - frac[i]]))[0]
                mat[i, int(np.clip(i0[i] + k, 0, n_in - 1))] += w
    else:
        raise ValueError(f"unknown resampling kind {kind!r}")
    mat.setflags(write=False)
    return mat


def resize(frames: np.ndarray, size: tuple[int, int], kind: str = "bilinear") -> np.ndarray:
    """Resize ``(n, h, w, c)`` frames spatially to ``size = (H, W)``."""
    n, h, w, c = frames.shape
    H, W = size
    if (H, W) == (h, w):
        return frames.copy()
    rh = resize_matrix(h, H, kind).astype(frames.dtype)
    rw = resize_matrix(w, W, kind).astype(frames.dtype)
    out = np.einsum("Hh,nhwc->nHwc", rh, frames)
    return np.einsum("Ww,nHwc->nHWc", rw, out)
