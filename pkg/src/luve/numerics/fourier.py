"""Direct 2-D discrete Fourier transform.

Grids at desk scale are at most 64x64, so the transform is evaluated as two
dense DFT-matrix products instead of an FFT.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from luve.numerics.tensor import Tensor


@lru_cache(maxsize=64)
def dft_matrix(n: int, inverse: bool = False) -> np.ndarray:
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    if inverse:
        mat = mat / n
    mat.setflags(write=False)
    return mat


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def dft2d(x) -> np.ndarray:
    """Spectrum of an ``h x w`` or ``h x w x c`` field over the first two axes.

    The result has the same rank as the input.
    """
    arr = _as_array(x)
    flat = arr.ndim == 2
    if flat:
        arr = arr[:, :, None]
    h, w = arr.shape[:2]
    fh, fw = dft_matrix(h), dft_matrix(w)
    out = np.einsum("ij,jkc->ikc", fh, arr.astype(np.complex128))
    out = np.einsum("ikc,lk->ilc", out, fw)
    return out[:, :, 0] if flat else out


def idft2d(spec: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2d`; returns a complex array."""
    spec = np.asarray(spec, dtype=np.complex128)
    flat = spec.ndim == 2
    if flat:
        spec = spec[:, :, None]
    h, w = spec.shape[:2]
    gh, gw = dft_matrix(h, True), dft_matrix(w, True)
    out = np.einsum("ij,jkc->ikc", gh, spec)
    out = np.einsum("ikc,lk->ilc", out, gw)
    return out[:, :, 0] if flat else out


def signed_frequencies(n: int) -> np.ndarray:
    """Integer frequency of each DFT bin, in ``[-n//2, n//2]``."""
    k = np.arange(n)
    return np.where(k <= n // 2, k, k - n)
