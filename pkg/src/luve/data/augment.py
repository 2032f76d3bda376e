"""Unsharp masking used to sharpen the high-frequency expert's training clips."""

from __future__ import annotations

import math

import numpy as np

from luve.errors import ContractError


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(video: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of ``(n, H, W, c)`` frames with replicated borders."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    padded = np.pad(video, ((0, 0), (r, r), (r, r), (0, 0)), mode="edge")
    H, W = video.shape[1:3]
    rows = sum(k[i] * padded[:, i:i + H, :, :] for i in range(len(k)))
    return sum(k[i] * rows[:, :, i:i + W, :] for i in range(len(k)))


def unsharp_mask(video: np.ndarray, sigma: float = 1.0, amount: float = 0.5) -> np.ndarray:
    """``x + amount * (x - blur(x))`` per frame and channel."""
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    if amount < 0:
        raise ContractError("amount must be non-negative")
    video = np.asarray(video, dtype=np.float64)
    if amount == 0:
        return video.copy()
    return video + amount * (video - gaussian_blur(video, sigma))
