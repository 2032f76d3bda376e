"""Low/high-resolution latent training pairs for the upsampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from luve.data.codec import ToyCodec
from luve.resample import resize

log = logging.getLogger(__name__)

TRAINING_SCALES = (1.5, 2.0, 3.0)


@dataclass
class LatentPair:
    scale: float
    z_lr: np.ndarray
    z_hr: np.ndarray
    x_hr: np.ndarray
    x_lr: np.ndarray


def lr_extent(n: int, scale: float, patch: int) -> int:
    size = int(round(n / scale))
    valid = size - size % patch
    if valid != size:
        log.info("LR extent %d not divisible by %d; cropping to %d", size, patch, valid)
    return max(valid, patch)


def downscale(video: np.ndarray, scale: float, patch: int) -> np.ndarray:
    n, H, W, _ = video.shape
    h_full, w_full = int(round(H / scale)), int(round(W / scale))
    small = resize(video, (h_full, w_full), "bilinear") if scale != 1.0 else video.copy()
    h, w = lr_extent(H, scale, patch), lr_extent(W, scale, patch)
    return small[:, :h, :w, :]


def make_lr_hr_pairs(video: np.ndarray, scales: Sequence[float] = TRAINING_SCALES,
                     codec: ToyCodec | None = None) -> list[LatentPair]:
    codec = codec or ToyCodec()
    z_hr = codec.encode(video)
    pairs = []
    for s in scales:
        x_lr = downscale(video, s, codec.patch)
        pairs.append(LatentPair(float(s), codec.encode(x_lr), z_hr, video, x_lr))
    return pairs
