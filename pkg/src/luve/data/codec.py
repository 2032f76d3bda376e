"""Linear stand-in for the video VAE.

Each frame is cut into non-overlapping ``p x p x 3`` patches and mapped to
``C`` channels by a fixed seeded matrix with orthonormal rows, the first three
of which are the flat colour of each RGB channel. Decoding is
the transpose, so ``decode(encode(x))`` is the orthogonal projection of
``x`` onto the codec's row space. No temporal compression.
"""

from __future__ import annotations

import numpy as np

from luve.errors import ContractError
from luve.numerics import Tensor, XorShiftRNG
from luve.numerics import tensor as T


class ToyCodec:
    def __init__(self, seed: int = 0, patch: int = 4, channels: int = 16):
        n = patch * patch * 3
        if not 3 <= channels <= n:
            raise ContractError(f"codec needs between 3 and {n} channels, got {channels}")
        g = XorShiftRNG(seed).normal((n, channels))
        # The first three directions are the flat colour of each RGB channel, so
        # constant frames survive a round trip exactly.
        g[:, :3] = 0.0
        for c in range(3):
            g[c::3, c] = 1.0 / patch
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        self.seed = seed
        self.patch = patch
        self.channels = channels
        self.matrix = np.ascontiguousarray(q.T)  # (channels, p*p*3)

    def _check_video(self, shape) -> None:
        if len(shape) != 4 or shape[-1] != 3:
            raise ContractError(f"video must be (n, H, W, 3), got {shape}")
        if shape[1] % self.patch or shape[2] % self.patch:
            raise ContractError(f"resolution {shape[1]}x{shape[2]} not divisible by patch {self.patch}")

    def encode(self, video):
        self._check_video(video.shape)
        n, H, W, _ = video.shape
        p = self.patch
        h, w = H // p, W // p
        if isinstance(video, Tensor):
            x = video.reshape(n, h, p, w, p, 3)
            x = T.transpose(x, (0, 1, 3, 2, 4, 5)).reshape(n, h, w, p * p * 3)
            return x @ Tensor(self.matrix.T.astype(video.dtype))
        v = np.asarray(video)
        x = v.reshape(n, h, p, w, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, p * p * 3)
        return x @ self.matrix.T.astype(v.dtype if v.dtype.kind == "f" else np.float64)

    def decode(self, latent):
        if latent.ndim != 4 or latent.shape[-1] != self.channels:
            raise ContractError(f"latent must be (t, h, w, {self.channels}), got {latent.shape}")
        n, h, w, _ = latent.shape
        p = self.patch
        if isinstance(latent, Tensor):
            x = latent @ Tensor(self.matrix.astype(latent.dtype))
            x = T.transpose(x.reshape(n, h, w, p, p, 3), (0, 1, 3, 2, 4, 5))
            return x.reshape(n, h * p, w * p, 3)
        z = np.asarray(latent)
        x = z @ self.matrix.astype(z.dtype)
        return x.reshape(n, h, w, p, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * p, w * p, 3)

    def project(self, video: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(video))


def toy_encode(video, codec: ToyCodec | None = None):
    return (codec or ToyCodec()).encode(video)


def toy_decode(latent, codec: ToyCodec | None = None):
    return (codec or ToyCodec()).decode(latent)


def export_video(video: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1]; only applied when writing final outputs."""
    return np.clip(video, 0.0, 1.0)
