"""Video latent upsampler: encoder, implicit-neural upsampler and decoder.

``upsample(z, (H, W)) = decode_refine(inr_upsample(encode_features(z), (H, W)))``

* The encoder embeds the latent with a 3x3 convolution, then alternates
  windowed spatial self-attention inside each frame with mutual attention
  between consecutive frame pairs (a small stand-in for temporal mutual
  self-attention). Pair boundaries shift by one frame on every other block.
  By default the input latent is appended to the encoder features.
* The INR queries, for every target cell, the nearest source feature plus
  the offset to that source cell centre and the target cell size, both in
  source-cell units, and maps them to 16 latent channels with an MLP.
* The decoder applies a temporal attention refinement per spatial location
  and adds it residually; its output projection starts at zero, so a fresh
  decoder is the identity.

Both interpolation baselines live here as well.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from luve.data.codec import ToyCodec
from luve.data.pairs import LatentPair
from luve.errors import ConfigError, ContractError, DimensionError, TrainingDivergedError
from luve.nn import MLP, Conv3x3, LayerNorm, Linear, Module, attention, param
from luve.numerics import Tensor, XorShiftRNG, backward, no_grad
from luve.numerics import tensor as T
from luve.optim import Adam, CosineRestarts
from luve.resample import resize

log = logging.getLogger(__name__)

LATENT_CHANNELS = 16

# Reference (full-size) architecture, recorded for documentation only.
REFERENCE_INR_HIDDEN = (512, 512, 256, 256)
REFERENCE_ENCODER = {"embed": 120, "depth": 8, "tmsa_groups": 6, "tmsa_depth": 4, "tmsa_embed": 180}
REFERENCE_DECODER = {"channels": (16, 24, 16), "groups": 3, "depth": 1, "embed": 48}
REFERENCE_PARAMS = 22_000_000

# Reference optimisation recipe: Adam, cosine annealing with restarts.
REFERENCE_LR = 2e-4
REFERENCE_ETA_MIN = 1e-7
REFERENCE_PERIOD = 400_000
REFERENCE_ITERATIONS = 135_000
REFERENCE_BATCH = 2


@dataclass
class VLUerConfig:
    enc_width: int = 32
    enc_depth: int = 2
    enc_heads: int = 4
    window: int = 8
    inr_hidden: tuple[int, ...] = (64, 64, 32, 32)
    dec_width: int = 8
    dec_heads: int = 2
    channels: int = LATENT_CHANNELS
    latent_skip: bool = True
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.channels != LATENT_CHANNELS:
            raise ConfigError(f"INR output channels must be {LATENT_CHANNELS}, got {self.channels}")
        if self.enc_width % self.enc_heads or self.dec_width % self.dec_heads:
            raise ConfigError("attention widths must be divisible by their head counts")
        if self.enc_depth < 1 or self.window < 1 or not self.inr_hidden:
            raise ConfigError("encoder depth, window and INR hidden sizes must be positive")


@dataclass(frozen=True)
class VLUerLossWeights:
    """``latent * L_latent + pixel * (L1 + temporal * frame-difference term)``."""

    latent: float = 1.0
    pixel: float = 1.0
    temporal: float = 1.0

    def __post_init__(self):
        if min(self.latent, self.pixel, self.temporal) < 0:
            raise ConfigError("loss weights must be non-negative")


# -- encoder ----------------------------------------------------------------

def largest_divisor_at_most(n: int, cap: int) -> int:
    return max(d for d in range(1, min(n, cap) + 1) if n % d == 0)


class SpatialWindowBlock(Module):
    """Pre-norm window self-attention within each frame, then an FFN."""

    def __init__(self, d: int, heads: int, window: int, rng: XorShiftRNG, dtype):
        super().__init__()
        self.heads, self.window = heads, window
        self.norm1 = LayerNorm(d, dtype)
        self.qkv = Linear(d, 3 * d, rng, bias=False, dtype=dtype)
        self.out = Linear(d, d, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = MLP([d, 2 * d, d], rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        t, h, w, d = x.shape
        wy, wx = largest_divisor_at_most(h, self.window), largest_divisor_at_most(w, self.window)
        ny, nx = h // wy, w // wx
        win = T.transpose(self.norm1(x).reshape(t, ny, wy, nx, wx, d), (0, 1, 3, 2, 4, 5))
        win = win.reshape(t * ny * nx, wy * wx, d)
        q, k, v = (self.qkv(win)[..., i * d:(i + 1) * d] for i in range(3))
        a = self.out(attention(q, k, v, self.heads))
        a = T.transpose(a.reshape(t, ny, nx, wy, wx, d), (0, 1, 3, 2, 4, 5)).reshape(t, h, w, d)
        x = x + a
        return x + self.ffn(self.norm2(x))


def frame_pairs(frames: int, shift: int) -> tuple[list[tuple[int, int]], list[int]]:
    """Consecutive pairs ``(s, s+1), (s+2, s+3), ...`` and the frames left unpaired."""
    pairs = [(i, i + 1) for i in range(shift, frames - 1, 2)]
    paired = {i for p in pairs for i in p}
    return pairs, [i for i in range(frames) if i not in paired]


class TemporalMutualBlock(Module):
    """Tokens of two consecutive frames attend jointly over both frames.

    Learned ``earlier``/``later`` embeddings mark each token's role in the
    pair, which makes the block sensitive to frame order. A frame without a
    partner attends to itself only.
    """

    def __init__(self, d: int, heads: int, shift: int, rng: XorShiftRNG, dtype):
        super().__init__()
        self.heads, self.shift = heads, shift
        self.norm1 = LayerNorm(d, dtype)
        self.role = param(rng.normal((2, d)) * 0.5, dtype)
        self.qkv = Linear(d, 3 * d, rng, bias=False, dtype=dtype)
        self.out = Linear(d, d, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = MLP([d, 2 * d, d], rng, dtype)

    def _attend(self, tokens: Tensor) -> Tensor:
        d = tokens.shape[-1]
        q, k, v = (self.qkv(tokens)[..., i * d:(i + 1) * d] for i in range(3))
        return self.out(attention(q, k, v, self.heads))

    def __call__(self, x: Tensor) -> Tensor:
        t, h, w, d = x.shape
        flat = self.norm1(x).reshape(t, h * w, d)
        pairs, single = frame_pairs(t, self.shift if t > 2 else 0)
        parts, order = [], []
        if pairs:
            first = T.take(flat, [a for a, _ in pairs], axis=0) + T.take(self.role, [0], axis=0)
            second = T.take(flat, [b for _, b in pairs], axis=0) + T.take(self.role, [1], axis=0)
            joint = self._attend(T.concat([first, second], axis=1))
            parts += [joint[:, :h * w], joint[:, h * w:]]
            order += [a for a, _ in pairs] + [b for _, b in pairs]
        if single:
            parts.append(self._attend(T.take(flat, single, axis=0)))
            order += single
        mixed = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        mixed = T.take(mixed, np.argsort(order), axis=0).reshape(t, h, w, d)
        x = x + mixed
        return x + self.ffn(self.norm2(x))


class Encoder(Module):
    def __init__(self, cfg: VLUerConfig, rng: XorShiftRNG, dtype):
        super().__init__()
        d = cfg.enc_width
        self.embed = Conv3x3(cfg.channels, d, rng.spawn("embed"), dtype)
        blocks = []
        for i in range(cfg.enc_depth):
            blocks.append(SpatialWindowBlock(d, cfg.enc_heads, cfg.window, rng.spawn(f"spatial{i}"), dtype))
            blocks.append(TemporalMutualBlock(d, cfg.enc_heads, i % 2, rng.spawn(f"temporal{i}"), dtype))
        self.blocks = blocks
        self.norm = LayerNorm(d, dtype)
        self.latent_skip = cfg.latent_skip

    @staticmethod
    def width(cfg: VLUerConfig) -> int:
        return cfg.enc_width + (cfg.channels if cfg.latent_skip else 0)

    def __call__(self, z: Tensor) -> Tensor:
        x = self.embed(z)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return T.concat([x, z], axis=-1) if self.latent_skip else x


# -- implicit neural upsampler ----------------------------------------------

@dataclass(frozen=True)
class CoordinateGrid:
    """Query table for upsampling an ``h x w`` grid to ``H x W``.

    ``coords`` holds the normalised ``(y, x)`` centre of every target cell in
    ``[-1, 1]``; ``nearest`` the flat index of the nearest source cell;
    ``offset`` the target centre minus the source centre and ``cell`` the
    target cell size, both measured in source cells.
    """

    source: tuple[int, int]
    target: tuple[int, int]
    coords: np.ndarray
    nearest: np.ndarray
    offset: np.ndarray
    cell: np.ndarray

    def features(self) -> np.ndarray:
        return np.concatenate([self.offset, self.cell], axis=-1)


def cell_centres(n: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def coordinate_grid(source: tuple[int, int], target: tuple[int, int]) -> CoordinateGrid:
    (h, w), (H, W) = source, target
    if H < h or W < w:
        raise ContractError(f"target {H}x{W} smaller than source {h}x{w}; downscaling is unsupported")
    axes = []
    for n_src, n_tgt in ((h, H), (w, W)):
        c = cell_centres(n_tgt)
        idx = np.clip(np.floor((c + 1.0) * n_src / 2.0).astype(np.int64), 0, n_src - 1)
        offset = (c - cell_centres(n_src)[idx]) * n_src / 2.0
        axes.append((c, idx, offset, n_src / n_tgt))
    (cy, iy, oy, sy), (cx, ix, ox, sx) = axes
    gy, gx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    coords = np.stack([cy[gy], cx[gx]], axis=-1).reshape(H * W, 2)
    nearest = (iy[gy] * w + ix[gx]).reshape(H * W)
    offset = np.stack([oy[gy], ox[gx]], axis=-1).reshape(H * W, 2)
    cell = np.tile([sy, sx], (H * W, 1))
    return CoordinateGrid((h, w), (H, W), coords, nearest, offset, cell)


class ImplicitUpsampler(Module):
    def __init__(self, cfg: VLUerConfig, rng: XorShiftRNG, dtype):
        super().__init__()
        self.mlp = MLP([Encoder.width(cfg) + 4, *cfg.inr_hidden, cfg.channels], rng, dtype)
        self.dtype = dtype

    def __call__(self, feats: Tensor, target: tuple[int, int]) -> Tensor:
        t, h, w, c = feats.shape
        grid = coordinate_grid((h, w), target)
        H, W = target
        gathered = T.take(feats.reshape(t, h * w, c), grid.nearest, axis=1)
        q = np.broadcast_to(grid.features().astype(self.dtype), (t, H * W, 4))
        out = self.mlp(T.concat([gathered, Tensor(np.ascontiguousarray(q))], axis=-1))
        return out.reshape(t, H, W, out.shape[-1])


# -- decoder ----------------------------------------------------------------

class Decoder(Module):
    """``coarse + R(coarse)`` with R a temporal-attention refinement."""

    def __init__(self, cfg: VLUerConfig, rng: XorShiftRNG, dtype):
        super().__init__()
        d = cfg.dec_width
        self.heads = cfg.dec_heads
        self.lift = Conv3x3(cfg.channels, d, rng.spawn("lift"), dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.qkv = Linear(d, 3 * d, rng.spawn("qkv"), bias=False, dtype=dtype)
        self.mix = Linear(d, d, rng.spawn("mix"), dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = MLP([d, 2 * d, d], rng.spawn("ffn"), dtype)
        self.head = Linear(d, cfg.channels, rng.spawn("head"), zero=True, dtype=dtype)

    def __call__(self, coarse: Tensor) -> Tensor:
        t, H, W, _ = coarse.shape
        x = self.lift(coarse)
        d = x.shape[-1]
        seq = T.transpose(x.reshape(t, H * W, d), (1, 0, 2))
        n = self.norm1(seq)
        q, k, v = (self.qkv(n)[..., i * d:(i + 1) * d] for i in range(3))
        seq = seq + self.mix(attention(q, k, v, self.heads))
        seq = seq + self.ffn(self.norm2(seq))
        r = T.transpose(seq, (1, 0, 2)).reshape(t, H, W, d)
        return coarse + self.head(r)


# -- full model -------------------------------------------------------------

def _check_latent(z) -> None:
    if z.ndim != 4 or z.shape[-1] != LATENT_CHANNELS:
        raise DimensionError(f"latent must be (t, h, w, {LATENT_CHANNELS}), got {tuple(z.shape)}")


class VLUer(Module):
    def __init__(self, cfg: VLUerConfig | None = None):
        super().__init__()
        cfg = cfg or VLUerConfig()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = XorShiftRNG(cfg.seed)
        self.encoder = Encoder(cfg, rng.spawn("encoder"), self.dtype)
        self.inr = ImplicitUpsampler(cfg, rng.spawn("inr"), self.dtype)
        self.decoder = Decoder(cfg, rng.spawn("decoder"), self.dtype)

    def _tensor(self, z) -> Tensor:
        return z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))

    def encode_features(self, z) -> Tensor:
        _check_latent(z)
        return self.encoder(self._tensor(z))

    def inr_upsample(self, feats, target: tuple[int, int]) -> Tensor:
        return self.inr(self._tensor(feats), tuple(int(v) for v in target))

    def decode_refine(self, coarse) -> Tensor:
        _check_latent(coarse)
        return self.decoder(self._tensor(coarse))

    def __call__(self, z, target: tuple[int, int]) -> Tensor:
        return self.decode_refine(self.inr_upsample(self.encode_features(z), target))


def target_size(shape: Sequence[int], scale: float) -> tuple[int, int]:
    return int(round(shape[1] * scale)), int(round(shape[2] * scale))


def upsample(model: VLUer, z, target: tuple[int, int]) -> np.ndarray:
    """Inference entry point; returns a numpy latent of shape ``(t, H, W, 16)``."""
    with no_grad():
        return model(z, target).data


# -- baselines --------------------------------------------------------------

def baseline_latent_interp(z: np.ndarray, scale: float | None = None,
                           target: tuple[int, int] | None = None) -> np.ndarray:
    """Per-frame, per-channel bilinear resize of the latent."""
    _check_latent(z)
    target = target or target_size(z.shape, scale if scale is not None else 1.0)
    return resize(np.asarray(z), target, "bilinear")


def baseline_rgb_interp(z: np.ndarray, scale: float | None = None, target: tuple[int, int] | None = None,
                        codec: ToyCodec | None = None) -> np.ndarray:
    """Decode to pixels, bicubic resize, encode again."""
    _check_latent(z)
    codec = codec or ToyCodec()
    H, W = target or target_size(z.shape, scale if scale is not None else 1.0)
    video = codec.decode(np.asarray(z))
    big = resize(video, (H * codec.patch, W * codec.patch), "bicubic")
    return codec.encode(big)


# -- losses -----------------------------------------------------------------

def loss_latent(z_sr, z_hr) -> Tensor:
    """Mean absolute error over all entries."""
    if tuple(z_sr.shape) != tuple(z_hr.shape):
        raise ContractError(f"latent shapes differ: {z_sr.shape} vs {z_hr.shape}")
    return T.l1_loss(z_sr, z_hr)


def frame_difference_term(x_sr, x_hr) -> Tensor:
    """Entry-averaged L1 between consecutive-frame differences."""
    d_sr = x_sr[1:] - x_sr[:-1]
    d_hr = x_hr[1:] - x_hr[:-1]
    return T.mean(T.absolute(d_sr - d_hr))


def loss_pixel(x_sr, x_hr, temporal: float = 1.0) -> Tensor:
    """``L1(x_sr, x_hr) + temporal * frame_difference_term(x_sr, x_hr)``."""
    x_sr, x_hr = T.as_tensor(x_sr), T.as_tensor(x_hr)
    if x_sr.shape != x_hr.shape:
        raise ContractError(f"video shapes differ: {x_sr.shape} vs {x_hr.shape}")
    if x_sr.shape[0] < 2:
        raise ContractError("pixel loss needs at least two frames")
    l1 = T.l1_loss(x_sr, x_hr)
    if temporal == 0.0:
        return l1
    return l1 + frame_difference_term(x_sr, x_hr) * temporal


def crop_window(shape: Sequence[int], crop: int | None, rng: XorShiftRNG) -> tuple[slice, slice]:
    H, W = shape[1], shape[2]
    if crop is None or crop >= min(H, W):
        return slice(0, H), slice(0, W)
    y = int(rng.integers(0, H - crop + 1, ())) if H > crop else 0
    x = int(rng.integers(0, W - crop + 1, ())) if W > crop else 0
    return slice(y, y + crop), slice(x, x + crop)


def vluer_objective(model: VLUer, pair: LatentPair, codec: ToyCodec, weights: VLUerLossWeights = VLUerLossWeights(),
                    crop: int | None = None, rng: XorShiftRNG | None = None) -> Tensor:
    """Training loss for one LR/HR pair."""
    z_sr = model(pair.z_lr, pair.z_hr.shape[1:3])
    z_hr = Tensor(pair.z_hr.astype(model.dtype))
    loss = loss_latent(z_sr, z_hr) * weights.latent
    if weights.pixel > 0:
        x_sr = codec.decode(z_sr)
        x_hr = Tensor(codec.decode(pair.z_hr.astype(model.dtype)))
        ys, xs = crop_window(x_sr.shape, crop, rng or XorShiftRNG(0))
        loss = loss + loss_pixel(x_sr[:, ys, xs], x_hr[:, ys, xs], weights.temporal) * weights.pixel
    return loss


# -- training ---------------------------------------------------------------

@dataclass
class VLUerTrainConfig:
    iterations: int = 2000
    lr: float = REFERENCE_LR
    eta_min: float = REFERENCE_ETA_MIN
    batch: int = REFERENCE_BATCH
    seed: int = 0
    crop: int | None = None
    log_every: int = 0

    @property
    def restart_period(self) -> int:
        """Restart period scaled by the reference period-to-length ratio."""
        return max(1, math.ceil(self.iterations * REFERENCE_PERIOD / REFERENCE_ITERATIONS))


@dataclass
class VLUerTrainResult:
    history: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def train_vluer(pairs: Sequence[LatentPair], cfg: VLUerConfig | None = None,
                weights: VLUerLossWeights = VLUerLossWeights(), train: VLUerTrainConfig | None = None,
                codec: ToyCodec | None = None, model: VLUer | None = None,
                scales: Sequence[float] | None = None) -> tuple[VLUer, VLUerTrainResult]:
    """Adam with cosine annealing and warm restarts on the combined objective."""
    train = train or VLUerTrainConfig()
    pairs = list(pairs)
    if not pairs:
        raise ContractError("no training pairs")
    if scales is not None:
        missing = sorted(set(float(s) for s in scales) - {p.scale for p in pairs})
        if missing:
            raise ContractError(f"training pairs do not cover scales {missing}")
    codec = codec or ToyCodec()
    model = model or VLUer(cfg)
    params = model.parameters()
    opt = Adam(params, lr=train.lr)
    sched = CosineRestarts(train.lr, train.restart_period, train.eta_min)
    rng = XorShiftRNG(train.seed).spawn("vluer-train")
    result = VLUerTrainResult()
    for it in range(train.iterations):
        opt.lr = sched(it)
        idx = rng.integers(0, len(pairs), train.batch)
        opt.zero_grad()
        loss = None
        for k in idx:
            term = vluer_objective(model, pairs[int(k)], codec, weights, train.crop, rng)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / train.batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(f"upsampler loss became {value} at iteration {it}")
        backward(loss)
        opt.step()
        result.history.append(value)
        result.lrs.append(opt.lr)
        if train.log_every and it % train.log_every == 0:
            log.info("vluer iter %d loss %.5f lr %.2e", it, value, opt.lr)
    return model, result


# -- benchmark ----------------------------------------------------------------

def _timed(fn, repeats: int) -> tuple[np.ndarray, float]:
    out = fn()
    start = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    return out, (time.perf_counter() - start) * 1000.0 / repeats


def benchmark_upsamplers(model: VLUer, pairs: Sequence[LatentPair], codec: ToyCodec | None = None,
                         repeats: int = 3) -> list[dict]:
    """One row per method with reconstruction metrics and mean wall time per clip.

    Rows carry ``method, psnr_rgb, mse_rgb, mae_lat, mse_lat, wall_ms``.
    Pixel metrics compare clamped decodes against the clamped decode of the
    HR latent.
    """
    from luve.eval import latent_errors, psnr_mse

    codec = codec or ToyCodec()
    methods = {
        "latent-interp": lambda z, tgt: baseline_latent_interp(z, target=tgt),
        "vluer": lambda z, tgt: upsample(model, z, tgt),
        "rgb-interp": lambda z, tgt: baseline_rgb_interp(z, target=tgt, codec=codec),
    }
    rows = []
    for name, fn in methods.items():
        stats = {"psnr_rgb": [], "mse_rgb": [], "mae_lat": [], "mse_lat": [], "wall_ms": []}
        for pair in pairs:
            target = pair.z_hr.shape[1:3]
            z_sr, ms = _timed(lambda: fn(pair.z_lr, target), repeats)
            mae, mse_l = latent_errors(z_sr, pair.z_hr)
            x_sr = np.clip(codec.decode(z_sr.astype(np.float64)), 0.0, 1.0)
            x_hr = np.clip(codec.decode(pair.z_hr.astype(np.float64)), 0.0, 1.0)
            psnr, mse_r = psnr_mse(x_sr, x_hr)
            for key, val in zip(stats, (psnr, mse_r, mae, mse_l, ms)):
                stats[key].append(val)
        row = {"method": name}
        row.update({k: float(np.mean(v)) for k, v in stats.items()})
        rows.append(row)
    return rows
