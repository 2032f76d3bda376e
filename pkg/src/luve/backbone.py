"""Toy diffusion transformer trained with rectified flow matching.

Convention: ``t = 1`` is pure noise and ``t = 0`` is clean data. The noisy
latent is ``x_t = (1 - t) z0 + t eps`` and the network regresses the
velocity ``eps - z0``. Sampling integrates that ODE with Euler steps from
``t = 1`` down to ``t = 0``.

The same network is used for low-resolution motion generation and as the
frozen host for the frequency experts, so every block exposes separate
attention and FFN sublayers with optional hook branches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from luve.errors import ConfigError, ContractError, DimensionError, TrainingDivergedError
from luve.nn import LayerNorm, Linear, Module, attention, param
from luve.numerics import Tensor, XorShiftRNG, backward, mse_loss, no_grad, silu
from luve.numerics import tensor as T
from luve.optim import Adam, AdamW

log = logging.getLogger(__name__)


@dataclass
class DiTConfig:
    patch: int = 2
    width: int = 64
    depth: int = 4
    heads: int = 4
    ffn_mult: int = 4
    num_labels: int = 4
    latent_channels: int = 16
    time_dim: int = 64
    seed: int = 0
    zero_init_output: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 8:
            raise ConfigError("width must be a multiple of 8 (3-D positional code)")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")


@dataclass(frozen=True)
class TokenGrid:
    frames: int
    rows: int
    cols: int
    patch: int
    channels: int

    @property
    def count(self) -> int:
        return self.frames * self.rows * self.cols


def tokenize(z, patch: int):
    """``(t, h, w, C)`` latent to ``(t*h'*w', p*p*C)`` tokens, frame-major then row-major."""
    if z.ndim != 4:
        raise DimensionError(f"latent must be rank 4, got {z.shape}")
    t, h, w, c = z.shape
    if h % patch or w % patch:
        raise DimensionError(f"latent {h}x{w} not divisible by token patch {patch}")
    grid = TokenGrid(t, h // patch, w // patch, patch, c)
    shape6 = (t, grid.rows, patch, grid.cols, patch, c)
    order = (0, 1, 3, 2, 4, 5)
    if isinstance(z, Tensor):
        tokens = T.transpose(z.reshape(shape6), order).reshape(grid.count, patch * patch * c)
    else:
        tokens = np.asarray(z).reshape(shape6).transpose(order).reshape(grid.count, patch * patch * c)
    return tokens, grid


def detokenize(tokens, grid: TokenGrid):
    p = grid.patch
    shape6 = (grid.frames, grid.rows, grid.cols, p, p, grid.channels)
    order = (0, 1, 3, 2, 4, 5)
    out_shape = (grid.frames, grid.rows * p, grid.cols * p, grid.channels)
    if isinstance(tokens, Tensor):
        return T.transpose(tokens.reshape(shape6), order).reshape(out_shape)
    return np.asarray(tokens).reshape(shape6).transpose(order).reshape(out_shape)


@dataclass(frozen=True)
class DiffusionSchedule:
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("schedule needs at least one step")

    @property
    def timesteps(self) -> np.ndarray:
        """``t_i = 1 - i/N`` for ``i = 0..N``; strictly decreasing from 1 to 0."""
        i = np.arange(self.steps + 1)
        return 1.0 - i / self.steps


def sinusoidal(values: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(values, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def timestep_features(t: float, dim: int) -> np.ndarray:
    return sinusoidal(np.array([1000.0 * t]), dim)


def positional_code(grid: TokenGrid, width: int) -> np.ndarray:
    df = width // 4
    dr = (width - df) // 2
    dc = width - df - dr
    f, r, c = np.meshgrid(np.arange(grid.frames), np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    parts = [sinusoidal(f.reshape(-1), df, 100.0), sinusoidal(r.reshape(-1), dr, 100.0),
             sinusoidal(c.reshape(-1), dc, 100.0)]
    return np.concatenate(parts, axis=-1)


class ExpertHookProtocol(Protocol):
    def begin_step(self, t: float) -> None: ...
    def attention_branch(self, block: int, x: Tensor, grid: TokenGrid) -> Tensor | None: ...
    def ffn_branch(self, block: int, x: Tensor, grid: TokenGrid) -> Tensor | None: ...


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: XorShiftRNG, dtype):
        super().__init__()
        self.heads = heads
        self.wq = Linear(d, d, rng, bias=False, dtype=dtype)
        self.wk = Linear(d, d, rng, bias=False, dtype=dtype)
        self.wv = Linear(d, d, rng, bias=False, dtype=dtype)
        self.wo = Linear(d, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.wo(attention(self.wq(x), self.wk(x), self.wv(x), self.heads))


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: XorShiftRNG, dtype):
        super().__init__()
        self.w1 = Linear(d, d * mult, rng, dtype=dtype)
        self.w2 = Linear(d * mult, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.gelu(self.w1(x)))


class DiTBlock(Module):
    def __init__(self, cfg: DiTConfig, rng: XorShiftRNG, dtype):
        super().__init__()
        d = cfg.width
        self.norm1 = LayerNorm(d, dtype, affine=False)
        self.attn = Attention(d, cfg.heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype, affine=False)
        self.ffn = FeedForward(d, cfg.ffn_mult, rng, dtype)
        self.modulation = Linear(d, 4 * d, rng, zero=True, dtype=dtype)

    def attn_input(self, x: Tensor, mod: list[Tensor]) -> Tensor:
        return self.norm1(x) * (1.0 + mod[1]) + mod[0]

    def ffn_input(self, x: Tensor, mod: list[Tensor]) -> Tensor:
        return self.norm2(x) * (1.0 + mod[3]) + mod[2]

    def modulations(self, cond: Tensor) -> list[Tensor]:
        m = self.modulation(cond)
        d = m.shape[-1] // 4
        return [m[..., i * d:(i + 1) * d] for i in range(4)]

    def __call__(self, x: Tensor, cond: Tensor, index: int = 0, grid: TokenGrid | None = None,
                 hooks: ExpertHookProtocol | None = None) -> Tensor:
        mod = self.modulations(cond)
        h = self.attn_input(x, mod)
        a = self.attn(h)
        if hooks is not None:
            extra = hooks.attention_branch(index, h, grid)
            if extra is not None:
                a = a + extra
        x = x + a
        h = self.ffn_input(x, mod)
        f = self.ffn(h)
        if hooks is not None:
            extra = hooks.ffn_branch(index, h, grid)
            if extra is not None:
                f = f + extra
        return x + f


class DiT(Module):
    """Predicts the flow-matching velocity for a single latent clip."""

    def __init__(self, cfg: DiTConfig | None = None):
        super().__init__()
        cfg = cfg or DiTConfig()
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = XorShiftRNG(cfg.seed)
        d = cfg.width
        token_dim = cfg.patch * cfg.patch * cfg.latent_channels
        self.embed = Linear(token_dim, d, rng.spawn("embed"), dtype=dtype)
        self.time_mlp1 = Linear(cfg.time_dim, d, rng.spawn("time1"), dtype=dtype)
        self.time_mlp2 = Linear(d, d, rng.spawn("time2"), dtype=dtype)
        self.label_table = param(rng.spawn("labels").normal((cfg.num_labels, d)) * 0.5, dtype)
        self.blocks = [DiTBlock(cfg, rng.spawn(f"block{i}"), dtype) for i in range(cfg.depth)]
        self.final_norm = LayerNorm(d, dtype, affine=False)
        self.final_modulation = Linear(d, 2 * d, rng.spawn("final_mod"), zero=True, dtype=dtype)
        self.final = Linear(d, token_dim, rng.spawn("final"), zero=cfg.zero_init_output, dtype=dtype)
        self.dtype = dtype

    def condition(self, t: float, label: int) -> Tensor:
        if not 0 <= int(label) < self.cfg.num_labels:
            raise ContractError(f"unknown label id {label}")
        if not 0.0 <= t <= 1.0:
            raise ContractError(f"timestep {t} outside [0, 1]")
        feats = Tensor(timestep_features(t, self.cfg.time_dim).astype(self.dtype))
        temb = self.time_mlp2(silu(self.time_mlp1(feats)))
        return silu(temb + T.take(self.label_table, [int(label)], axis=0))

    def __call__(self, z, t: float, label: int, hooks: ExpertHookProtocol | None = None):
        """Velocity for latent ``z`` of shape ``(t, h, w, C)``.

        Returns a Tensor when ``z`` is a Tensor or gradients are being
        recorded, otherwise a numpy array.
        """
        as_array = not isinstance(z, Tensor)
        zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        tokens, grid = tokenize(zt, self.cfg.patch)
        if hooks is not None:
            hooks.begin_step(float(t))
        cond = self.condition(float(t), label)
        x = self.embed(tokens) + Tensor(positional_code(grid, self.cfg.width).astype(self.dtype))
        for i, block in enumerate(self.blocks):
            x = block(x, cond, i, grid, hooks)
        m = self.final_modulation(cond)
        d = self.cfg.width
        x = self.final_norm(x) * (1.0 + m[..., d:]) + m[..., :d]
        out = detokenize(self.final(x), grid)
        return out.data if as_array and not out.requires_grad else out


VelocityFn = Callable[..., object]


def sample(model: VelocityFn, schedule: DiffusionSchedule, label: int, seed: int, shape: Sequence[int],
           hooks: ExpertHookProtocol | None = None, x_start: np.ndarray | None = None,
           start_index: int = 0, dtype=np.float32, trajectory: list | None = None) -> np.ndarray:
    """Euler integration ``x <- x - (t_i - t_{i+1}) v(x, t_i)`` from ``t_start`` to 0.

    ``x_start`` defaults to seeded standard normal noise. ``start_index`` lets
    the high-resolution pass resume from a re-noised latent.
    """
    ts = schedule.timesteps
    if not 0 <= start_index < schedule.steps:
        raise ConfigError(f"start index {start_index} outside [0, {schedule.steps})")
    if x_start is None:
        x = XorShiftRNG(seed).normal(tuple(shape)).astype(dtype)
    else:
        x = np.asarray(x_start, dtype=dtype).copy()
    with no_grad():
        for i in range(start_index, schedule.steps):
            v = model(x, float(ts[i]), label, hooks) if hooks is not None else model(x, float(ts[i]), label)
            v = v.data if isinstance(v, Tensor) else np.asarray(v)
            x = (x - (ts[i] - ts[i + 1]) * v).astype(dtype)
            if trajectory is not None:
                trajectory.append(x.copy())
    return x


def flow_pair(z0: np.ndarray, eps: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Noisy point on the straight path and its velocity target."""
    return (1.0 - t) * z0 + t * eps, eps - z0


def fm_train_step(model: VelocityFn, z0: np.ndarray, eps: np.ndarray, t: float, label: int = 0,
                  hooks: ExpertHookProtocol | None = None) -> Tensor:
    """Flow-matching MSE for one clip; returns the scalar loss tensor."""
    x_t, target = flow_pair(z0, eps, t)
    dtype = getattr(model, "dtype", x_t.dtype)
    xt = Tensor(np.asarray(x_t, dtype=dtype))
    pred = model(xt, t, label, hooks) if hooks is not None else model(xt, t, label)
    return mse_loss(pred, Tensor(np.asarray(target, dtype=dtype)))


@dataclass
class FlowTrainResult:
    history: list[float] = field(default_factory=list)
    heldout_before: float = float("nan")
    heldout_after: float = float("nan")


TimeSampler = Callable[[XorShiftRNG, int], np.ndarray]


def uniform_times(rng: XorShiftRNG, n: int) -> np.ndarray:
    return rng.uniform(n)


def _heldout_loss(model, items, draws, hooks) -> float:
    with no_grad():
        total = 0.0
        for (z, label), (eps, t) in zip(items, draws):
            total += float(fm_train_step(model, z, eps, t, label, hooks).data)
    return total / len(items)


def train_flow_matching(model: Module, data: Sequence[tuple[np.ndarray, int]], iterations: int, *,
                        lr: float = 1e-3, batch: int = 4, seed: int = 0, params: list[Tensor] | None = None,
                        optimizer: str = "adam", weight_decay: float = 0.0,
                        time_sampler: TimeSampler = uniform_times, hooks=None,
                        heldout: Sequence[tuple[np.ndarray, int]] | None = None,
                        log_every: int = 0) -> FlowTrainResult:
    """Minimise the flow-matching loss over ``(latent, label)`` items."""
    if not data:
        raise ContractError("training set is empty")
    rng = XorShiftRNG(seed)
    train_rng, eval_rng = rng.spawn("train"), rng.spawn("heldout")
    params = list(params if params is not None else model.parameters())
    opt = (AdamW(params, lr=lr, weight_decay=weight_decay) if optimizer == "adamw"
           else Adam(params, lr=lr))
    heldout = list(heldout if heldout else data)
    draws = [(eval_rng.normal(z.shape), float(time_sampler(eval_rng, 1)[0])) for z, _ in heldout]
    result = FlowTrainResult()
    result.heldout_before = _heldout_loss(model, heldout, draws, hooks)
    for it in range(iterations):
        idx = train_rng.integers(0, len(data), batch)
        times = time_sampler(train_rng, batch)
        opt.zero_grad()
        loss = None
        for j, k in enumerate(idx):
            z, label = data[int(k)]
            eps = train_rng.normal(z.shape)
            term = fm_train_step(model, z, eps, float(times[j]), label, hooks)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(f"flow-matching loss became {value} at iteration {it}")
        backward(loss)
        opt.step()
        result.history.append(value)
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.5f", it, value)
    result.heldout_after = _heldout_loss(model, heldout, draws, hooks)
    return result


def train_lmg(dataset: Sequence[tuple[np.ndarray, int]], cfg: DiTConfig | None = None, iterations: int = 500,
              lr: float = 1e-3, batch: int = 4, seed: int = 0, model: DiT | None = None):
    """Train the low-resolution motion generator; returns ``(model, result)``.

    When the dataset has at least four clips the last quarter is held out for
    the before/after loss comparison.
    """
    if not dataset:
        raise ContractError("LMG dataset is empty")
    model = model or DiT(cfg)
    data = list(dataset)
    heldout = None
    if len(data) >= 4:
        cut = len(data) - len(data) // 4
        data, heldout = data[:cut], data[cut:]
    result = train_flow_matching(model, data, iterations, lr=lr, batch=batch, seed=seed, heldout=heldout)
    return model, result


UHR_LR = 1e-5
UHR_ITERATIONS = 15_000


def train_uhr(model: DiT, hr_dataset: Sequence[tuple[np.ndarray, int]], iterations: int = 200,
              lr: float = UHR_LR, weight_decay: float = 1e-2, batch: int = 2, seed: int = 0) -> FlowTrainResult:
    """Optional fine-tune of the whole backbone on high-resolution latents (AdamW)."""
    if not hr_dataset:
        raise ContractError("UHR dataset is empty")
    return train_flow_matching(model, list(hr_dataset), iterations, lr=lr, batch=batch, seed=seed,
                               optimizer="adamw", weight_decay=weight_decay)
