"""Low/high-frequency LoRA experts attached to a frozen DiT.

The low-frequency expert adds ``alpha * B A low_pass(x)`` next to each
block's attention sublayer and is active in the high-noise interval
``t >= t_switch``. The high-frequency expert adds ``alpha * B A high_pass(x)``
next to the FFN and is active for ``t < t_switch``.

Filters are ideal masks in the 2-D spatial DFT of the token grid, applied
per frame and per channel. ``high_pass`` is defined as ``x - low_pass(x)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from luve.backbone import DiT, TokenGrid, train_flow_matching
from luve.errors import ConfigError, ContractError
from luve.nn import Module, param
from luve.numerics import Tensor, XorShiftRNG, custom_op, dft2d, idft2d, signed_frequencies
from luve.numerics import tensor as T

log = logging.getLogger(__name__)

T_SWITCH = 0.417
LFE, HFE = "lfe", "hfe"


@dataclass(frozen=True)
class FrequencyFilter:
    kind: str = "low"
    cutoff: float = 0.25

    def __post_init__(self):
        if self.kind not in ("low", "high"):
            raise ConfigError(f"filter kind must be 'low' or 'high', got {self.kind!r}")
        if not 0.0 < self.cutoff <= 1.0:
            raise ConfigError(f"cutoff {self.cutoff} outside (0, 1]")

    def __call__(self, x, grid: TokenGrid | None):
        return low_pass(x, grid, self.cutoff) if self.kind == "low" else high_pass(x, grid, self.cutoff)


@lru_cache(maxsize=128)
def band_mask(rows: int, cols: int, cutoff: float) -> np.ndarray:
    """Keep bins with ``max(|fy|/fy_max, |fx|/fx_max) <= cutoff``."""

    def ratio(n):
        f = np.abs(signed_frequencies(n)).astype(np.float64)
        return f / (n // 2) if n > 1 else np.zeros(1)

    mask = np.maximum(ratio(rows)[:, None], ratio(cols)[None, :]) <= cutoff + 1e-12
    mask.setflags(write=False)
    return mask


def _band_limit(field: np.ndarray, grid: TokenGrid, cutoff: float) -> np.ndarray:
    """Apply the ideal low-pass to ``(tokens, d)`` values laid out on ``grid``."""
    d = field.shape[-1]
    x = field.reshape(grid.frames, grid.rows, grid.cols, d)
    stacked = np.moveaxis(x, 0, 2).reshape(grid.rows, grid.cols, grid.frames * d)
    spec = dft2d(stacked) * band_mask(grid.rows, grid.cols, cutoff)[:, :, None]
    back = idft2d(spec)
    residue = np.abs(back.imag).max()
    if residue >= 1e-6 * max(1.0, np.abs(field).max()):
        raise ContractError(f"low-pass left an imaginary residue of {residue:.3g}")
    out = back.real.reshape(grid.rows, grid.cols, grid.frames, d)
    return np.moveaxis(out, 2, 0).reshape(field.shape).astype(field.dtype)


def _check_grid(x, grid: TokenGrid | None) -> None:
    if grid is None:
        raise ContractError("frequency filters need token grid metadata")
    if x.shape[0] != grid.count:
        raise ContractError(f"{x.shape[0]} tokens do not match grid of {grid.count}")


def low_pass(x, grid: TokenGrid | None, cutoff: float = 0.25):
    """Ideal spatial low-pass over the token grid. Accepts Tensors or arrays."""
    _check_grid(x, grid)
    if isinstance(x, Tensor):
        out = _band_limit(x.data, grid, cutoff)
        # the band-limiting projector is real and symmetric, hence self-adjoint
        return custom_op(out, (x,), lambda g: (_band_limit(g, grid, cutoff),), "low_pass")
    return _band_limit(np.asarray(x), grid, cutoff)


def high_pass(x, grid: TokenGrid | None, cutoff: float = 0.25):
    """``x - low_pass(x)``."""
    return x - low_pass(x, grid, cutoff)


class LoRAAdapter(Module):
    """Rank-``r`` residual ``alpha * x A^T B^T``; ``B`` starts at zero."""

    def __init__(self, d: int, rank: int = 4, alpha: float = 8.0, site: str = "attention",
                 rng: XorShiftRNG | None = None, dtype=np.float32):
        super().__init__()
        if site not in ("attention", "ffn"):
            raise ConfigError(f"unknown LoRA site {site!r}")
        if not 0 < rank <= d:
            raise ConfigError(f"rank {rank} invalid for width {d}")
        rng = rng or XorShiftRNG(0)
        self.rank, self.alpha, self.site = rank, float(alpha), site
        self.down = param(rng.normal((rank, d)) / np.sqrt(d), dtype)
        self.up = param(np.zeros((d, rank)), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ T.transpose(self.down)) @ T.transpose(self.up) * self.alpha


def lfe_attention(block, x: Tensor, adapter: LoRAAdapter, grid: TokenGrid, cutoff: float = 0.25) -> Tensor:
    """``Attention(x) + LoRA(LowPass(x))`` for one block's attention sublayer."""
    if adapter.site != "attention":
        raise ContractError("low-frequency expert must be bound to the attention site")
    return block.attn(x) + adapter(low_pass(x, grid, cutoff))


def hfe_ffn(block, x: Tensor, adapter: LoRAAdapter, grid: TokenGrid, cutoff: float = 0.25) -> Tensor:
    """``FFN(x) + LoRA(HighPass(x))`` for one block's FFN sublayer."""
    if adapter.site != "ffn":
        raise ContractError("high-frequency expert must be bound to the FFN site")
    return block.ffn(x) + adapter(high_pass(x, grid, cutoff))


@dataclass(frozen=True)
class ExpertRouterConfig:
    t_switch: float = T_SWITCH

    def __post_init__(self):
        if not 0.0 < self.t_switch < 1.0:
            raise ConfigError(f"t_switch {self.t_switch} must lie strictly inside (0, 1)")


def route(t: float, cfg: ExpertRouterConfig = ExpertRouterConfig()) -> frozenset[str]:
    """``t >= t_switch`` selects the low-frequency expert, otherwise the high one."""
    return frozenset({LFE}) if t >= cfg.t_switch else frozenset({HFE})


class DualExperts(Module):
    """One LFE adapter per block (attention) and one HFE adapter per block (FFN)."""

    def __init__(self, width: int, depth: int, rank: int = 4, alpha: float = 8.0, seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        rng = XorShiftRNG(seed)
        self.lfe = [LoRAAdapter(width, rank, alpha, "attention", rng.spawn(f"lfe{i}"), dtype) for i in range(depth)]
        self.hfe = [LoRAAdapter(width, rank, alpha, "ffn", rng.spawn(f"hfe{i}"), dtype) for i in range(depth)]

    def adapters(self, kind: str) -> list[LoRAAdapter]:
        return self.lfe if kind == LFE else self.hfe

    def parameters_of(self, kind: str) -> list[Tensor]:
        return [p for a in self.adapters(kind) for p in a.parameters()]

    def is_zero(self) -> bool:
        return all(not a.up.data.any() for a in self.lfe + self.hfe)


@dataclass
class ExpertHooks:
    """Routes each sampler step to exactly one expert and counts invocations.

    ``force`` pins the active expert regardless of ``t`` (used in training,
    where ``t`` is already drawn from the expert's own interval).
    """

    experts: DualExperts
    router: ExpertRouterConfig = field(default_factory=ExpertRouterConfig)
    cutoff: float = 0.25
    force: str | None = None
    step_counts: dict = field(default_factory=lambda: {LFE: 0, HFE: 0})
    block_calls: dict = field(default_factory=lambda: {LFE: 0, HFE: 0})
    active: frozenset = frozenset()

    def begin_step(self, t: float) -> None:
        self.active = frozenset({self.force}) if self.force else route(t, self.router)
        for kind in self.active:
            self.step_counts[kind] += 1

    def attention_branch(self, block: int, x: Tensor, grid: TokenGrid):
        if LFE not in self.active:
            return None
        self.block_calls[LFE] += 1
        return self.experts.lfe[block](low_pass(x, grid, self.cutoff))

    def ffn_branch(self, block: int, x: Tensor, grid: TokenGrid):
        if HFE not in self.active:
            return None
        self.block_calls[HFE] += 1
        return self.experts.hfe[block](high_pass(x, grid, self.cutoff))

    def reset_counts(self) -> None:
        self.step_counts = {LFE: 0, HFE: 0}
        self.block_calls = {LFE: 0, HFE: 0}


def interval_sampler(kind: str, t_switch: float):
    """Uniform timesteps on ``[t_switch, 1]`` (LFE) or ``[0, t_switch)`` (HFE)."""
    if not 0.0 < t_switch < 1.0:
        raise ConfigError(f"expert interval is empty for t_switch={t_switch}")
    if kind == LFE:
        return lambda rng, n: t_switch + (1.0 - t_switch) * rng.uniform(n)
    if kind == HFE:
        return lambda rng, n: t_switch * rng.uniform(n)
    raise ConfigError(f"unknown expert kind {kind!r}")


@dataclass
class ExpertTrainConfig:
    iterations: int = 300
    lr: float = 1e-4
    batch: int = 4
    seed: int = 0
    t_switch: float = T_SWITCH
    cutoff: float = 0.25


def train_expert(kind: str, backbone: DiT, experts: DualExperts, dataset: Sequence[tuple[np.ndarray, int]],
                 cfg: ExpertTrainConfig = ExpertTrainConfig(), heldout=None):
    """Train one expert on its own noise interval with the host frozen.

    For the high-frequency expert the caller passes latents of
    unsharp-masked clips. Returns the flow-matching training result.
    """
    sampler = interval_sampler(kind, cfg.t_switch)
    backbone.freeze()
    for other in (LFE, HFE):
        for p in experts.parameters_of(other):
            p.requires_grad = other == kind
    hooks = ExpertHooks(experts, ExpertRouterConfig(cfg.t_switch), cfg.cutoff, force=kind)
    result = train_flow_matching(backbone, dataset, cfg.iterations, lr=cfg.lr, batch=cfg.batch, seed=cfg.seed,
                                 params=experts.parameters_of(kind), time_sampler=sampler, hooks=hooks,
                                 heldout=heldout)
    for p in experts.parameters():
        p.requires_grad = True
    return result
