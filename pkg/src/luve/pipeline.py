"""Three-stage cascade: LR sampling, latent upsampling, expert-routed HR refinement.

The upsampled latent enters the high-resolution denoiser by re-noising it
to ``t_S = 1 - S/N`` on the straight flow path and resuming the Euler
sampler at step ``S``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from luve.backbone import DiffusionSchedule, DiT, sample
from luve.data.codec import ToyCodec
from luve.errors import ConfigError, ContractError
from luve.eval import flicker
from luve.experts import DualExperts, ExpertHooks, ExpertRouterConfig, T_SWITCH
from luve.numerics import XorShiftRNG
from luve.vluer import VLUer, target_size, upsample

log = logging.getLogger(__name__)

DEFAULT_S_SET = (2, 5, 10, 15)


@dataclass
class PipelineConfig:
    n_lr: int = 50
    n_hr_total: int = 50
    skip: int = 5
    scale: float = 2.0
    lr_frames: int = 8
    lr_size: tuple[int, int] = (8, 8)
    seed: int = 0
    t_switch: float = T_SWITCH
    cutoff: float = 0.25
    use_experts: bool = True
    keep_latents: bool = True
    backbone_path: str | None = None
    vluer_path: str | None = None
    experts_path: str | None = None

    def validate(self) -> None:
        if not 0 <= self.skip < self.n_hr_total:
            raise ConfigError(f"skip {self.skip} must satisfy 0 <= S < {self.n_hr_total}")
        if self.scale < 1.0:
            raise ConfigError(f"scale {self.scale} must be >= 1")
        if self.n_lr < 1 or self.lr_frames < 1:
            raise ConfigError("LR steps and frames must be positive")
        ExpertRouterConfig(self.t_switch)

    @property
    def seeds(self) -> dict[str, int]:
        root = XorShiftRNG(self.seed)
        return {name: int(root.spawn(name).next_u64(1)[0] >> np.uint64(1)) for name in ("lr", "renoise")}


@dataclass
class GenerationRecord:
    label: int
    seeds: dict[str, int]
    video: np.ndarray
    lr_latent: np.ndarray | None = None
    upsampled: np.ndarray | None = None
    renoised: np.ndarray | None = None
    hr_latent: np.ndarray | None = None
    start_index: int = 0
    expert_steps: dict[str, int] = field(default_factory=dict)
    wall_s: dict[str, float] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        names = ("video", "lr_latent", "upsampled", "renoised", "hr_latent")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def metadata(self) -> dict:
        meta = {k: v for k, v in asdict(self).items() if not isinstance(v, np.ndarray) and v is not None}
        meta["shapes"] = {k: list(v.shape) for k, v in self.arrays().items()}
        return meta


def renoise(z_hat: np.ndarray, skip: int, steps: int, seed: int) -> tuple[np.ndarray, int]:
    """Blend ``(1 - t_S) z_hat + t_S eps`` with ``t_S = 1 - S/N``; returns ``(x, S)``."""
    if not 0 <= skip < steps:
        raise ConfigError(f"skip {skip} must satisfy 0 <= S < {steps}")
    t_s = DiffusionSchedule(steps).timesteps[skip]
    eps = XorShiftRNG(seed).normal(np.shape(z_hat))
    x = (1.0 - t_s) * np.asarray(z_hat, dtype=np.float64) + t_s * eps
    return x.astype(np.asarray(z_hat).dtype), skip


def _stage(record: GenerationRecord, name: str, start: float) -> None:
    record.wall_s[name] = time.perf_counter() - start


def lr_stage(backbone: DiT, label: int, cfg: PipelineConfig) -> np.ndarray:
    shape = (cfg.lr_frames, *cfg.lr_size, backbone.cfg.latent_channels)
    return sample(backbone, DiffusionSchedule(cfg.n_lr), label, cfg.seeds["lr"], shape)


def hr_stage(backbone: DiT, z_hat: np.ndarray, label: int, cfg: PipelineConfig,
             experts: DualExperts | None = None) -> tuple[np.ndarray, np.ndarray, ExpertHooks | None]:
    """Re-noise ``z_hat`` and finish the HR schedule; returns ``(x_start, z_hr, hooks)``."""
    x0, start = renoise(z_hat, cfg.skip, cfg.n_hr_total, cfg.seeds["renoise"])
    hooks = None
    if experts is not None and cfg.use_experts:
        hooks = ExpertHooks(experts, ExpertRouterConfig(cfg.t_switch), cfg.cutoff)
    z_hr = sample(backbone, DiffusionSchedule(cfg.n_hr_total), label, cfg.seeds["renoise"], z_hat.shape,
                  hooks=hooks, x_start=x0, start_index=start)
    return x0, z_hr, hooks


def generate(label: int, cfg: PipelineConfig, backbone: DiT, vluer: VLUer, experts: DualExperts | None = None,
             codec: ToyCodec | None = None, z_hat: np.ndarray | None = None,
             lr_latent: np.ndarray | None = None) -> GenerationRecord:
    """Run the full cascade for one label.

    ``lr_latent`` / ``z_hat`` short-circuit the first stages, which lets a
    sweep over ``S`` reuse one LR sample and one upsampled latent.
    """
    cfg.validate()
    codec = codec or ToyCodec()
    record = GenerationRecord(label=int(label), seeds=cfg.seeds, video=np.zeros(1), start_index=cfg.skip)

    t0 = time.perf_counter()
    if z_hat is None:
        z_lr = lr_latent if lr_latent is not None else lr_stage(backbone, label, cfg)
        _stage(record, "lmg", t0)
        target = target_size(z_lr.shape, cfg.scale)
        if target[0] % backbone.cfg.patch or target[1] % backbone.cfg.patch:
            raise ContractError(f"VLU stage: HR latent {target} not divisible by token patch {backbone.cfg.patch}")
        t0 = time.perf_counter()
        z_hat = upsample(vluer, z_lr, target).astype(np.float32)
        _stage(record, "vlu", t0)
    else:
        z_lr = lr_latent
    if z_hat.shape[0] != (z_lr.shape[0] if z_lr is not None else z_hat.shape[0]):
        raise ContractError(f"VLU stage changed frame count: {z_lr.shape} -> {z_hat.shape}")

    t0 = time.perf_counter()
    x0, z_hr, hooks = hr_stage(backbone, z_hat, label, cfg, experts)
    _stage(record, "hcr", t0)
    if z_hr.shape != z_hat.shape:
        raise ContractError(f"HCR stage changed shape: {z_hat.shape} -> {z_hr.shape}")

    t0 = time.perf_counter()
    record.video = codec.decode(z_hr.astype(np.float64))
    _stage(record, "decode", t0)
    if hooks is not None:
        record.expert_steps = dict(hooks.step_counts)
    if cfg.keep_latents:
        record.lr_latent, record.upsampled, record.renoised, record.hr_latent = z_lr, z_hat, x0, z_hr
    return record


@dataclass
class SkipAblationRow:
    skip: int
    t_start: float
    deviation: float
    flicker: float


@dataclass
class SkipAblationReport:
    labels: list[int]
    rows: list[SkipAblationRow]

    @property
    def monotone(self) -> bool:
        devs = [r.deviation for r in sorted(self.rows, key=lambda r: r.skip)]
        return all(b <= a for a, b in zip(devs, devs[1:]))

    def to_dict(self) -> dict:
        return {"labels": self.labels, "monotone": self.monotone, "rows": [asdict(r) for r in self.rows]}


def ablate_S(labels: Sequence[int], cfg: PipelineConfig, backbone: DiT, vluer: VLUer,
             experts: DualExperts | None = None, s_set: Sequence[int] = DEFAULT_S_SET,
             codec: ToyCodec | None = None) -> SkipAblationReport:
    """Sweep the skipped-step count with shared LR and upsampled latents per label.

    ``deviation`` is the RMS difference between the refined latent and the
    upsampled latent, averaged over labels.
    """
    if not labels:
        raise ContractError("ablate_S needs at least one label")
    codec = codec or ToyCodec()
    cached = {}
    for label in labels:
        z_lr = lr_stage(backbone, label, cfg)
        cached[label] = (z_lr, upsample(vluer, z_lr, target_size(z_lr.shape, cfg.scale)).astype(np.float32))
    rows = []
    for s in sorted(s_set):
        run_cfg = PipelineConfig(**{**asdict(cfg), "skip": int(s), "keep_latents": True})
        devs, flicks = [], []
        for label in labels:
            z_lr, z_hat = cached[label]
            rec = generate(label, run_cfg, backbone, vluer, experts, codec, z_hat=z_hat, lr_latent=z_lr)
            devs.append(float(np.sqrt(np.mean((rec.hr_latent.astype(np.float64) - z_hat) ** 2))))
            flicks.append(flicker(np.clip(rec.video, 0.0, 1.0)))
        t_start = float(DiffusionSchedule(cfg.n_hr_total).timesteps[s])
        rows.append(SkipAblationRow(int(s), t_start, float(np.mean(devs)), float(np.mean(flicks))))
    report = SkipAblationReport([int(l) for l in labels], rows)
    if not report.monotone:
        log.warning("deviation from the upsampled latent is not monotone in S: %s",
                    [round(r.deviation, 5) for r in rows])
    return report
