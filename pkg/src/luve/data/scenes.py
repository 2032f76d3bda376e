"""Synthetic moving-shapes clips.

Objects move at constant velocity and bounce off the frame edges. Random
scenes draw their velocities from a motion class, which doubles as the
conditioning label for the generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from luve.errors import ConfigError
from luve.numerics import XorShiftRNG

MOTION_CLASSES = ("static", "horizontal", "vertical", "diagonal")


@dataclass(frozen=True)
class ShapeObject:
    kind: str = "rect"  # "rect" or "disc"
    size: tuple[int, int] = (4, 4)  # (height, width); discs use size[0] as diameter
    position: tuple[float, float] = (0.0, 0.0)  # top-left (x, y) at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)  # pixels per frame (vx, vy)
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stripes: float = 0.0  # amplitude of a fine diagonal stripe texture


@dataclass(frozen=True)
class ShapeSceneConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    seed: int = 0
    label: int = 1
    n_objects: int = 3
    max_speed: float = 2.0
    objects: tuple[ShapeObject, ...] | None = None
    background: tuple[float, float, float] | None = None
    texture: float = 0.05

    def validate(self) -> None:
        for side in (self.height, self.width):
            if not 16 <= side <= 256:
                raise ConfigError(f"resolution {self.height}x{self.width} outside [16, 256]")
        if self.frames < 2:
            raise ConfigError("a clip needs at least two frames")
        if not 0 <= self.label < len(MOTION_CLASSES):
            raise ConfigError(f"unknown motion class {self.label}")
        for obj in self.objects or ():
            h, w = _extent(obj)
            if h > self.height or w > self.width:
                raise ConfigError(f"object {obj.size} larger than frame {self.height}x{self.width}")


def _extent(obj: ShapeObject) -> tuple[int, int]:
    if obj.kind == "disc":
        return obj.size[0], obj.size[0]
    return obj.size


def reflect(p: np.ndarray | float, span: int) -> np.ndarray:
    """Fold an unbounded coordinate into ``[0, span]`` by mirror reflection."""
    p = np.asarray(p, dtype=np.float64)
    if span <= 0:
        return np.zeros_like(p)
    m = np.mod(p, 2 * span)
    return np.where(m <= span, m, 2 * span - m)


def trajectory(obj: ShapeObject, frames: int, height: int, width: int) -> np.ndarray:
    """Integer top-left ``(x, y)`` per frame, shape ``(frames, 2)``."""
    h, w = _extent(obj)
    t = np.arange(frames)
    x = reflect(obj.position[0] + obj.velocity[0] * t, width - w)
    y = reflect(obj.position[1] + obj.velocity[1] * t, height - h)
    return np.floor(np.stack([x, y], axis=1) + 0.5).astype(int)


def random_objects(cfg: ShapeSceneConfig, rng: XorShiftRNG) -> tuple[ShapeObject, ...]:
    kind = MOTION_CLASSES[cfg.label]
    objs = []
    for _ in range(cfg.n_objects):
        side = int(rng.integers(max(3, cfg.height // 8), max(4, cfg.height // 3) + 1))
        shape = "disc" if rng.uniform() < 0.4 else "rect"
        size = (side, side) if shape == "disc" else (side, int(rng.integers(max(3, side // 2), side * 2 + 1)))
        size = (min(size[0], cfg.height), min(size[1], cfg.width))
        pos = (float(rng.uniform((), 0, cfg.width - size[1])), float(rng.uniform((), 0, cfg.height - size[0])))
        speed = float(rng.uniform((), 1.0, max(1.0, cfg.max_speed)))
        sx, sy = (1.0 if s else -1.0 for s in rng.uniform(2) < 0.5)
        vel = {
            "static": (0.0, 0.0),
            "horizontal": (sx * speed, 0.0),
            "vertical": (0.0, sy * speed),
            "diagonal": (sx * speed, sy * speed),
        }[kind]
        color = tuple(float(c) for c in rng.uniform(3, 0.25, 1.0))
        stripes = float(rng.uniform((), 0.0, 0.35)) if rng.uniform() < 0.5 else 0.0
        objs.append(ShapeObject(shape, size, pos, vel, color, stripes))
    return tuple(objs)


def _background(cfg: ShapeSceneConfig, rng: XorShiftRNG) -> np.ndarray:
    if cfg.background is not None:
        return np.broadcast_to(np.asarray(cfg.background, dtype=np.float64), (cfg.height, cfg.width, 3)).copy()
    top, bottom = rng.uniform(3, 0.0, 0.35), rng.uniform(3, 0.0, 0.35)
    ramp = np.linspace(0.0, 1.0, cfg.height)[:, None, None]
    bg = (1 - ramp) * top + ramp * bottom
    bg = np.broadcast_to(bg, (cfg.height, cfg.width, 3)).copy()
    if cfg.texture > 0:
        bg += cfg.texture * (rng.uniform((cfg.height, cfg.width, 1)) - 0.5)
    return bg


def _paint(frame: np.ndarray, obj: ShapeObject, x: int, y: int) -> None:
    h, w = _extent(obj)
    yy, xx = np.mgrid[0:h, 0:w]
    if obj.kind == "disc":
        r = h / 2.0
        mask = (yy + 0.5 - r) ** 2 + (xx + 0.5 - r) ** 2 <= r * r
    else:
        mask = np.ones((h, w), dtype=bool)
    color = np.asarray(obj.color, dtype=np.float64)
    patch = np.broadcast_to(color, (h, w, 3)).copy()
    if obj.stripes > 0:
        patch *= (1.0 - obj.stripes * ((xx + yy) % 3 == 0))[..., None]
    region = frame[y:y + h, x:x + w]
    region[mask] = patch[mask]


def gen_moving_shapes(cfg: ShapeSceneConfig) -> np.ndarray:
    """Render a ``(frames, height, width, 3)`` clip with values in [0, 1]."""
    cfg.validate()
    rng = XorShiftRNG(cfg.seed)
    objects = cfg.objects if cfg.objects is not None else random_objects(cfg, rng.spawn("objects"))
    bg = _background(cfg, rng.spawn("background"))
    video = np.empty((cfg.frames, cfg.height, cfg.width, 3))
    paths = [trajectory(o, cfg.frames, cfg.height, cfg.width) for o in objects]
    for t in range(cfg.frames):
        frame = bg.copy()
        for obj, path in zip(objects, paths):
            _paint(frame, obj, *path[t])
        video[t] = frame
    return np.clip(video, 0.0, 1.0)
