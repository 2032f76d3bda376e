"""Shared fixtures: small synthetic datasets and models trained once per session."""

from __future__ import annotations

import numpy as np
import pytest

from luve.data import ShapeSceneConfig, ToyCodec, gen_moving_shapes, make_lr_hr_pairs
from luve.numerics import XorShiftRNG

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def report_criterion(request):
    """Record and print one ``PASS``/``FAIL`` line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {number}: {title} | {detail}"
        print(line)
        request.config.stash[ACCEPTANCE_KEY].append(f"{'PASS' if passed else 'FAIL'} {number}: {title} | {detail}")
        return passed

    return record


@pytest.fixture
def rng():
    return XorShiftRNG(1234)


@pytest.fixture(scope="session")
def codec():
    return ToyCodec()


# Upsampler corpus: 12 clips of 6 frames at 48x48, paired at scales 1.5/2/3,
# giving LR latents of 8x8, 6x6 and 4x4 against a 12x12 HR latent.
UPSAMPLER_CLIPS = 12
UPSAMPLER_HELDOUT_CLIPS = 3


@pytest.fixture(scope="session")
def upsampler_pairs(codec):
    clips = [gen_moving_shapes(ShapeSceneConfig(frames=6, height=48, width=48, seed=s, label=s % 4))
             for s in range(UPSAMPLER_CLIPS)]
    pairs = [p for c in clips for p in make_lr_hr_pairs(c, codec=codec)]
    cut = 3 * (UPSAMPLER_CLIPS - UPSAMPLER_HELDOUT_CLIPS)
    return pairs[:cut], pairs[cut:]


@pytest.fixture(scope="session")
def vluer_cache():
    """Trained upsamplers keyed by ``(variant, seed)``, shared across test modules."""
    return {}


# Low-resolution backbone corpus: 4 frames at 16x16 pixels -> 4x4 latents.
@pytest.fixture(scope="session")
def lmg_data(codec):
    items = []
    for s in range(8):
        video = gen_moving_shapes(ShapeSceneConfig(frames=4, height=16, width=16, seed=100 + s, label=s % 4,
                                                   n_objects=1))
        items.append((codec.encode(video).astype(np.float32), s % 4))
    return items
