"""Quality-score filtering of training clips."""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray], float]
DEFAULT_THRESHOLD = 6.5


def contrast_sharpness_score(clip: np.ndarray) -> float:
    """Deterministic stand-in for a learned preference model, in [0, 10]."""
    luma = clip[..., :3] @ np.array([0.299, 0.587, 0.114])
    contrast = float(luma.std())
    grad = np.abs(np.diff(luma, axis=1)).mean() + np.abs(np.diff(luma, axis=2)).mean()
    return float(10.0 * (1.0 - np.exp(-(4.0 * contrast + 8.0 * grad))))


def score_clips(clips: Sequence[np.ndarray], scorer: Scorer = contrast_sharpness_score) -> list[float | None]:
    scores: list[float | None] = []
    for i, clip in enumerate(clips):
        try:
            scores.append(float(scorer(clip)))
        except Exception as exc:  # a broken clip must not abort curation
            log.warning("scorer failed on clip %d (%s); skipping", i, exc)
            scores.append(None)
    return scores


def retained_indices(scores: Sequence[float | None], threshold: float = DEFAULT_THRESHOLD) -> list[int]:
    """Indices whose score strictly exceeds ``threshold``, in input order."""
    return [i for i, s in enumerate(scores) if s is not None and s > threshold]


def curate(clips: Sequence[np.ndarray], scorer: Scorer = contrast_sharpness_score,
           threshold: float = DEFAULT_THRESHOLD) -> list[np.ndarray]:
    keep = retained_indices(score_clips(clips, scorer), threshold)
    return [clips[i] for i in keep]
