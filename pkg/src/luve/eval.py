"""Reconstruction metrics, patch Frechet distance, flicker and the MLLM client.

The MLLM client only speaks JSON over a pluggable blocking transport. The
system prompts are shipped as package assets and loaded byte-for-byte.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from PIL import Image

from luve.errors import ContractError, MissingArtifactError, ValidationError
from luve.numerics import XorShiftRNG

log = logging.getLogger(__name__)

# -- reconstruction metrics --------------------------------------------------


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def psnr_mse(a, b) -> tuple[float, float]:
    """PSNR (dB, peak 1) and MSE of two ``[0, 1]`` videos; ``inf`` for identical input."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return psnr_from_mse(mse), mse


def latent_errors(a, b) -> tuple[float, float]:
    """Mean absolute and mean squared error between latents."""
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(np.abs(d))), float(np.mean(d * d))


def flicker(video) -> float:
    """Mean absolute frame-to-frame change per entry."""
    v = np.asarray(video, dtype=np.float64)
    if v.ndim < 2 or v.shape[0] < 2:
        raise ContractError("flicker needs at least two frames")
    return float(np.mean(np.abs(np.diff(v, axis=0))))


# -- patch Frechet distance --------------------------------------------------

def sample_frame_indices(n: int, k: int) -> np.ndarray:
    """``k`` uniformly spaced frame indices (all frames when ``n <= k``)."""
    if n <= k:
        return np.arange(n)
    return np.round(np.linspace(0, n - 1, k)).astype(np.int64)


def extract_patches(video, patch: int, frames_per_video: int = 8) -> np.ndarray:
    """Non-overlapping top-left anchored ``patch x patch`` tiles, flattened."""
    v = np.asarray(video, dtype=np.float64)
    n, H, W = v.shape[:3]
    if patch > H or patch > W:
        raise ContractError(f"patch {patch} larger than frame {H}x{W}")
    ny, nx = H // patch, W // patch
    frames = v[sample_frame_indices(n, frames_per_video), :ny * patch, :nx * patch]
    tiles = frames.reshape(len(frames), ny, patch, nx, patch, -1).transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(len(frames) * ny * nx, -1)


class RandomProjection:
    """Fixed seeded Gaussian projection of flattened patches to ``dim`` features."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim, self.seed = dim, seed
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        d_in = patches.shape[1]
        if d_in not in self._cache:
            w = XorShiftRNG(self.seed).spawn(f"proj{d_in}").normal((d_in, self.dim))
            self._cache[d_in] = w / np.sqrt(d_in)
        return patches @ self._cache[d_in]


def _covariance(x: np.ndarray) -> np.ndarray:
    c = x - x.mean(axis=0)
    return c.T @ c / (len(x) - 1)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _jittered(cov: np.ndarray, name: str, jitter: float) -> np.ndarray:
    if np.linalg.eigvalsh(cov).min() <= jitter:
        log.info("covariance %s is singular; adding %.0e to the diagonal", name, jitter)
        return cov + jitter * np.eye(len(cov))
    return cov


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, jitter: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`` over feature rows.

    The trace of ``(Sa Sb)^(1/2)`` is evaluated through the symmetric
    product ``Sa^(1/2) Sb Sa^(1/2)``, which has the same eigenvalues.
    """
    a = np.asarray(feats_a, dtype=np.float64).reshape(len(feats_a), -1)
    b = np.asarray(feats_b, dtype=np.float64).reshape(len(feats_b), -1)
    if len(a) < 2 or len(b) < 2:
        raise ContractError("Frechet distance needs at least two samples per side")
    sa = _jittered(_covariance(a), "a", jitter)
    sb = _jittered(_covariance(b), "b", jitter)
    root_a = _psd_sqrt(sa)
    cross = np.linalg.eigvalsh((root_a @ sb @ root_a + (root_a @ sb @ root_a).T) / 2)
    trace_cross = float(np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    mean_term = float(np.sum((a.mean(axis=0) - b.mean(axis=0)) ** 2))
    return max(0.0, mean_term + float(np.trace(sa) + np.trace(sb)) - 2.0 * trace_cross)


Extractor = Callable[[np.ndarray], np.ndarray]


def fid_patch(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray], patch: int = 32,
              frames_per_video: int = 8, extractor: Extractor | None = None) -> float:
    """Frechet distance between extractor features of local patches."""
    extractor = extractor or RandomProjection()
    feats = []
    for videos in (set_a, set_b):
        patches = np.concatenate([extract_patches(v, patch, frames_per_video) for v in videos])
        if len(patches) < 2:
            raise ContractError("need at least two patches per set")
        feats.append(extractor(patches))
    return frechet_distance(*feats)


# -- metric report -----------------------------------------------------------

@dataclass
class MetricReport:
    method: str
    clip_ids: list[str]
    psnr_rgb: float = float("nan")
    mse_rgb: float = float("nan")
    mae_lat: float = float("nan")
    mse_lat: float = float("nan")
    flicker: float = float("nan")
    fid_patch: float = float("nan")
    mllm: dict[str, float] = field(default_factory=dict)

    def check(self) -> None:
        if not math.isnan(self.mse_rgb):
            expected = psnr_from_mse(self.mse_rgb)
            if not (expected == self.psnr_rgb or math.isclose(expected, self.psnr_rgb, rel_tol=1e-9)):
                raise ContractError(f"psnr {self.psnr_rgb} inconsistent with mse {self.mse_rgb}")

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None if math.isnan(v) else "inf"
            return v

        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, sort_keys=True)


def evaluate_clips(method: str, clip_ids: Sequence[str], predicted: Sequence[np.ndarray],
                   reference: Sequence[np.ndarray], pred_latents=None, ref_latents=None,
                   fid_patch_size: int = 32, frames_per_video: int = 8) -> MetricReport:
    """Pooled metrics over a set of clips (pixel MSE is averaged before PSNR)."""
    if len(predicted) != len(reference) or not predicted:
        raise ContractError("predicted and reference sets must be non-empty and aligned")
    mse = float(np.mean([psnr_mse(p, r)[1] for p, r in zip(predicted, reference)]))
    report = MetricReport(method, list(clip_ids), psnr_from_mse(mse), mse,
                          flicker=float(np.mean([flicker(p) for p in predicted])))
    if pred_latents is not None and ref_latents is not None:
        errs = np.array([latent_errors(a, b) for a, b in zip(pred_latents, ref_latents)])
        report.mae_lat, report.mse_lat = float(errs[:, 0].mean()), float(errs[:, 1].mean())
    try:
        report.fid_patch = fid_patch(predicted, reference, fid_patch_size, frames_per_video)
    except ContractError as exc:
        log.warning("fid_patch skipped: %s", exc)
    report.check()
    return report


# -- MLLM client -------------------------------------------------------------

AXES = ("realism", "detailness", "alignment")
PROMPT_SLOT = "[Target User Prompt]"
MIN_REASON = 20
DEFAULT_MODEL = "mllm-judge"


def system_prompt_template(axis: str) -> str:
    if axis not in AXES:
        raise ContractError(f"unknown evaluation axis {axis!r}")
    return resources.files("luve.assets.prompts").joinpath(f"{axis}.txt").read_bytes().decode("utf-8")


def encode_png(frame: np.ndarray) -> str:
    img = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def build_mllm_request(frames, axis: str, target_prompt: str | None = None,
                       model: str = DEFAULT_MODEL) -> dict:
    """Request document ``{model, system_prompt, frames, user_content}``."""
    frames = list(frames) if frames is not None else []
    if not frames:
        raise ContractError("an MLLM request needs at least one frame")
    template = system_prompt_template(axis)
    if axis == "alignment":
        if not target_prompt:
            raise ContractError("the alignment axis needs a target prompt")
        if template.count(PROMPT_SLOT) != 1:
            raise ContractError("alignment template must contain exactly one prompt slot")
        template = template.replace(PROMPT_SLOT, target_prompt, 1)
    return {
        "model": model,
        "system_prompt": template,
        "frames": [encode_png(f) for f in frames],
        "user_content": f"Evaluate the attached {len(frames)} frames of one generated video.",
    }


@dataclass(frozen=True)
class MllmScore:
    axis: str
    score: int
    reason: str


def _single_object(body: str) -> dict:
    decoder = json.JSONDecoder()
    found, pos = [], 0
    while True:
        start = body.find("{", pos)
        if start < 0:
            break
        try:
            obj, end = decoder.raw_decode(body, start)
        except json.JSONDecodeError:
            pos = start + 1
            continue
        found.append(obj)
        pos = end
    if not found:
        raise ValidationError("malformed", "response holds no JSON object")
    if len(found) > 1:
        raise ValidationError("malformed", f"response holds {len(found)} JSON objects, expected one")
    if not isinstance(found[0], dict):
        raise ValidationError("malformed", "response JSON is not an object")
    return found[0]


def parse_mllm_response(body: str, axis: str = "realism") -> MllmScore:
    """Validate a raw response body into an ``MllmScore``."""
    obj = _single_object(body)
    missing = sorted({"score", "reason"} - set(obj))
    if missing:
        raise ValidationError("missing_key", f"missing keys {missing}")
    extra = sorted(set(obj) - {"score", "reason"})
    if extra:
        raise ValidationError("extra_key", f"unexpected keys {extra}")
    score, reason = obj["score"], obj["reason"]
    if isinstance(score, bool) or not isinstance(score, int):
        raise ValidationError("type", f"score must be an integer, got {score!r}")
    if not 1 <= score <= 10:
        raise ValidationError("range", f"score {score} outside 1..10")
    if not isinstance(reason, str):
        raise ValidationError("type", "reason must be a string")
    if len(reason) < MIN_REASON:
        raise ValidationError("short_reason", f"reason has {len(reason)} characters, need {MIN_REASON}")
    return MllmScore(axis, score, reason)


def serialize_mllm_score(score: MllmScore) -> str:
    return json.dumps({"score": score.score, "reason": score.reason}, ensure_ascii=False)


class Transport(Protocol):
    def send(self, request: dict, key: str) -> str: ...


class HttpTransport:
    """POSTs the request JSON to ``url`` and returns the response body text."""

    def __init__(self, url: str, timeout: float = 60.0, headers: Mapping[str, str] | None = None):
        self.url, self.timeout = url, timeout
        self.headers = {"Content-Type": "application/json", **(headers or {})}

    def send(self, request: dict, key: str) -> str:
        data = json.dumps(request).encode("utf-8")
        req = urllib.request.Request(self.url, data=data, headers=self.headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")


class ReplayTransport:
    """Serves canned responses from ``<directory>/<key>.json``; records requests."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise MissingArtifactError(f"replay directory {self.directory} does not exist")
        self.requests: dict[str, dict] = {}

    def send(self, request: dict, key: str) -> str:
        path = self.directory / f"{key}.json"
        if not path.exists():
            raise MissingArtifactError(f"no canned response {path}")
        self.requests[key] = request
        return path.read_text(encoding="utf-8")


def score_videos(videos: Mapping[str, np.ndarray], transport: Transport, axes: Sequence[str] = AXES,
                 prompts: Mapping[str, str] | None = None, max_in_flight: int = 4,
                 frames_per_video: int = 8) -> dict[str, dict[str, MllmScore]]:
    """Score every (clip, axis) with at most ``max_in_flight`` concurrent requests.

    Responses that fail validation are logged and left out of the result.
    """
    if max_in_flight < 1:
        raise ContractError("max_in_flight must be >= 1")
    prompts = prompts or {}
    jobs = []
    for clip_id, video in videos.items():
        frames = np.asarray(video)[sample_frame_indices(len(video), frames_per_video)]
        for axis in axes:
            if axis == "alignment" and clip_id not in prompts:
                log.info("skipping alignment for %s: no target prompt", clip_id)
                continue
            jobs.append((clip_id, axis, build_mllm_request(frames, axis, prompts.get(clip_id))))

    def run(job):
        clip_id, axis, request = job
        try:
            return clip_id, axis, parse_mllm_response(transport.send(request, f"{clip_id}.{axis}"), axis)
        except ValidationError as exc:
            log.warning("rejected response for %s/%s: %s", clip_id, axis, exc)
            return clip_id, axis, None

    results: dict[str, dict[str, MllmScore]] = {}
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        for clip_id, axis, score in pool.map(run, jobs):
            if score is not None:
                results.setdefault(clip_id, {})[axis] = score
    return results


def mean_scores(scores: Mapping[str, Mapping[str, MllmScore]]) -> dict[str, float]:
    per_axis: dict[str, list[int]] = {}
    for by_axis in scores.values():
        for axis, s in by_axis.items():
            per_axis.setdefault(axis, []).append(s.score)
    return {axis: float(np.mean(v)) for axis, v in sorted(per_axis.items())}
