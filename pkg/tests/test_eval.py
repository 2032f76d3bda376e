import base64
import hashlib
import io
import json
import logging
import math
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from luve.errors import ContractError, MissingArtifactError, ValidationError
from luve.eval import (
    AXES,
    PROMPT_SLOT,
    MetricReport,
    MllmScore,
    RandomProjection,
    ReplayTransport,
    build_mllm_request,
    evaluate_clips,
    extract_patches,
    fid_patch,
    flicker,
    frechet_distance,
    latent_errors,
    mean_scores,
    parse_mllm_response,
    psnr_mse,
    sample_frame_indices,
    score_videos,
    serialize_mllm_score,
    system_prompt_template,
)
from luve.numerics import XorShiftRNG

TEMPLATE_SHA256 = {
    "realism": "b657fc3601a5381a7cf55e073aab6a8a3ba31293770f765036c77ebc3755c790",
    "detailness": "41521c0f139971d6c797efd9df81b1eefbdf9075e4da0a156726d18dd6af9814",
    "alignment": "e18adc3de9d62f6ee4d5b027ede87a69574a1d2fb113f725343ce185de6b5994",
}
TEMPLATE_OPENINGS = {
    "realism": "You are a UHR (Ultra-High-Resolution) Visual Realism Expert",
    "detailness": "You are a UHR (Ultra-High-Resolution) Texture & Detail Analyst",
    "alignment": "You are a Semantic Alignment Specialist",
}
GOOD_REASON = "textures stable across all motion"


class TestPixelMetrics:
    def test_identical(self, rng):
        v = rng.uniform((2, 4, 4, 3))
        psnr, mse = psnr_mse(v, v)
        assert mse == 0.0 and psnr == math.inf

    def test_zeros_vs_ones(self):
        psnr, mse = psnr_mse(np.zeros((2, 4, 4, 3)), np.ones((2, 4, 4, 3)))
        assert (psnr, mse) == (0.0, 1.0)

    def test_half_frame_offset(self):
        a = np.zeros((2, 4, 4, 3))
        b = a.copy()
        b[:, :2] = 0.5
        psnr, mse = psnr_mse(a, b)
        # half of the entries differ by 0.5: mse = 0.5 * 0.25
        assert mse == pytest.approx(0.125)
        assert psnr == pytest.approx(10 * math.log10(8), abs=1e-9)

    def test_quarter_step(self):
        a = np.zeros((1, 2, 2, 1))
        psnr, mse = psnr_mse(a, np.full_like(a, 0.25))
        assert mse == pytest.approx(0.0625)
        assert psnr == pytest.approx(12.0412, abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            psnr_mse(np.zeros((2, 2)), np.zeros((2, 3)))


class TestLatentMetrics:
    def test_identical_and_offset(self, rng):
        z = rng.normal((2, 2, 2, 16))
        assert latent_errors(z, z) == (0.0, 0.0)
        assert latent_errors(z + 1.0, z) == pytest.approx((1.0, 1.0))

    def test_hand_case(self):
        a = np.array([[1.0, -1.0], [2.0, 0.0]])
        b = np.array([[0.0, 1.0], [2.0, 3.0]])
        abs_sum = sq_sum = 0.0
        for i in range(2):
            for j in range(2):
                abs_sum += abs(a[i, j] - b[i, j])
                sq_sum += (a[i, j] - b[i, j]) ** 2
        assert latent_errors(a, b) == pytest.approx((abs_sum / 4, sq_sum / 4))  # (1.5, 3.5)


class TestFlicker:
    def test_static(self):
        assert flicker(np.full((5, 4, 4, 3), 0.3)) == 0.0

    def test_toggle(self):
        v = np.zeros((4, 2, 2, 3))
        v[1::2] = 1.0
        assert flicker(v) == 1.0

    @pytest.mark.parametrize("n, a", [(2, 1.0), (5, 0.8), (11, 0.3)])
    def test_linear_ramp(self, n, a):
        v = np.broadcast_to(np.linspace(0, a, n)[:, None, None, None], (n, 3, 3, 3))
        assert flicker(v) == pytest.approx(a / (n - 1))

    def test_single_frame(self):
        with pytest.raises(ContractError):
            flicker(np.zeros((1, 2, 2, 3)))


class TestPatches:
    def test_count(self):
        assert extract_patches(np.zeros((1, 8, 8, 3)), 4).shape == (4, 48)

    def test_top_left_grid(self):
        v = np.arange(10 * 10, dtype=float).reshape(1, 10, 10, 1)
        p = extract_patches(v, 4)
        assert p.shape == (4, 16)
        assert p[0, 0] == 0 and p[1, 0] == 4 and p[2, 0] == 40 and p[3, 0] == 44

    def test_frame_sampling(self):
        assert sample_frame_indices(4, 8).tolist() == [0, 1, 2, 3]
        idx = sample_frame_indices(17, 8)
        assert len(idx) == 8 and idx[0] == 0 and idx[-1] == 16 and np.all(np.diff(idx) > 0)

    def test_projection_fixed(self):
        p = XorShiftRNG(0).uniform((5, 12))
        assert np.array_equal(RandomProjection()(p), RandomProjection()(p))
        assert RandomProjection(dim=7)(p).shape == (5, 7)


class TestFrechet:
    def test_identical_sets(self, rng):
        videos = [rng.uniform((4, 16, 16, 3)) for _ in range(3)]
        assert abs(fid_patch(videos, videos, patch=4)) < 1e-6

    def test_gaussian_closed_form(self):
        r = XorShiftRNG(0)
        a, b = r.normal((10_000, 1)), 1.0 + r.normal((10_000, 1))
        assert abs(frechet_distance(a, b) - 1.0) < 0.1

    def test_multivariate_closed_form(self):
        # N(0, diag(1, 4)) vs N(m, diag(4, 1)): |m|^2 + sum (sqrt(s1) - sqrt(s2))^2 = 2 + 1 + 1
        r = XorShiftRNG(1)
        a = r.normal((50_000, 2)) * [1.0, 2.0]
        b = r.normal((50_000, 2)) * [2.0, 1.0] + [1.0, 1.0]
        assert frechet_distance(a, b) == pytest.approx(4.0, abs=0.1)

    @given(st.integers(0, 2**31))
    @settings(max_examples=10, deadline=None)
    def test_symmetric_nonnegative(self, seed):
        r = XorShiftRNG(seed)
        a = [r.uniform((3, 8, 8, 3)) for _ in range(2)]
        b = [r.uniform((3, 8, 8, 3)) ** 2 for _ in range(2)]
        ab, ba = fid_patch(a, b, patch=4), fid_patch(b, a, patch=4)
        assert ab >= 0 and ba >= 0
        assert abs(ab - ba) < 1e-6

    def test_singular_covariance_jitter_logged(self, caplog):
        a = np.zeros((5, 3))
        a[:, 0] = np.arange(5)
        with caplog.at_level(logging.INFO, logger="luve.eval"):
            d = frechet_distance(a, a + 1.0)
        assert d == pytest.approx(3.0, abs=1e-3)
        assert "singular" in caplog.text

    def test_too_few_patches(self):
        with pytest.raises(ContractError):
            fid_patch([np.zeros((1, 4, 4, 3))], [np.zeros((1, 4, 4, 3))], patch=4)


class TestMetricReport:
    def test_pooled_report(self, rng):
        pred = [rng.uniform((4, 16, 16, 3)) for _ in range(2)]
        ref = [np.clip(p + 0.05, 0, 1) for p in pred]
        rep = evaluate_clips("m", ["a", "b"], pred, ref, [np.zeros((2, 2))] * 2, [np.ones((2, 2))] * 2,
                             fid_patch_size=4)
        assert rep.psnr_rgb == pytest.approx(10 * math.log10(1 / rep.mse_rgb))
        assert (rep.mae_lat, rep.mse_lat) == (1.0, 1.0)
        assert rep.fid_patch >= 0
        doc = json.loads(rep.to_json())
        assert doc["method"] == "m" and doc["clip_ids"] == ["a", "b"]

    def test_inconsistent_rejected(self):
        with pytest.raises(ContractError):
            MetricReport("m", [], psnr_rgb=30.0, mse_rgb=0.5).check()

    def test_infinite_psnr_serialises(self, rng):
        v = [rng.uniform((2, 8, 8, 3))]
        doc = json.loads(evaluate_clips("same", ["x"], v, v, fid_patch_size=4).to_json())
        assert doc["psnr_rgb"] == "inf" and doc["mse_rgb"] == 0.0


class TestPromptAssets:
    @pytest.mark.parametrize("axis", AXES)
    def test_digest(self, axis):
        raw = system_prompt_template(axis).encode("utf-8")
        assert hashlib.sha256(raw).hexdigest() == TEMPLATE_SHA256[axis]

    @pytest.mark.parametrize("axis", AXES)
    def test_opening_sentence(self, axis):
        assert system_prompt_template(axis).startswith(TEMPLATE_OPENINGS[axis])

    def test_single_slot(self):
        assert system_prompt_template("alignment").count(PROMPT_SLOT) == 1
        for axis in ("realism", "detailness"):
            assert PROMPT_SLOT not in system_prompt_template(axis)

    def test_unknown_axis(self):
        with pytest.raises(ContractError):
            system_prompt_template("beauty")


class TestRequests:
    def test_realism(self, rng):
        req = build_mllm_request([rng.uniform((8, 8, 3))], "realism")
        assert set(req) == {"model", "system_prompt", "frames", "user_content"}
        assert req["system_prompt"].startswith("You are a UHR (Ultra-High-Resolution) Visual Realism Expert")

    def test_alignment_slot_substituted_once(self, rng):
        req = build_mllm_request([rng.uniform((8, 8, 3))], "alignment", "a red cube")
        assert PROMPT_SLOT not in req["system_prompt"]
        assert req["system_prompt"].count("'a red cube'") == 1

    def test_alignment_needs_prompt(self, rng):
        with pytest.raises(ContractError):
            build_mllm_request([rng.uniform((8, 8, 3))], "alignment")

    def test_zero_frames(self):
        with pytest.raises(ContractError):
            build_mllm_request([], "realism")

    def test_frames_are_png(self):
        frame = np.zeros((4, 6, 3))
        frame[1, 2] = [1.0, 0.5, 0.0]
        req = build_mllm_request([frame], "detailness")
        img = np.asarray(Image.open(io.BytesIO(base64.b64decode(req["frames"][0]))))
        assert img.shape == (4, 6, 3) and img[1, 2].tolist() == [255, 128, 0]


class TestResponses:
    def test_valid(self):
        s = parse_mllm_response(json.dumps({"score": 7, "reason": GOOD_REASON}))
        assert s == MllmScore("realism", 7, GOOD_REASON)

    def test_surrounding_text_tolerated(self):
        body = "Here is my verdict:\n" + json.dumps({"score": 3, "reason": GOOD_REASON}) + "\nThanks"
        assert parse_mllm_response(body).score == 3

    @pytest.mark.parametrize("body, category", [
        ('{"score": 11, "reason": "' + GOOD_REASON + '"}', "range"),
        ('{"score": 0, "reason": "' + GOOD_REASON + '"}', "range"),
        ('{"score": 7, "reason": "too short"}', "short_reason"),
        ('{"score": 7}', "missing_key"),
        ('{"reason": "' + GOOD_REASON + '"}', "missing_key"),
        ('{"score": 7, "reason": "' + GOOD_REASON + '", "confidence": 1}', "extra_key"),
        ('{"score": 7.5, "reason": "' + GOOD_REASON + '"}', "type"),
        ('{"score": true, "reason": "' + GOOD_REASON + '"}', "type"),
        ('{"score": "7", "reason": "' + GOOD_REASON + '"}', "type"),
        ("no json here", "malformed"),
        ('{"score": 7, "reason": ', "malformed"),
        ('{"score": 1, "reason": "' + GOOD_REASON + '"} {"score": 2, "reason": "' + GOOD_REASON + '"}',
         "malformed"),
    ])
    def test_rejections(self, body, category):
        with pytest.raises(ValidationError) as info:
            parse_mllm_response(body)
        assert info.value.category == category

    @given(st.integers(1, 10), st.text(min_size=20, max_size=80), st.sampled_from(AXES))
    def test_round_trip(self, score, reason, axis):
        s = MllmScore(axis, score, reason)
        assert parse_mllm_response(serialize_mllm_score(s), axis) == s


def write_replay(directory, clips, axes, score=6):
    for clip in clips:
        for axis in axes:
            (directory / f"{clip}.{axis}.json").write_text(
                json.dumps({"score": score, "reason": f"{axis} looks consistent for {clip}"}))


class TestScoring:
    def test_replay_end_to_end(self, tmp_path, rng):
        videos = {"c0": rng.uniform((3, 8, 8, 3)), "c1": rng.uniform((3, 8, 8, 3))}
        write_replay(tmp_path, videos, AXES)
        transport = ReplayTransport(tmp_path)
        scores = score_videos(videos, transport, prompts={"c0": "a red cube", "c1": "a blue disc"})
        assert set(scores) == {"c0", "c1"}
        assert all(set(v) == set(AXES) for v in scores.values())
        assert mean_scores(scores) == {a: 6.0 for a in sorted(AXES)}
        assert "a blue disc" in transport.requests["c1.alignment"]["system_prompt"]

    def test_missing_response(self, tmp_path, rng):
        with pytest.raises(MissingArtifactError):
            score_videos({"c0": rng.uniform((2, 8, 8, 3))}, ReplayTransport(tmp_path), axes=("realism",))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            ReplayTransport(tmp_path / "absent")

    def test_invalid_response_dropped(self, tmp_path, rng, caplog):
        (tmp_path / "c0.realism.json").write_text('{"score": 11, "reason": "' + GOOD_REASON + '"}')
        with caplog.at_level(logging.WARNING):
            scores = score_videos({"c0": rng.uniform((2, 8, 8, 3))}, ReplayTransport(tmp_path), axes=("realism",))
        assert scores == {} and "rejected" in caplog.text

    def test_alignment_skipped_without_prompt(self, tmp_path, rng):
        write_replay(tmp_path, ["c0"], ("realism", "detailness"))
        scores = score_videos({"c0": rng.uniform((2, 8, 8, 3))}, ReplayTransport(tmp_path))
        assert set(scores["c0"]) == {"realism", "detailness"}

    def test_in_flight_cap(self, rng):
        lock = threading.Lock()
        state = {"now": 0, "peak": 0}

        class Slow:
            def send(self, request, key):
                with lock:
                    state["now"] += 1
                    state["peak"] = max(state["peak"], state["now"])
                time.sleep(0.02)
                with lock:
                    state["now"] -= 1
                return json.dumps({"score": 5, "reason": GOOD_REASON})

        videos = {f"c{i}": rng.uniform((2, 4, 4, 3)) for i in range(6)}
        scores = score_videos(videos, Slow(), axes=("realism", "detailness"), max_in_flight=2)
        assert len(scores) == 6
        assert 1 <= state["peak"] <= 2

    def test_order_independent(self, tmp_path, rng):
        videos = {f"c{i}": rng.uniform((2, 4, 4, 3)) for i in range(4)}
        write_replay(tmp_path, videos, ("realism",))
        a = score_videos(videos, ReplayTransport(tmp_path), axes=("realism",), max_in_flight=1)
        b = score_videos(dict(reversed(list(videos.items()))), ReplayTransport(tmp_path), axes=("realism",),
                         max_in_flight=4)
        assert a == b
