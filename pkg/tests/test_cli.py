import json

import numpy as np
import pytest

from luve import cli
from luve.numerics import load_checkpoint, load_tensor
from luve.vluer import VLUer

SMALL = {
    "data": {"clips": 4, "frames": 4, "height": 32, "width": 32, "n_objects": 1, "scales": [2.0], "threshold": 0.0},
    "backbone": {"width": 16, "depth": 1, "heads": 2, "iterations": 2, "batch": 2, "uhr_iterations": 1},
    "vluer": {"enc_width": 8, "enc_depth": 1, "inr_hidden": [16, 16], "iterations": 2, "batch": 1},
    "experts": {"iterations": 1, "batch": 1},
    "pipeline": {"n_lr": 2, "n_hr_total": 4, "skip": 1, "lr_frames": 2, "lr_size": [4, 4]},
    "eval": {"fid_patch": 8, "frames_per_video": 2},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(SMALL))
    out = root / "out"
    assert run("dataset", "--config", config, "--out", out) == 0
    for stage in ("lmg", "vluer", "lfe"):
        assert run("train", stage, "--config", config, "--out", out) == 0
    return config, out


def index(out):
    return json.loads((out / "checkpoints" / "index.json").read_text())


class TestConfig:
    def test_defaults(self):
        cfg = cli.parse_config({})
        assert cfg.pipeline.skip == 5 and cfg.experts.t_switch == pytest.approx(0.417)

    def test_typo_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"vluer": {"iterashuns": 10}}))
        assert run("dataset", "--config", bad, "--out", tmp_path / "o") == 3
        assert "unknown config key 'vluer.iterashuns'" in capsys.readouterr().err

    @pytest.mark.parametrize("doc, fragment", [
        ({"seed": "one"}, "seed: expected an integer"),
        ({"pipeline": {"use_experts": 1}}, "pipeline.use_experts"),
        ({"pipeline": {"lr_size": 8}}, "pipeline.lr_size: expected a list"),
        ({"data": []}, "data: expected an object"),
    ])
    def test_wrong_types(self, doc, fragment):
        with pytest.raises(cli.ConfigError, match=fragment):
            cli.parse_config(doc)

    def test_invalid_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run("dataset", "--config", bad, "--out", tmp_path / "o") == 3

    def test_missing_config_file(self, tmp_path):
        assert run("dataset", "--config", tmp_path / "absent.json", "--out", tmp_path / "o") == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            run("train", "nonsense")
        assert info.value.code == 3

    def test_seed_and_out_override(self, tmp_path):
        cfg = cli.load_config(None, seed=7, out=str(tmp_path))
        assert (cfg.seed, cfg.out) == (7, str(tmp_path))


class TestMissingArtifacts:
    def test_generate_without_checkpoints(self, tmp_path, capsys):
        assert run("generate", "--out", tmp_path) == 2
        assert "error [missing]" in capsys.readouterr().err

    def test_train_without_dataset(self, tmp_path):
        assert run("train", "vluer", "--out", tmp_path) == 2

    def test_uhr_without_lmg(self, tmp_path, workspace):
        config, out = workspace
        other = tmp_path / "copy"
        (other / "latents").mkdir(parents=True)
        (other / "videos").mkdir()
        for kind in ("latents", "videos"):
            for f in (out / kind).glob("*"):
                if f.is_file():
                    (other / kind / f.name).write_bytes(f.read_bytes())
        assert run("train", "uhr", "--config", config, "--out", other) == 2


class TestDataset:
    def test_manifest(self, workspace):
        _, out = workspace
        manifest = json.loads((out / "latents" / "manifest.json").read_text())
        assert len(manifest["clips"]) == 4 and manifest["scales"] == [2.0]
        rec = manifest["clips"][0]
        assert load_tensor(out / "latents" / rec["z_hr"]).shape == (4, 8, 8, 16)
        assert load_tensor(out / "latents" / rec["pairs"][0]["z_lr"]).shape == (4, 4, 4, 16)
        assert load_tensor(out / "videos" / rec["video"]).shape == (4, 32, 32, 3)

    def test_content_addressed_and_reproducible(self, workspace, tmp_path):
        config, out = workspace
        assert run("dataset", "--config", config, "--out", tmp_path) == 0
        a = json.loads((out / "latents" / "manifest.json").read_text())
        b = json.loads((tmp_path / "latents" / "manifest.json").read_text())
        assert a == b

    def test_resolved_config_written(self, workspace):
        _, out = workspace
        resolved = json.loads((out / "reports" / "dataset-config.json").read_text())
        assert resolved["data"]["clips"] == 4 and resolved["vluer"]["iterations"] == 2


class TestTrain:
    def test_zero_iterations_is_init(self, workspace, tmp_path):
        config, out = workspace
        doc = json.loads(config.read_text())
        doc["vluer"]["iterations"] = 0
        zero = tmp_path / "zero.json"
        zero.write_text(json.dumps(doc))
        for kind in ("latents", "videos"):
            (tmp_path / kind).mkdir()
            for f in (out / kind).glob("*"):
                if f.is_file():
                    (tmp_path / kind / f.name).write_bytes(f.read_bytes())
        assert run("train", "vluer", "--config", zero, "--out", tmp_path) == 0
        state = load_checkpoint(tmp_path / "checkpoints" / index(tmp_path)["vluer"])
        init = VLUer(cli.vluer_config(cli.parse_config(doc))).state_dict()
        assert state.keys() == init.keys()
        assert all(np.array_equal(state[k], init[k]) for k in init)

    def test_checkpoints_indexed(self, workspace):
        _, out = workspace
        assert set(index(out)) == {"lmg", "vluer", "experts"}
        report = json.loads((out / "reports" / "train-lmg.json").read_text())
        assert report["checkpoint"] == index(out)["lmg"]


class TestGenerate:
    def test_twice_bit_identical(self, workspace):
        config, out = workspace
        assert run("generate", "--config", config, "--out", out) == 0
        first = json.loads((out / "videos" / "gen-l0-s0.json").read_text())
        video = (out / "videos" / first["files"]["video"]).read_bytes()
        assert run("generate", "--config", config, "--out", out) == 0
        second = json.loads((out / "videos" / "gen-l0-s0.json").read_text())
        assert first["files"] == second["files"]
        assert (out / "videos" / second["files"]["video"]).read_bytes() == video
        assert load_tensor(out / "videos" / first["files"]["video"]).shape == (2, 32, 32, 3)
        assert first["expert_steps"] == {"lfe": 2, "hfe": 1}

    def test_png_dump(self, workspace, tmp_path):
        config, out = workspace
        doc = json.loads(config.read_text())
        doc["pipeline"]["dump_png"] = True
        cfg = tmp_path / "png.json"
        cfg.write_text(json.dumps(doc))
        assert run("generate", "--config", cfg, "--out", out, "--seed", 0) == 0
        meta = json.loads((out / "videos" / "gen-l0-s0.json").read_text())
        assert len(meta["png"]) == 2 and all((out / p).exists() for p in meta["png"])


class TestBenchAndEval:
    def test_bench_upsampler(self, workspace, capsys):
        config, out = workspace
        assert run("bench-upsampler", "--config", config, "--out", out) == 0
        rows = json.loads((out / "reports" / "bench-upsampler.json").read_text())
        assert {r["method"] for r in rows} == {"latent-interp", "vluer", "rgb-interp"}
        assert all(r["wall_ms"] > 0 for r in rows)

    def test_eval_with_replay(self, workspace, tmp_path):
        config, out = workspace
        assert run("generate", "--config", config, "--out", out) == 0
        replay = tmp_path / "replay"
        replay.mkdir()
        stems = {p.name.split(".")[0] for p in (out / "videos").glob("gen-*.luvt")}
        for stem in stems:
            for axis, score in (("realism", 7), ("detailness", 5), ("alignment", 9)):
                (replay / f"{stem}.{axis}.json").write_text(
                    json.dumps({"score": score, "reason": f"{axis} judged on the moving square"}))
        assert run("eval", "--config", config, "--out", out, "--mllm-replay", replay) == 0
        lines = (out / "reports" / "metrics.jsonl").read_text().splitlines()
        reports = {r["method"]: r for r in map(json.loads, lines)}
        assert {"latent-interp", "rgb-interp", "vluer", "mllm"} <= set(reports)
        assert reports["mllm"]["mllm"]["realism"] == 7.0
        assert reports["mllm"]["mllm"]["detailness"] == 5.0
        # no target prompt was configured, so the alignment axis is skipped
        assert "alignment" not in reports["mllm"]["mllm"]

    def test_eval_replay_missing_response(self, workspace, tmp_path):
        config, out = workspace
        assert run("eval", "--config", config, "--out", out, "--mllm-replay", tmp_path) == 2
