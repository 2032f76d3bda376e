"""``luve`` command-line entry point.

Subcommands: ``dataset``, ``train {lmg,uhr,vluer,lfe,hfe}``, ``generate``,
``bench-upsampler`` and ``eval``. Every command accepts ``--config``,
``--seed`` and ``--out``. Artifacts land in ``OUT/{checkpoints,latents,
videos,reports}`` under content-addressed names, and each run writes its
resolved configuration next to its reports.

Exit codes: 0 success, 2 missing artifact, 3 invalid configuration or input,
1 any other failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from luve import backbone as bb
from luve import data as D
from luve import eval as E
from luve import experts as X
from luve import pipeline as P
from luve import vluer as V
from luve.errors import ConfigError, ContractError, LuveError, MissingArtifactError, ValidationError
from luve.numerics import load_checkpoint, load_tensor, save_checkpoint, tensor_bytes

log = logging.getLogger("luve.cli")

EXIT_OK, EXIT_FAILURE, EXIT_MISSING, EXIT_INVALID = 0, 1, 2, 3
STAGES = ("lmg", "uhr", "vluer", "lfe", "hfe")


# -- configuration -----------------------------------------------------------

@dataclass
class DataSection:
    clips: int = 8
    frames: int = 8
    height: int = 64
    width: int = 64
    n_objects: int = 3
    scales: list[float] = field(default_factory=lambda: list(D.TRAINING_SCALES))
    threshold: float = D.DEFAULT_THRESHOLD
    unsharp_sigma: float = 1.0
    unsharp_amount: float = 0.5


@dataclass
class BackboneSection:
    width: int = 64
    depth: int = 4
    heads: int = 4
    patch: int = 2
    iterations: int = 300
    lr: float = 1e-3
    batch: int = 4
    uhr_iterations: int = 50
    uhr_lr: float = bb.UHR_LR


@dataclass
class VLUerSection:
    enc_width: int = 32
    enc_depth: int = 2
    inr_hidden: list[int] = field(default_factory=lambda: [64, 64, 32, 32])
    dec_width: int = 8
    iterations: int = 1000
    lr: float = V.REFERENCE_LR
    batch: int = V.REFERENCE_BATCH
    latent_weight: float = 1.0
    pixel_weight: float = 1.0
    temporal_weight: float = 1.0
    crop: int | None = None


@dataclass
class ExpertsSection:
    rank: int = 4
    alpha: float = 8.0
    cutoff: float = 0.25
    t_switch: float = X.T_SWITCH
    iterations: int = 100
    lr: float = 1e-4
    batch: int = 2


@dataclass
class PipelineSection:
    label: int = 0
    n_lr: int = 50
    n_hr_total: int = 50
    skip: int = 5
    scale: float = 2.0
    lr_frames: int = 8
    lr_size: list[int] = field(default_factory=lambda: [8, 8])
    use_experts: bool = True
    dump_png: bool = False


@dataclass
class EvalSection:
    fid_patch: int = 32
    frames_per_video: int = 8
    scale: float = 2.0
    mllm_url: str | None = None
    mllm_replay: str | None = None
    mllm_model: str = E.DEFAULT_MODEL
    max_in_flight: int = 4
    prompts: dict[str, str] = field(default_factory=dict)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    vluer: VLUerSection = field(default_factory=VLUerSection)
    experts: ExpertsSection = field(default_factory=ExpertsSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    eval: EvalSection = field(default_factory=EvalSection)


def _coerce(value: Any, annotation: Any, path: str) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if dataclasses.is_dataclass(annotation):
        return _build(annotation, value, path)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return {str(k): _coerce(v, args[1], f"{path}.{k}") for k, v in value.items()}
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{path + '.' if path else ''}{key}'")
    kwargs = {k: _coerce(v, hints[k], f"{path + '.' if path else ''}{k}") for k, v in data.items()}
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    """Strict parse: unknown keys and wrong types raise ``ConfigError`` naming the path."""
    return _build(RunConfig, data, "")


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    cfg = parse_config(raw)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    return cfg


# -- artifact layout -----------------------------------------------------------

class Layout:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.dirs = {name: self.root / name for name in ("checkpoints", "latents", "videos", "reports")}

    def make(self) -> None:
        for d in self.dirs.values():
            d.mkdir(parents=True, exist_ok=True)

    def write_bytes(self, kind: str, stem: str, seed: int, payload: bytes, suffix: str) -> Path:
        digest = hashlib.sha256(payload).hexdigest()[:12]
        path = self.dirs[kind] / f"{stem}-s{seed}-{digest}{suffix}"
        path.write_bytes(payload)
        return path

    def write_json(self, kind: str, name: str, obj) -> Path:
        path = self.dirs[kind] / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    # checkpoint index: stage -> file name
    def _index_path(self) -> Path:
        return self.dirs["checkpoints"] / "index.json"

    def index(self) -> dict[str, str]:
        p = self._index_path()
        return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}

    def save_checkpoint(self, stage: str, seed: int, state: dict[str, np.ndarray]) -> Path:
        tmp = self.dirs["checkpoints"] / f".{stage}.tmp"
        save_checkpoint(tmp, state)
        payload = tmp.read_bytes()
        tmp.unlink()
        path = self.write_bytes("checkpoints", stage, seed, payload, ".luve")
        idx = self.index()
        idx[stage] = path.name
        self.write_json("checkpoints", "index.json", idx)
        return path

    def load_checkpoint(self, stage: str) -> dict[str, np.ndarray]:
        name = self.index().get(stage)
        if name is None:
            raise MissingArtifactError(f"no '{stage}' checkpoint in {self.dirs['checkpoints']}")
        path = self.dirs["checkpoints"] / name
        if not path.exists():
            raise MissingArtifactError(f"checkpoint file {path} is missing")
        return load_checkpoint(path)


def write_resolved_config(layout: Layout, command: str, cfg: RunConfig) -> Path:
    return layout.write_json("reports", f"{command}-config.json", asdict(cfg))


# -- model construction ----------------------------------------------------------

def dit_config(cfg: RunConfig) -> bb.DiTConfig:
    b = cfg.backbone
    return bb.DiTConfig(patch=b.patch, width=b.width, depth=b.depth, heads=b.heads,
                        num_labels=len(D.MOTION_CLASSES), seed=cfg.seed)


def vluer_config(cfg: RunConfig) -> V.VLUerConfig:
    v = cfg.vluer
    return V.VLUerConfig(enc_width=v.enc_width, enc_depth=v.enc_depth, inr_hidden=tuple(v.inr_hidden),
                         dec_width=v.dec_width, seed=cfg.seed)


def new_experts(cfg: RunConfig) -> X.DualExperts:
    return X.DualExperts(cfg.backbone.width, cfg.backbone.depth, cfg.experts.rank, cfg.experts.alpha, cfg.seed)


def load_backbone(cfg: RunConfig, layout: Layout) -> bb.DiT:
    model = bb.DiT(dit_config(cfg))
    stage = "uhr" if "uhr" in layout.index() else "lmg"
    model.load_state_dict(layout.load_checkpoint(stage))
    return model


def load_vluer(cfg: RunConfig, layout: Layout) -> V.VLUer:
    model = V.VLUer(vluer_config(cfg))
    model.load_state_dict(layout.load_checkpoint("vluer"))
    return model


def experts_state(experts: X.DualExperts) -> dict[str, np.ndarray]:
    return {f"experts.{k}": v for k, v in experts.state_dict().items()}


def load_experts(cfg: RunConfig, layout: Layout, required: bool = False) -> X.DualExperts:
    experts = new_experts(cfg)
    if "experts" in layout.index() or required:
        state = layout.load_checkpoint("experts")
        experts.load_state_dict({k[len("experts."):]: v for k, v in state.items()})
    return experts


# -- dataset ------------------------------------------------------------------------

def _manifest(layout: Layout) -> dict:
    path = layout.dirs["latents"] / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"dataset manifest {path} not found; run 'luve dataset' first")
    return json.loads(path.read_text(encoding="utf-8"))


def _load(layout: Layout, kind: str, name: str) -> np.ndarray:
    path = layout.dirs[kind] / name
    if not path.exists():
        raise MissingArtifactError(f"dataset file {path} is missing")
    return load_tensor(path)


def cmd_dataset(cfg: RunConfig, layout: Layout, args) -> int:
    d = cfg.data
    codec = D.ToyCodec()
    clips, records = [], []
    for i in range(d.clips):
        scene = D.ShapeSceneConfig(frames=d.frames, height=d.height, width=d.width, seed=cfg.seed * 100_003 + i,
                                   label=i % len(D.MOTION_CLASSES), n_objects=d.n_objects)
        clips.append((scene, D.gen_moving_shapes(scene)))
    scores = D.score_clips([c for _, c in clips])
    retained = set(D.retained_indices(scores, d.threshold))
    for i, ((scene, video), score) in enumerate(zip(clips, scores)):
        cid = f"clip{i:04d}"
        rec = {"clip_id": cid, "seed": scene.seed, "label": scene.label, "score": score,
               "retained": i in retained, "video": None, "z_hr": None, "z_sharp": None, "pairs": []}
        rec["video"] = layout.write_bytes("videos", f"{cid}-video", cfg.seed, tensor_bytes(video.astype(np.float32)),
                                          ".luvt").name
        sharp = codec.encode(D.unsharp_mask(video, d.unsharp_sigma, d.unsharp_amount))
        rec["z_sharp"] = layout.write_bytes("latents", f"{cid}-sharp", cfg.seed,
                                            tensor_bytes(sharp.astype(np.float32)), ".luvt").name
        for pair in D.make_lr_hr_pairs(video, d.scales, codec):
            if rec["z_hr"] is None:
                rec["z_hr"] = layout.write_bytes("latents", f"{cid}-hr", cfg.seed,
                                                 tensor_bytes(pair.z_hr.astype(np.float32)), ".luvt").name
            name = layout.write_bytes("latents", f"{cid}-lr{pair.scale:g}", cfg.seed,
                                      tensor_bytes(pair.z_lr.astype(np.float32)), ".luvt").name
            rec["pairs"].append({"scale": pair.scale, "z_lr": name})
        records.append(rec)
    manifest = {"clips": records, "scales": d.scales, "threshold": d.threshold}
    layout.write_json("latents", "manifest.json", manifest)
    print(f"dataset: {len(records)} clips, {len(retained)} retained above {d.threshold}")
    return EXIT_OK


def _clip_pairs(layout: Layout, manifest: dict, scales=None) -> list[D.LatentPair]:
    pairs = []
    for rec in manifest["clips"]:
        z_hr = _load(layout, "latents", rec["z_hr"])
        video = _load(layout, "videos", rec["video"])
        for p in rec["pairs"]:
            if scales is None or p["scale"] in scales:
                pairs.append(D.LatentPair(p["scale"], _load(layout, "latents", p["z_lr"]), z_hr, video, None))
    return pairs


# -- training -----------------------------------------------------------------------

def cmd_train(cfg: RunConfig, layout: Layout, args) -> int:
    stage = args.stage
    manifest = _manifest(layout)
    clips = manifest["clips"]
    if stage == "lmg":
        b = cfg.backbone
        scale = cfg.pipeline.scale
        data = []
        for rec in clips:
            match = [p for p in rec["pairs"] if p["scale"] == scale]
            if not match:
                raise ConfigError(f"dataset has no LR latents at pipeline.scale={scale}")
            data.append((_load(layout, "latents", match[0]["z_lr"]), rec["label"]))
        model, result = bb.train_lmg(data, dit_config(cfg), b.iterations, b.lr, b.batch, cfg.seed)
        path = layout.save_checkpoint("lmg", cfg.seed, model.state_dict())
        summary = {"heldout_before": result.heldout_before, "heldout_after": result.heldout_after}
    elif stage == "uhr":
        model = bb.DiT(dit_config(cfg))
        model.load_state_dict(layout.load_checkpoint("lmg"))
        data = [(_load(layout, "latents", rec["z_hr"]), rec["label"]) for rec in clips]
        result = bb.train_uhr(model, data, cfg.backbone.uhr_iterations, cfg.backbone.uhr_lr, seed=cfg.seed)
        path = layout.save_checkpoint("uhr", cfg.seed, model.state_dict())
        summary = {"heldout_before": result.heldout_before, "heldout_after": result.heldout_after}
    elif stage == "vluer":
        v = cfg.vluer
        pairs = _clip_pairs(layout, manifest)
        weights = V.VLUerLossWeights(v.latent_weight, v.pixel_weight, v.temporal_weight)
        train = V.VLUerTrainConfig(iterations=v.iterations, lr=v.lr, batch=v.batch, seed=cfg.seed, crop=v.crop)
        model, result = V.train_vluer(pairs, vluer_config(cfg), weights, train, scales=cfg.data.scales)
        path = layout.save_checkpoint("vluer", cfg.seed, model.state_dict())
        summary = {"final_loss": result.history[-1] if result.history else None}
    else:
        e = cfg.experts
        host = load_backbone(cfg, layout)
        experts = load_experts(cfg, layout)
        kept = [rec for rec in clips if rec["retained"]]
        if not kept:
            raise ValidationError("empty", "no clips passed curation; lower data.threshold")
        key = "z_hr" if stage == "lfe" else "z_sharp"
        data = [(_load(layout, "latents", rec[key]), rec["label"]) for rec in kept]
        tcfg = X.ExpertTrainConfig(iterations=e.iterations, lr=e.lr, batch=e.batch, seed=cfg.seed,
                                   t_switch=e.t_switch, cutoff=e.cutoff)
        result = X.train_expert(stage, host, experts, data, tcfg)
        path = layout.save_checkpoint("experts", cfg.seed, experts_state(experts))
        summary = {"heldout_before": result.heldout_before, "heldout_after": result.heldout_after}
    layout.write_json("reports", f"train-{stage}.json", {"stage": stage, "checkpoint": path.name, **summary})
    print(f"train {stage}: wrote {path}")
    return EXIT_OK


# -- generation -------------------------------------------------------------------------

def pipeline_config(cfg: RunConfig) -> P.PipelineConfig:
    p = cfg.pipeline
    return P.PipelineConfig(n_lr=p.n_lr, n_hr_total=p.n_hr_total, skip=p.skip, scale=p.scale,
                            lr_frames=p.lr_frames, lr_size=tuple(p.lr_size), seed=cfg.seed,
                            t_switch=cfg.experts.t_switch, cutoff=cfg.experts.cutoff, use_experts=p.use_experts)


def _dump_png(layout: Layout, stem: str, video: np.ndarray) -> list[str]:
    from PIL import Image

    folder = layout.dirs["videos"] / stem
    folder.mkdir(exist_ok=True)
    names = []
    for i, frame in enumerate(D.export_video(video)):
        path = folder / f"frame{i:03d}.png"
        Image.fromarray(np.round(frame * 255.0).astype(np.uint8)).save(path)
        names.append(str(path.relative_to(layout.root)))
    return names


def cmd_generate(cfg: RunConfig, layout: Layout, args) -> int:
    host = load_backbone(cfg, layout)
    upsampler = load_vluer(cfg, layout)
    experts = load_experts(cfg, layout)
    pcfg = pipeline_config(cfg)
    record = P.generate(cfg.pipeline.label, pcfg, host, upsampler, experts)
    stem = f"gen-l{cfg.pipeline.label}"
    video = D.export_video(record.video).astype(np.float32)
    files = {"video": layout.write_bytes("videos", stem, cfg.seed, tensor_bytes(video), ".luvt").name}
    for name, arr in record.arrays().items():
        if name != "video":
            files[name] = layout.write_bytes("latents", f"{stem}-{name}", cfg.seed,
                                             tensor_bytes(np.asarray(arr, dtype=np.float32)), ".luvt").name
    meta = record.metadata()
    log.info("stage wall times: %s", meta.pop("wall_s"))
    meta["files"] = files
    if cfg.pipeline.dump_png:
        meta["png"] = _dump_png(layout, f"{stem}-s{cfg.seed}", video)
    layout.write_json("videos", f"{stem}-s{cfg.seed}.json", meta)
    print(f"generate: wrote {files['video']}")
    return EXIT_OK


# -- benchmark and evaluation -----------------------------------------------------------------

def cmd_bench_upsampler(cfg: RunConfig, layout: Layout, args) -> int:
    model = load_vluer(cfg, layout)
    pairs = _clip_pairs(layout, _manifest(layout), scales=[cfg.eval.scale])
    if not pairs:
        raise ValidationError("empty", f"no dataset pairs at eval.scale={cfg.eval.scale}")
    rows = V.benchmark_upsamplers(model, pairs, D.ToyCodec())
    layout.write_json("reports", "bench-upsampler.json", rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def _mllm_transport(cfg: RunConfig, args):
    replay = args.mllm_replay or cfg.eval.mllm_replay
    url = args.mllm or cfg.eval.mllm_url
    if replay:
        return E.ReplayTransport(replay)
    if url:
        return E.HttpTransport(url)
    return None


def cmd_eval(cfg: RunConfig, layout: Layout, args) -> int:
    ev = cfg.eval
    manifest = _manifest(layout)
    pairs = _clip_pairs(layout, manifest, scales=[ev.scale])
    if not pairs:
        raise ValidationError("empty", f"no dataset pairs at eval.scale={ev.scale}")
    codec = D.ToyCodec()
    model = load_vluer(cfg, layout) if "vluer" in layout.index() else None
    methods = {"latent-interp": lambda z, t: V.baseline_latent_interp(z, target=t),
               "rgb-interp": lambda z, t: V.baseline_rgb_interp(z, target=t, codec=codec)}
    if model is not None:
        methods["vluer"] = lambda z, t: V.upsample(model, z, t)
    ids = [rec["clip_id"] for rec in manifest["clips"] if any(p["scale"] == ev.scale for p in rec["pairs"])]
    refs = [D.export_video(codec.decode(p.z_hr.astype(np.float64))) for p in pairs]
    reports = []
    for name, fn in methods.items():
        lat = [fn(p.z_lr, p.z_hr.shape[1:3]) for p in pairs]
        vids = [D.export_video(codec.decode(z.astype(np.float64))) for z in lat]
        reports.append(E.evaluate_clips(name, ids, vids, refs, lat, [p.z_hr for p in pairs],
                                        ev.fid_patch, ev.frames_per_video))
    transport = _mllm_transport(cfg, args)
    if transport is not None:
        gen = sorted(layout.dirs["videos"].glob("gen-*.luvt"))
        videos = {p.name.split(".")[0]: load_tensor(p) for p in gen} or {i: r for i, r in zip(ids, refs)}
        scores = E.score_videos(videos, transport, prompts=ev.prompts, max_in_flight=ev.max_in_flight,
                                frames_per_video=ev.frames_per_video)
        mllm_report = E.MetricReport("mllm", sorted(videos), mllm=E.mean_scores(scores))
        reports.append(mllm_report)
    lines = "".join(r.to_json() + "\n" for r in reports)
    (layout.dirs["reports"] / "metrics.jsonl").write_text(lines, encoding="utf-8")
    sys.stdout.write(lines)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------

COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "generate": cmd_generate,
            "bench-upsampler": cmd_bench_upsampler, "eval": cmd_eval}


class _Parser(argparse.ArgumentParser):
    """Usage errors are invalid input, so they exit with the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="luve", description="desk-scale cascaded video generation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("dataset", parents=[common], help="generate, curate and encode synthetic clips")
    train = sub.add_parser("train", parents=[common], help="train one stage")
    train.add_argument("stage", choices=STAGES)
    sub.add_parser("generate", parents=[common], help="run the three-stage cascade")
    sub.add_parser("bench-upsampler", parents=[common], help="compare upsamplers on dataset pairs")
    ev = sub.add_parser("eval", parents=[common], help="metric reports and optional MLLM scoring")
    ev.add_argument("--mllm", metavar="URL", help="MLLM endpoint for HTTP scoring")
    ev.add_argument("--mllm-replay", metavar="DIR", help="directory of canned MLLM responses")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        layout = Layout(cfg.out)
        layout.make()
        write_resolved_config(layout, args.command if args.command != "train" else f"train-{args.stage}", cfg)
        return COMMANDS[args.command](cfg, layout, args)
    except MissingArtifactError as exc:
        print(f"error [missing]: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ValidationError, ContractError) as exc:
        category = getattr(exc, "category", "config" if isinstance(exc, ConfigError) else "contract")
        print(f"error [{category}]: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except LuveError as exc:
        print(f"error [failure]: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
