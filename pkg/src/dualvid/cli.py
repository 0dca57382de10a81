"""Command-line entrypoint.

Subcommands cover the full pipeline: frame sampling, the token-budget
report, encoding a clip to pooled visual tokens, stage training, the
annotation pipeline, benchmark scoring, and a table renderer for results
files. Values resolve as flags > config file > built-in defaults, and the
merged configuration is written into each run's manifest.

Exit codes: 0 success, 2 configuration or usage error, 3 coverage gap.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .annotate import (
    AuditLog,
    annotate_video,
    default_client,
    validate_dataset,
)
from .encoders import ImageEncoderSpec, VideoEncoderSpec
from .errors import ConfigError, CoverageGapError, ParseError, SchemaError
from .evalharness import (
    JudgeCache,
    load_predictions,
    load_references,
    round_half_up,
    score_diverse,
    score_mvbench,
    score_vcgbench,
    score_zeroshot,
)
from .fusion import token_budget
from .lm import LMConfig
from .media import VideoClipMeta, open_video, sample_frames
from .model import PipelineConfig, VideoLanguageModel
from .training import StageConfig, run_stage

PROG = "dualvid"

MODEL_DEFAULTS = {
    "image_size": 16,
    "image_patch": 8,
    "video_size": 8,
    "video_patch": 4,
    "frames_per_segment": 2,
    "encoder_blocks": 2,
    "encoder_heads": 2,
    "feature_dim": 16,
    "embed_dim": 32,
    "lm_layers": 2,
    "lm_heads": 2,
    "context_window": 512,
    "segments": 2,
    "pool": 2,
    "encoder_mode": "dual",
    "fusion_order": "sequential",
    "model_seed": 0,
}

DEFAULTS = {
    "sample": {"fps": 1.0},
    "budget": {"pool": 2, "img_grid": 24, "vid_grid": 16,
               "context": 4096, "reserved": 512},
    "encode": {**MODEL_DEFAULTS},
    "train": {**MODEL_DEFAULTS, "lr": None, "epochs": 1, "max_steps": None,
              "seed": 0, "warmup_steps": 0, "schedule": "cosine",
              "lora_rank": 64, "lora_alpha": None, "init_from": None},
    "annotate": {"seed": 0, "pairs_per_category": 1, "scene_threshold": 0.3,
                 "audit": False},
    "eval": {"allow_missing": False, "max_workers": 1, "judge_seed": 0,
             "output_dir": None},
    "report": {},
}

REQUIRED = {
    "sample": ("total", "frames", "segments"),
    "budget": ("frames", "segments"),
    "encode": ("video", "output"),
    "train": ("stage", "dataset", "video_dir", "output_dir"),
    "annotate": ("video_dir", "captions", "output_dir"),
    "eval": ("bench", "predictions", "references"),
    "report": ("results",),
}


def _add(sub, *names, **kwargs):
    kwargs.setdefault("default", argparse.SUPPRESS)
    sub.add_argument(*names, **kwargs)


def _add_model_flags(sub):
    _add(sub, "--image-size", type=int, help="image encoder input size")
    _add(sub, "--image-patch", type=int, help="image encoder patch size")
    _add(sub, "--video-size", type=int, help="video encoder input size")
    _add(sub, "--video-patch", type=int, help="video encoder patch size")
    _add(sub, "--frames-per-segment", type=int)
    _add(sub, "--encoder-blocks", type=int)
    _add(sub, "--encoder-heads", type=int)
    _add(sub, "--feature-dim", type=int)
    _add(sub, "--embed-dim", type=int)
    _add(sub, "--lm-layers", type=int)
    _add(sub, "--lm-heads", type=int)
    _add(sub, "--context-window", type=int)
    _add(sub, "--segments", type=int, help="video segments (K)")
    _add(sub, "--pool", type=int, help="pooling kernel (1 = no pooling)")
    _add(sub, "--encoder-mode", choices=("dual", "image", "video"))
    _add(sub, "--fusion-order", choices=("sequential", "interleaved"))
    _add(sub, "--model-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Dual-encoder video-language pipeline: sampling, token "
                    "budgeting, encoding, training, annotation, and scoring.",
    )
    subs = parser.add_subparsers(dest="command", metavar="command")

    p = subs.add_parser("sample", help="emit segment-wise frame indices")
    _add(p, "--config", help="JSON config file; flags override it")
    _add(p, "--total", type=int, help="frames in the source video")
    _add(p, "--frames", type=int, help="frames to sample (T)")
    _add(p, "--segments", type=int, help="segments to sample from (K)")
    _add(p, "--fps", type=float)

    p = subs.add_parser("budget", help="visual-token budget report")
    _add(p, "--config")
    _add(p, "--frames", type=int, help="frames sampled (T)")
    _add(p, "--segments", type=int, help="segments (K)")
    _add(p, "--pool", type=int, help="pooling kernel (1 = no pooling)")
    _add(p, "--img-grid", type=int, help="image feature grid before pooling")
    _add(p, "--vid-grid", type=int, help="video feature grid before pooling")
    _add(p, "--context", type=int, help="LM context window")
    _add(p, "--reserved", type=int, help="tokens reserved for text")

    p = subs.add_parser("encode", help="encode one clip to pooled tokens")
    _add(p, "--config")
    _add(p, "--video", help="stored clip (.rvt file or image directory)")
    _add(p, "--output", help="output .npz path")
    _add_model_flags(p)

    p = subs.add_parser("train", help="run one training stage")
    _add(p, "--config")
    _add(p, "--stage",
         choices=("pretrain-image", "pretrain-video", "instruct"))
    _add(p, "--dataset", help="instruction JSONL")
    _add(p, "--video-dir", help="directory of stored clips")
    _add(p, "--output-dir")
    _add(p, "--lr", type=float)
    _add(p, "--epochs", type=int)
    _add(p, "--max-steps", type=int)
    _add(p, "--seed", type=int)
    _add(p, "--warmup-steps", type=int)
    _add(p, "--schedule", choices=("cosine", "constant"))
    _add(p, "--lora-rank", type=int)
    _add(p, "--lora-alpha", type=float)
    _add(p, "--init-from", help="checkpoint that seeds the instruct stage")
    _add_model_flags(p)

    p = subs.add_parser("annotate", help="semi-automatic QA annotation")
    _add(p, "--config")
    _add(p, "--video-dir")
    _add(p, "--captions", help="JSONL of {video_id, caption}")
    _add(p, "--output-dir")
    _add(p, "--seed", type=int)
    _add(p, "--pairs-per-category", type=int)
    _add(p, "--scene-threshold", type=float)
    _add(p, "--audit", action="store_true", help="write an audit JSONL")

    p = subs.add_parser("eval", help="score predictions under one protocol")
    _add(p, "--config")
    _add(p, "--bench", choices=("vcg", "diverse", "mvbench", "zeroshot"))
    _add(p, "--predictions", help="predictions JSONL")
    _add(p, "--references", help="references / answer-key JSONL")
    _add(p, "--output-dir", help="write results.json and the verdict cache")
    _add(p, "--allow-missing", action="store_true",
         help="score despite missing predictions (reported, not fatal)")
    _add(p, "--max-workers", type=int)
    _add(p, "--judge-seed", type=int)

    p = subs.add_parser("report", help="render results files as tables")
    _add(p, "--config")
    _add(p, "--results", nargs="+", help="results.json files from eval")

    return parser


def merge_config(command: str, args: argparse.Namespace) -> dict:
    """flags > config file > defaults, with unknown config keys rejected."""
    merged = dict(DEFAULTS[command])
    given = {k: v for k, v in vars(args).items() if k not in ("command",)}
    config_path = given.pop("config", None)
    if config_path is not None:
        try:
            payload = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        known = set(DEFAULTS[command]) | set(REQUIRED[command])
        for key, value in payload.items():
            dest = key.replace("-", "_")
            if dest not in known:
                raise ConfigError(
                    f"config key {key!r} is not a {command} option")
            merged[dest] = value
    merged.update(given)
    missing = [name for name in REQUIRED[command] if name not in merged]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ConfigError(f"{command} needs {flags}")
    return merged


def build_model(cfg: dict) -> VideoLanguageModel:
    image_spec = ImageEncoderSpec(
        input_size=cfg["image_size"], patch_size=cfg["image_patch"],
        feature_dim=cfg["feature_dim"], num_blocks=cfg["encoder_blocks"],
        num_heads=cfg["encoder_heads"])
    video_spec = VideoEncoderSpec(
        input_size=cfg["video_size"], patch_size=cfg["video_patch"],
        feature_dim=cfg["feature_dim"], num_blocks=cfg["encoder_blocks"],
        num_heads=cfg["encoder_heads"],
        frames_per_segment=cfg["frames_per_segment"])
    lm_config = LMConfig(embed_dim=cfg["embed_dim"], num_layers=cfg["lm_layers"],
                         num_heads=cfg["lm_heads"],
                         context_window=cfg["context_window"])
    pool = cfg["pool"]
    if pool not in (2, 4):
        raise ConfigError(
            f"the model path pools with kernel 2 or 4, got {pool} "
            f"(pool 1 exists only in the budget arithmetic)")
    pipeline = PipelineConfig(
        num_segments=cfg["segments"], encoder_mode=cfg["encoder_mode"],
        fusion_order=cfg["fusion_order"], pool_kernel=pool)
    return VideoLanguageModel(image_spec, video_spec, lm_config, pipeline,
                              seed=cfg["model_seed"])


def write_manifest(output_dir: Path, command: str, merged: dict):
    output_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command,
               "config": {k: (str(v) if isinstance(v, Path) else v)
                          for k, v in sorted(merged.items())}}
    (output_dir / "cli_manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_sample(cfg: dict) -> int:
    meta = VideoClipMeta(id="cli", total_frames=cfg["total"], fps=cfg["fps"])
    indices = sample_frames(meta, cfg["frames"], cfg["segments"])
    print(json.dumps({"indices": indices, "count": len(indices)}))
    return 0


def _pooled_grid(grid: int, pool: int) -> int:
    if pool < 1:
        raise ConfigError(f"pool kernel must be >= 1, got {pool}")
    return math.ceil(grid / pool)


def cmd_budget(cfg: dict) -> int:
    report = token_budget(
        num_frames=cfg["frames"],
        num_segments=cfg["segments"],
        img_grid_pooled=_pooled_grid(cfg["img_grid"], cfg["pool"]),
        vid_grid_pooled=_pooled_grid(cfg["vid_grid"], cfg["pool"]),
        context_window=cfg["context"],
        reserved_text=cfg["reserved"],
    )
    payload = report.as_dict()
    payload["visual"] = payload["visual_tokens"]
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_encode(cfg: dict) -> int:
    model = build_model(cfg)
    source = open_video(cfg["video"])
    meta = source.meta(Path(str(cfg["video"])).stem)
    indices = sample_frames(meta, model.frames_expected,
                            model.pipeline.num_segments)
    frames = source.load(indices)
    img_tokens, vid_tokens = model.encode_streams(frames)
    arrays = {}
    if img_tokens is not None:
        arrays["image_tokens"] = img_tokens.flatten().detach().numpy()
    if vid_tokens is not None:
        arrays["video_tokens"] = np.stack(
            [seg.flatten().detach().numpy() for seg in vid_tokens])
    out = Path(cfg["output"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        np.savez(fh, **arrays)
    print(json.dumps({
        "output": str(out),
        "sampled_indices": indices,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }))
    return 0


def cmd_train(cfg: dict) -> int:
    model = build_model(cfg)
    stage_cfg = StageConfig(
        stage=cfg["stage"].replace("-", "_"),
        dataset=cfg["dataset"],
        video_dir=cfg["video_dir"],
        output_dir=cfg["output_dir"],
        lr=cfg["lr"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        max_steps=cfg["max_steps"],
        warmup_steps=cfg["warmup_steps"],
        schedule=cfg["schedule"],
        lora_rank=cfg["lora_rank"],
        lora_alpha=cfg["lora_alpha"],
        init_from=cfg["init_from"],
    )
    write_manifest(Path(cfg["output_dir"]), "train", cfg)
    result = run_stage(model, stage_cfg)
    print(json.dumps({
        "stage": result.stage,
        "steps": len(result.trace),
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "checkpoint": str(result.checkpoint_path),
        "manifest": str(result.manifest_path),
    }))
    return 0


def cmd_annotate(cfg: dict) -> int:
    video_dir = Path(cfg["video_dir"])
    output_dir = Path(cfg["output_dir"])
    write_manifest(output_dir, "annotate", cfg)
    client = default_client(seed=cfg["seed"])
    audit = AuditLog(output_dir / "audit.jsonl") if cfg["audit"] else None

    caption_rows = []
    with open(cfg["captions"], encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(
                    f"{cfg['captions']}: line {line_no} is not valid JSON"
                ) from exc
            if "video_id" not in row or "caption" not in row:
                raise SchemaError(
                    f"{cfg['captions']}: line {line_no} needs video_id and caption")
            caption_rows.append(row)

    records = []
    for row in caption_rows:
        video_id = row["video_id"]
        candidates = [video_dir / f"{video_id}.rvt", video_dir / video_id]
        target = next((c for c in candidates if c.exists()), None)
        if target is None:
            raise FileNotFoundError(f"no stored video for id {video_id!r}")
        frames = open_video(target).load()
        records.extend(annotate_video(
            video_id, frames, row["caption"], client,
            scene_threshold=cfg["scene_threshold"],
            pairs_per_category=cfg["pairs_per_category"],
            audit=audit,
        ))

    dataset_path = output_dir / "dataset.jsonl"
    dataset_path.write_text(
        "".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    report = validate_dataset(dataset_path)
    (output_dir / "validation.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    print(json.dumps({
        "videos": len(caption_rows),
        "records": len(records),
        "dataset": str(dataset_path),
        "valid": report.ok,
    }))
    return 0 if report.ok else 2


def cmd_eval(cfg: dict) -> int:
    predictions = load_predictions(cfg["predictions"])
    references = load_references(cfg["references"])
    output_dir = Path(cfg["output_dir"]) if cfg["output_dir"] else None
    cache = None
    quarantine = None
    if output_dir is not None:
        write_manifest(output_dir, "eval", cfg)
        cache = JudgeCache(output_dir / "verdicts.jsonl")
        quarantine = output_dir / "quarantine.jsonl"
    judge = default_client(seed=cfg["judge_seed"])

    bench = cfg["bench"]
    if bench == "mvbench":
        score = score_mvbench(predictions, references,
                              allow_missing=cfg["allow_missing"])
        payload = score.as_dict()
    elif bench == "vcg":
        score = score_vcgbench(predictions, references, judge, cache=cache,
                               allow_missing=cfg["allow_missing"],
                               max_workers=cfg["max_workers"],
                               quarantine_path=quarantine)
        payload = score.as_dict()
    elif bench == "diverse":
        score = score_diverse(predictions, references, judge, cache=cache,
                              allow_missing=cfg["allow_missing"],
                              max_workers=cfg["max_workers"],
                              quarantine_path=quarantine)
        payload = score.as_dict()
    else:
        scores = score_zeroshot(predictions, references, judge, cache=cache,
                                allow_missing=cfg["allow_missing"],
                                max_workers=cfg["max_workers"],
                                quarantine_path=quarantine)
        payload = {name: s.as_dict() for name, s in scores.items()}
    payload = {"bench": bench, **payload}
    if output_dir is not None:
        (output_dir / "results.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _format_rows(rows: list[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def render_report(payload: dict) -> str:
    """One results payload as an aligned two-column table, 2-decimal
    half-up rounding for display."""
    rows: list[tuple[str, str]] = []
    if "per_metric" in payload:
        for metric, value in sorted(payload["per_metric"].items()):
            rows.append((metric, f"{round_half_up(value, 2):.2f}"))
        rows.append(("average", f"{round_half_up(payload['average'], 2):.2f}"))
        for section in ("breakdown", "per_task", "per_domain"):
            if section in payload:
                rows.append((section, ""))
                for key, value in sorted(payload[section].items()):
                    rows.append((f"  {key}", f"{round_half_up(value, 2):.2f}"))
    else:
        for dataset, result in sorted(payload.items()):
            if not isinstance(result, dict):
                continue
            rows.append((dataset,
                         f"accuracy {round_half_up(result['accuracy'], 2):.2f}  "
                         f"score {round_half_up(result['score'], 2):.2f}"))
    if not rows:
        raise SchemaError("results payload has no scores to render")
    return _format_rows(rows)


def cmd_report(cfg: dict) -> int:
    results = cfg["results"]
    if isinstance(results, str):
        results = [results]
    for path in results:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        print(f"== {payload.get('bench', Path(path).stem)} ({path}) ==")
        print(render_report(payload))
        print()
    return 0


HANDLERS = {
    "sample": cmd_sample,
    "budget": cmd_budget,
    "encode": cmd_encode,
    "train": cmd_train,
    "annotate": cmd_annotate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage error (2) or --help (0)
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        merged = merge_config(args.command, args)
        return HANDLERS[args.command](merged)
    except ConfigError as exc:
        print(f"{PROG}: config error: {exc}", file=sys.stderr)
        return 2
    except (SchemaError, ParseError, ValueError) as exc:
        print(f"{PROG}: invalid input: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2
    except CoverageGapError as exc:
        print(f"{PROG}: coverage gap: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
