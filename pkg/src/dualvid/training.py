"""Three-stage training: image-adapter pretrain, video-adapter pretrain,
joint instruction tuning with LoRA.

Stage policy is enforced, not advisory: the optimizer wrapper refuses to
step on any parameter outside the stage's trainable set, and the encoders
can never be enabled. Each stage emits a per-step loss trace (JSONL), a run
manifest (JSON), and a named-tensor checkpoint (npz plus JSON sidecar),
all written atomically.
"""

from __future__ import annotations

import json
import math
import os
import random
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .annotate import QA_CATEGORIES
from .errors import ConfigError, ParseError, PipelineError, SchemaError
from .lm import LoraConfig, LoraLinear, apply_lora
from .media import FrameArray, open_video, sample_frames
from .model import VideoLanguageModel

STAGES = ("pretrain_image", "pretrain_video", "instruct")

STAGE_LEARNING_RATES = {
    "pretrain_image": 1e-3,
    "pretrain_video": 1e-3,
    "instruct": 2e-4,
}

TRAINABLE_GROUPS = {
    "pretrain_image": frozenset({"image_adapter"}),
    "pretrain_video": frozenset({"video_adapter"}),
    "instruct": frozenset({"image_adapter", "video_adapter", "lora"}),
}

SCHEDULES = ("cosine", "constant")


@dataclass
class InstructionSample:
    video_id: str
    question: str
    answer: str
    category: str = "generic_qa"

    def __post_init__(self):
        if not self.video_id:
            raise ValueError("video_id must be non-empty")
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("question and answer must be non-empty")
        if self.category not in QA_CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


def load_instruction_dataset(path: str | Path) -> list[InstructionSample]:
    samples: list[InstructionSample] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {line_no} is not valid JSON") from exc
            try:
                samples.append(InstructionSample(
                    video_id=record["video_id"],
                    question=record["question"],
                    answer=record["answer"],
                    category=record.get("category", "generic_qa"),
                ))
            except (KeyError, ValueError) as exc:
                raise SchemaError(f"{path}: line {line_no}: {exc}") from exc
    return samples


@dataclass
class StageConfig:
    stage: str
    dataset: str | Path
    video_dir: str | Path
    output_dir: str | Path
    lr: float | None = None  # stage default applies when unset
    epochs: int = 1
    seed: int = 0
    max_steps: int | None = None
    warmup_steps: int = 0
    schedule: str = "cosine"
    lora_rank: int = 64
    lora_alpha: float | None = None
    init_from: str | Path | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    @property
    def effective_lr(self) -> float:
        return STAGE_LEARNING_RATES[self.stage] if self.lr is None else self.lr


class GuardedOptimizer:
    """AdamW wrapper that hard-fails on any step touching a frozen parameter."""

    def __init__(self, optimizer: torch.optim.Optimizer, allowed_ids: set[int],
                 stage: str):
        self.optimizer = optimizer
        self.allowed_ids = allowed_ids
        self.stage = stage

    def zero_grad(self):
        self.optimizer.zero_grad()

    def step(self):
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                if id(p) not in self.allowed_ids or not p.requires_grad:
                    raise ConfigError(
                        f"optimizer step would update a parameter outside the "
                        f"trainable set of stage {self.stage!r}"
                    )
        self.optimizer.step()

    @property
    def param_groups(self):
        return self.optimizer.param_groups


def configure_stage(model: VideoLanguageModel, stage: str):
    """Freeze/unfreeze per stage policy; returns the trainable (name, param) list."""
    if stage not in TRAINABLE_GROUPS:
        raise ConfigError(f"unknown stage {stage!r}")
    allowed = TRAINABLE_GROUPS[stage]
    if allowed & {"image_encoder", "video_encoder"}:
        raise ConfigError("vision encoders are never trainable")
    trainable: list[tuple[str, torch.nn.Parameter]] = []
    for group, members in model.parameter_groups().items():
        enable = group in allowed
        for name, param in members:
            if group in ("image_encoder", "video_encoder"):
                param.requires_grad_(False)
            else:
                param.requires_grad_(enable)
            if enable and group not in ("image_encoder", "video_encoder"):
                trainable.append((name, param))
    if not trainable:
        raise ConfigError(f"stage {stage!r} selected no trainable parameters")
    return trainable


def build_optimizer(model: VideoLanguageModel, cfg: StageConfig):
    trainable = configure_stage(model, cfg.stage)
    params = [p for _, p in trainable]
    inner = torch.optim.AdamW(params, lr=cfg.effective_lr)
    return GuardedOptimizer(inner, {id(p) for p in params}, cfg.stage), trainable


def lr_factor(step: int, total_steps: int, warmup_steps: int, schedule: str) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    if schedule == "constant":
        return 1.0
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def trainable_report(model: VideoLanguageModel, stage: str) -> list[dict]:
    """Exhaustive per-group parameter accounting for one stage."""
    if stage not in TRAINABLE_GROUPS:
        raise ConfigError(f"unknown stage {stage!r}")
    allowed = TRAINABLE_GROUPS[stage]
    rows = []
    for group, members in model.parameter_groups().items():
        rows.append({
            "group": group,
            "tensors": len(members),
            "parameters": sum(p.numel() for _, p in members),
            "trainable": group in allowed,
        })
    return rows


def _atomic_write_bytes(path: Path, write_fn):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        write_fn(fh)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_checkpoint(model: torch.nn.Module, path: str | Path, extra: dict | None = None):
    """Named-tensor npz archive plus a JSON sidecar, both written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    _atomic_write_bytes(path, lambda fh: np.savez(fh, **arrays))
    sidecar = {
        "format": "npz-named-tensors",
        "tensors": {name: list(a.shape) for name, a in arrays.items()},
        "saved_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "extra": extra or {},
    }
    _atomic_write_text(path.with_suffix(".json"),
                       json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(model: torch.nn.Module, path: str | Path):
    """Strict load: the archive and the model must name identical tensors."""
    with np.load(Path(path)) as data:
        state = {key: torch.from_numpy(data[key].copy()) for key in data.files}
    current = dict(model.named_parameters())
    missing = sorted(set(current) - set(state))
    unexpected = sorted(set(state) - set(current))
    if missing or unexpected:
        raise ConfigError(
            f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
        )
    with torch.no_grad():
        for name, param in current.items():
            if tuple(param.shape) != tuple(state[name].shape):
                raise ConfigError(
                    f"checkpoint tensor {name} has shape {tuple(state[name].shape)}, "
                    f"model expects {tuple(param.shape)}"
                )
            param.copy_(state[name])


def _git_hash() -> str:
    try:
        result = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                                text=True, timeout=5)
        return result.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


@dataclass
class StageResult:
    stage: str
    checkpoint_path: Path
    trace_path: Path
    manifest_path: Path
    trace: list[dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.trace[0]["loss"]

    @property
    def final_loss(self) -> float:
        return self.trace[-1]["loss"]


def load_sampled_frames(video_dir: str | Path, video_id: str,
                        num_frames: int, num_segments: int) -> FrameArray:
    """Open one stored clip and apply segment-wise sampling."""
    video_dir = Path(video_dir)
    candidates = [video_dir / f"{video_id}.rvt", video_dir / video_id]
    target = next((c for c in candidates if c.exists()), None)
    if target is None:
        raise FileNotFoundError(f"no stored video for id {video_id!r} in {video_dir}")
    source = open_video(target)
    meta = source.meta(video_id)
    indices = sample_frames(meta, num_frames, num_segments)
    return source.load(indices)


def run_stage(model: VideoLanguageModel, cfg: StageConfig) -> StageResult:
    """Train one stage and write its artifacts under output_dir/<stage>/."""
    samples = load_instruction_dataset(cfg.dataset)
    if not samples:
        raise ConfigError(f"dataset {cfg.dataset} holds no samples")

    if cfg.stage == "instruct":
        if cfg.init_from is None:
            raise ConfigError(
                "the instruct stage needs a pretraining checkpoint (init_from)")
        load_checkpoint(model, cfg.init_from)
        already_adapted = any(isinstance(m, LoraLinear) for m in model.lm.modules())
        if not already_adapted:
            apply_lora(model.lm, LoraConfig(rank=cfg.lora_rank, alpha=cfg.lora_alpha))

    optimizer, trainable = build_optimizer(model, cfg)
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * len(samples)
    if total_steps < 1:
        raise ConfigError("stage would run zero steps")
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer.optimizer,
        lambda step: lr_factor(step, total_steps, cfg.warmup_steps, cfg.schedule),
    )

    frame_cache: dict[str, FrameArray] = {}
    for sample in samples:
        if sample.video_id not in frame_cache:
            frame_cache[sample.video_id] = load_sampled_frames(
                cfg.video_dir, sample.video_id,
                model.frames_expected, model.pipeline.num_segments)

    rng = random.Random(cfg.seed)
    trace: list[dict] = []
    step = 0
    while step < total_steps:
        order = list(range(len(samples)))
        rng.shuffle(order)
        for idx in order:
            if step >= total_steps:
                break
            sample = samples[idx]
            loss = model.example_loss(frame_cache[sample.video_id],
                                      sample.question, sample.answer)
            if not torch.isfinite(loss):
                raise PipelineError(f"non-finite loss at step {step}")
            current_lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            trace.append({"step": step, "loss": float(loss.item()), "lr": current_lr})
            step += 1

    stage_dir = Path(cfg.output_dir) / cfg.stage
    stage_dir.mkdir(parents=True, exist_ok=True)

    trace_path = stage_dir / "loss_trace.jsonl"
    _atomic_write_text(trace_path,
                       "".join(json.dumps(row) + "\n" for row in trace))

    checkpoint_path = stage_dir / "checkpoint.npz"
    save_checkpoint(model, checkpoint_path, extra={"stage": cfg.stage})

    manifest = {
        "stage": cfg.stage,
        "lr": cfg.effective_lr,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "schedule": cfg.schedule,
        "warmup_steps": cfg.warmup_steps,
        "max_steps": cfg.max_steps,
        "steps_run": step,
        "dataset": str(cfg.dataset),
        "video_dir": str(cfg.video_dir),
        "samples": len(samples),
        "lora_rank": cfg.lora_rank if cfg.stage == "instruct" else None,
        "init_from": str(cfg.init_from) if cfg.init_from else None,
        "git_hash": _git_hash(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "trainable": trainable_report(model, cfg.stage),
        "initial_loss": trace[0]["loss"],
        "final_loss": trace[-1]["loss"],
    }
    manifest_path = stage_dir / "manifest.json"
    _atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))

    return StageResult(
        stage=cfg.stage,
        checkpoint_path=checkpoint_path,
        trace_path=trace_path,
        manifest_path=manifest_path,
        trace=trace,
    )
