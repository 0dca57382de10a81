"""Semi-automatic annotation pipeline.

Keyframes from scene detection are captioned one by one, the captions are
integrated with the ground-truth caption into one dense description, and
six categories of QA pairs are derived from it. Every external text model
sits behind a tiny client protocol: a deterministic offline mock is the
default, and an HTTP client is selected by an API-key environment variable.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .errors import ConfigError, ParseError, PipelineError, SchemaError
from .media import FrameArray, detect_scenes, select_keyframes

QA_CATEGORIES = (
    "dense_caption",
    "detailed_temporal",
    "generic_qa",
    "spatial",
    "reasoning",
    "short_temporal",
)
DESCRIPTIVE_CATEGORIES = QA_CATEGORIES[:3]
CONCISE_CATEGORIES = QA_CATEGORIES[3:]
CATEGORY_STYLE = {
    **{c: "descriptive" for c in DESCRIPTIVE_CATEGORIES},
    **{c: "concise" for c in CONCISE_CATEGORIES},
}

API_KEY_ENV = "DUALVID_API_KEY"
API_ENDPOINT_ENV = "DUALVID_API_ENDPOINT"
API_MODEL_ENV = "DUALVID_API_MODEL"

PROMPT_DIR = Path(__file__).parent / "prompts"
TEMPLATE_VERSION = 1


def load_template(name: str, version: int = TEMPLATE_VERSION) -> str:
    path = PROMPT_DIR / f"{name}_v{version}.txt"
    if not path.exists():
        raise ConfigError(f"prompt template not found: {path.name}")
    return path.read_text(encoding="utf-8")


def render_template(name: str, **fields: str) -> str:
    return load_template(name).format(**fields)


class TextGenClient(Protocol):
    name: str

    def complete(self, prompt: str) -> str: ...


class MockTextGenClient:
    """Offline stand-in: output is a pure function of (prompt, seed).

    The reply format follows the output contract stated in the prompt: a
    request for a question/answer JSON object gets one, a judge request for
    pred/score gets one, anything else gets a plain deterministic sentence.
    """

    name = "mock"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _digest(self, prompt: str) -> str:
        return hashlib.sha256(f"{self.seed}|{prompt}".encode("utf-8")).hexdigest()

    def complete(self, prompt: str) -> str:
        h = self._digest(prompt)
        num = int(h[:8], 16)
        if '"pred"' in prompt:
            return json.dumps({
                "pred": "yes" if num % 2 == 0 else "no",
                "score": num % 6,
            })
        if '"question"' in prompt:
            return json.dumps({
                "question": f"What does the element tagged {h[:6]} do in the video?",
                "answer": f"It carries out the activity coded {h[6:12]}.",
            })
        if '"score"' in prompt:
            return json.dumps({"score": num % 6})
        return (
            f"A deterministic scene impression {h[:12]} with activity level "
            f"{num % 10} and layout variant {num % 7}."
        )


class HttpTextGenClient:
    """Minimal JSON-over-HTTP client: POST {model, prompt}, read {text}."""

    name = "http"

    def __init__(self, endpoint: str, model: str, api_key: str, timeout: float = 30.0):
        if not endpoint:
            raise ConfigError("HTTP text client needs a non-empty endpoint")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        import requests

        response = requests.post(
            self.endpoint,
            json={"model": self.model, "prompt": prompt},
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=self.timeout,
        )
        response.raise_for_status()
        payload = response.json()
        if "text" not in payload:
            raise ParseError(f"endpoint reply has no 'text' field: {payload!r}")
        return payload["text"]


def default_client(seed: int = 0) -> TextGenClient:
    """Live HTTP client when the API-key env var is set, mock otherwise."""
    api_key = os.environ.get(API_KEY_ENV)
    if not api_key:
        return MockTextGenClient(seed)
    endpoint = os.environ.get(API_ENDPOINT_ENV)
    if not endpoint:
        raise ConfigError(
            f"{API_KEY_ENV} is set but {API_ENDPOINT_ENV} is empty; both are "
            f"needed for the live client"
        )
    model = os.environ.get(API_MODEL_ENV, "gpt-3.5-turbo")
    return HttpTextGenClient(endpoint, model, api_key)


class AuditLog:
    """Append-only JSONL record of every client request; thread-serialized."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def record(self, **fields):
        entry = {"ts": time.time(), **fields}
        with self._lock:
            self.records.append(entry)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry) + "\n")


def call_with_retry(
    client: TextGenClient,
    prompt: str,
    attempts: int = 3,
    base_delay: float = 0.5,
    audit: AuditLog | None = None,
) -> str:
    """One text completion with exponential backoff; failure is surfaced
    as a pipeline error after the final attempt."""
    prompt_digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]
    last_error: Exception | None = None
    for attempt in range(attempts):
        try:
            text = client.complete(prompt)
        except Exception as exc:  # noqa: BLE001 - every client failure retries
            last_error = exc
            if audit is not None:
                audit.record(client=client.name, prompt_sha=prompt_digest,
                             attempt=attempt, ok=False, error=str(exc))
            if attempt + 1 < attempts:
                time.sleep(base_delay * (2 ** attempt))
            continue
        if audit is not None:
            audit.record(client=client.name, prompt_sha=prompt_digest,
                         attempt=attempt, ok=True, response_chars=len(text))
        return text
    raise PipelineError(
        f"client {client.name!r} failed after {attempts} attempts: {last_error}"
    ) from last_error


@dataclass
class DenseDescription:
    video_id: str
    text: str
    source_keyframes: list[int]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("dense description must be non-empty")
        if len(self.source_keyframes) < 1:
            raise ValueError("dense description must reference at least one keyframe")


@dataclass
class QAPair:
    question: str
    answer: str
    category: str
    style: str

    def __post_init__(self):
        if self.category not in QA_CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        expected = CATEGORY_STYLE[self.category]
        if self.style != expected:
            raise ValueError(
                f"category {self.category} must use style {expected!r}, "
                f"got {self.style!r}"
            )
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("question and answer must be non-empty")


def frame_digest(frames: FrameArray, index: int) -> str:
    return hashlib.sha256(frames.data[index].tobytes()).hexdigest()[:16]


def caption_keyframes(
    video_id: str,
    frames: FrameArray,
    keyframes: list[int],
    client: TextGenClient,
    audit: AuditLog | None = None,
    partial_path: str | Path | None = None,
    attempts: int = 3,
    base_delay: float = 0.5,
) -> list[str]:
    """One description per keyframe, in order. On failure the captions
    collected so far are saved before the error propagates."""
    if len(keyframes) < 1:
        raise ValueError("need at least one keyframe to caption")
    captions: list[str] = []
    for index in keyframes:
        prompt = render_template(
            "frame_caption",
            video_id=video_id,
            frame_index=str(index),
            frame_digest=frame_digest(frames, index),
        )
        try:
            captions.append(call_with_retry(client, prompt, attempts=attempts,
                                            base_delay=base_delay, audit=audit))
        except PipelineError:
            if partial_path is not None:
                with open(partial_path, "w", encoding="utf-8") as fh:
                    for i, text in zip(keyframes, captions):
                        fh.write(json.dumps({"frame": i, "caption": text}) + "\n")
            raise
    return captions


def render_integration_prompt(gt_caption: str, frame_descriptions: list[str],
                              keyframes: list[int]) -> str:
    blocks = "\n".join(
        f"Frame {index}: {text}"
        for index, text in zip(keyframes, frame_descriptions)
    )
    return render_template("integrate", gt_caption=gt_caption, frame_captions=blocks)


def integrate_description(
    video_id: str,
    gt_caption: str,
    frame_descriptions: list[str],
    keyframes: list[int],
    client: TextGenClient,
    audit: AuditLog | None = None,
    attempts: int = 3,
    base_delay: float = 0.5,
) -> DenseDescription:
    if not gt_caption.strip():
        raise ValueError("ground-truth caption must be non-empty")
    prompt = render_integration_prompt(gt_caption, frame_descriptions, keyframes)
    text = call_with_retry(client, prompt, attempts=attempts,
                           base_delay=base_delay, audit=audit)
    return DenseDescription(
        video_id=video_id,
        text=text,
        source_keyframes=list(keyframes),
        provenance={"gt_caption": gt_caption, "frame_captions": list(frame_descriptions)},
    )


def extract_json_object(text: str) -> dict:
    """Strict JSON pulled out of a completion; anything else is a parse error."""
    start = text.find("{")
    end = text.rfind("}")
    if start == -1 or end == -1 or end <= start:
        raise ParseError(f"no JSON object in client output: {text!r}")
    try:
        payload = json.loads(text[start:end + 1])
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON in client output: {text!r}") from exc
    if not isinstance(payload, dict):
        raise ParseError(f"expected a JSON object, got: {text!r}")
    return payload


def generate_qa(
    gt_caption: str,
    dense: DenseDescription,
    client: TextGenClient,
    categories: tuple[str, ...] = QA_CATEGORIES,
    pairs_per_category: int = 1,
    audit: AuditLog | None = None,
    quarantine_path: str | Path | None = None,
    attempts: int = 3,
    base_delay: float = 0.5,
) -> list[QAPair]:
    """QA pairs per requested category; the label comes from the request,
    never from the completion text."""
    for category in categories:
        if category not in QA_CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
    if pairs_per_category < 1:
        raise ValueError("pairs_per_category must be >= 1")
    pairs: list[QAPair] = []
    for category in categories:
        for copy in range(pairs_per_category):
            prompt = render_template(
                f"qa_{category}",
                gt_caption=gt_caption,
                dense_description=dense.text,
            )
            if copy > 0:
                # vary the prompt so the deterministic mock varies its output
                prompt += f"\nVariant: {copy}\n"
            raw = call_with_retry(client, prompt, attempts=attempts,
                                  base_delay=base_delay, audit=audit)
            try:
                payload = extract_json_object(raw)
                question = payload["question"]
                answer = payload["answer"]
            except (ParseError, KeyError, TypeError) as exc:
                if quarantine_path is not None:
                    with open(quarantine_path, "a", encoding="utf-8") as fh:
                        fh.write(json.dumps({
                            "video_id": dense.video_id,
                            "category": category,
                            "raw": raw,
                        }) + "\n")
                raise ParseError(
                    f"unusable QA completion for {category}: {raw!r}"
                ) from exc
            pairs.append(QAPair(
                question=str(question),
                answer=str(answer),
                category=category,
                style=CATEGORY_STYLE[category],
            ))
    return pairs


def annotate_video(
    video_id: str,
    frames: FrameArray,
    gt_caption: str,
    client: TextGenClient,
    scene_threshold: float = 0.3,
    categories: tuple[str, ...] = QA_CATEGORIES,
    pairs_per_category: int = 1,
    audit: AuditLog | None = None,
    attempts: int = 3,
    base_delay: float = 0.5,
) -> list[dict]:
    """Full per-video pipeline; returns instruction records ready for JSONL."""
    scenes = detect_scenes(frames, threshold=scene_threshold)
    keyframes = select_keyframes(scenes)
    captions = caption_keyframes(video_id, frames, keyframes, client,
                                 audit=audit, attempts=attempts,
                                 base_delay=base_delay)
    dense = integrate_description(video_id, gt_caption, captions, keyframes,
                                  client, audit=audit, attempts=attempts,
                                  base_delay=base_delay)
    pairs = generate_qa(gt_caption, dense, client, categories=categories,
                        pairs_per_category=pairs_per_category, audit=audit,
                        attempts=attempts, base_delay=base_delay)
    records = []
    for pair in pairs:
        records.append({
            "video_id": video_id,
            "question": pair.question,
            "answer": pair.answer,
            "category": pair.category,
            "style": pair.style,
            "provenance": {
                "client": client.name,
                "keyframes": keyframes,
                "template_version": TEMPLATE_VERSION,
            },
        })
    return records


REQUIRED_RECORD_KEYS = ("video_id", "question", "answer", "category", "style")


@dataclass
class ValidationReport:
    records: int = 0
    errors: list[str] = field(default_factory=list)
    duplicates: list[str] = field(default_factory=list)
    category_histogram: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def as_dict(self) -> dict:
        return {
            "records": self.records,
            "errors": self.errors,
            "duplicates": self.duplicates,
            "category_histogram": self.category_histogram,
            "ok": self.ok,
        }


def validate_dataset(path: str | Path) -> ValidationReport:
    """Schema check, category histogram, and duplicate detection for one
    instruction JSONL file."""
    report = ValidationReport()
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            report.records += 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                report.errors.append(f"line {line_no}: not valid JSON")
                continue
            missing = [k for k in REQUIRED_RECORD_KEYS
                       if k not in record or record[k] in ("", None)]
            if missing:
                report.errors.append(
                    f"line {line_no}: missing field(s) {', '.join(missing)}")
                continue
            category = record["category"]
            if category not in QA_CATEGORIES:
                report.errors.append(
                    f"line {line_no}: unknown category {category!r}")
                continue
            if record["style"] != CATEGORY_STYLE[category]:
                report.errors.append(
                    f"line {line_no}: style {record['style']!r} does not match "
                    f"category {category}")
                continue
            report.category_histogram[category] = (
                report.category_histogram.get(category, 0) + 1)
            key = (record["video_id"], record["question"])
            if key in seen:
                report.duplicates.append(
                    f"line {line_no}: duplicate (video_id, question) {key}")
            seen.add(key)
    return report
