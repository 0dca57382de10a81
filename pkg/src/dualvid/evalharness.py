"""Benchmark scoring under four protocols.

Two judged free-form protocols share the five-metric rubric (correctness,
detail, context, temporal, consistency), one adds a three-aspect breakdown
with an 18-domain table, multiple-choice accuracy needs no judge at all,
and open-ended QA reports per-dataset accuracy plus a mean 0-5 score.
Judge verdicts are cached by (metric, item) so a warm rescore issues zero
client calls, and aggregation reduces by key so concurrency never changes
the result.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .annotate import AuditLog, TextGenClient, call_with_retry, extract_json_object, render_template
from .errors import CoverageGapError, ParseError, SchemaError

VCG_METRICS = ("CI", "DO", "CU", "TU", "CO")
METRIC_NAMES = {
    "CI": "correctness of information",
    "DO": "detail orientation",
    "CU": "contextual understanding",
    "TU": "temporal understanding",
    "CO": "consistency",
}
ASPECTS = ("caption", "spatial", "reasoning")
DIVERSE_DOMAINS = (
    "lifestyle", "how-to", "science and technology", "news", "travel",
    "entertainment", "film", "sports", "comedy", "activism", "gaming",
    "education", "surveillance", "pets", "cooking", "music", "automobile",
    "traffic",
)
MVBENCH_TASKS = {
    "AS": "Action Sequence",
    "AP": "Action Prediction",
    "AA": "Action Antonym",
    "FA": "Fine-grained Action",
    "UA": "Unexpected Action",
    "OE": "Object Existence",
    "OI": "Object Interaction",
    "OS": "Object Shuffle",
    "MD": "Moving Direction",
    "AL": "Action Localization",
    "ST": "Scene Transition",
    "AC": "Action Count",
    "MC": "Moving Count",
    "MA": "Moving Attribute",
    "SC": "State Change",
    "FP": "Fine-grained Pose",
    "CO": "Character Order",
    "EN": "Egocentric Navigation",
    "ER": "Episodic Reasoning",
    "CI": "Counterfactual Inference",
}
ZEROSHOT_DATASETS = ("MSVD-QA", "MSRVTT-QA", "TGIF-QA", "ActivityNet-QA")

ACCURACY_METRIC = "accuracy_yesno"
SCORE_METRIC = "score_0_5"


def round_half_up(value: float, places: int = 2) -> float:
    """Display rounding for tables; ties go away from zero, not to even."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(str(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def mean(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("mean of an empty collection")
    return sum(values) / len(values)


@dataclass(frozen=True)
class JudgeVerdict:
    metric: str
    value: float
    raw: str

    def __post_init__(self):
        if self.metric in VCG_METRICS or self.metric == SCORE_METRIC:
            if not 0.0 <= self.value <= 5.0:
                raise ValueError(f"{self.metric} verdict {self.value} outside [0, 5]")
        elif self.metric == ACCURACY_METRIC:
            if self.value not in (0.0, 1.0):
                raise ValueError(f"accuracy verdict must be 0 or 1, got {self.value}")
        else:
            raise ValueError(f"unknown judge metric {self.metric!r}")


@dataclass
class BenchmarkScore:
    per_metric: dict[str, float]
    average: float
    breakdown: dict[str, float] | None = None
    per_task: dict[str, float] | None = None
    per_domain: dict[str, float] | None = None
    num_items: int = 0
    missing_ids: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        out = {
            "per_metric": dict(self.per_metric),
            "average": self.average,
            "num_items": self.num_items,
            "missing_ids": list(self.missing_ids),
        }
        for name in ("breakdown", "per_task", "per_domain"):
            value = getattr(self, name)
            if value is not None:
                out[name] = dict(value)
        return out

    def rounded(self, places: int = 2) -> dict:
        out = self.as_dict()
        for key in ("per_metric", "breakdown", "per_task", "per_domain"):
            if key in out:
                out[key] = {k: round_half_up(v, places) for k, v in out[key].items()}
        out["average"] = round_half_up(self.average, places)
        return out


@dataclass(frozen=True)
class EvalItem:
    """One reference QA item joined with its prediction."""

    item_id: str
    question: str
    answer: str
    prediction: str
    aspect: str | None = None
    domain: str | None = None
    task: str | None = None
    dataset: str | None = None


def _read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {line_no} is not valid JSON") from exc
            if not isinstance(row, dict):
                raise SchemaError(f"{path}: line {line_no} is not a JSON object")
            rows.append(row)
    return rows


def load_predictions(path: str | Path) -> dict[str, dict]:
    """Predictions JSONL {id, question, prediction[, dataset]} keyed by id."""
    out: dict[str, dict] = {}
    for row in _read_jsonl(path):
        for key in ("id", "prediction"):
            if key not in row:
                raise SchemaError(f"prediction record missing {key!r}: {row!r}")
        out[str(row["id"])] = row
    return out


def load_references(path: str | Path) -> dict[str, dict]:
    """References JSONL {id, question, answer, tags...} keyed by id."""
    out: dict[str, dict] = {}
    for row in _read_jsonl(path):
        for key in ("id", "answer"):
            if key not in row:
                raise SchemaError(f"reference record missing {key!r}: {row!r}")
        out[str(row["id"])] = row
    return out


def join_items(
    predictions: dict[str, dict],
    references: dict[str, dict],
    allow_missing: bool = False,
) -> tuple[list[EvalItem], list[str]]:
    """References joined to predictions by id, in sorted id order.

    Ids with no prediction are a coverage gap: an error by default,
    excluded (and reported) only when explicitly allowed.
    """
    missing = sorted(set(references) - set(predictions))
    if missing and not allow_missing:
        shown = ", ".join(missing[:5])
        raise CoverageGapError(
            f"{len(missing)} reference item(s) have no prediction: {shown}"
            + ("..." if len(missing) > 5 else "")
        )
    items = []
    for item_id in sorted(references):
        if item_id in missing:
            continue
        ref = references[item_id]
        pred = predictions[item_id]
        items.append(EvalItem(
            item_id=item_id,
            question=str(ref.get("question", pred.get("question", ""))),
            answer=str(ref["answer"]),
            prediction=str(pred["prediction"]),
            aspect=ref.get("aspect"),
            domain=ref.get("domain"),
            task=ref.get("task"),
            dataset=ref.get("dataset", pred.get("dataset")),
        ))
    return items, missing


class JudgeCache:
    """Verdicts keyed by (metric, item id); optionally persisted as JSONL.

    A warm cache answers repeat queries without touching the client, which
    makes rescoring idempotent and free.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._store: dict[tuple[str, str], JudgeVerdict] = {}
        if self.path is not None and self.path.exists():
            for row in _read_jsonl(self.path):
                verdict = JudgeVerdict(row["metric"], float(row["value"]), row["raw"])
                self._store[(row["metric"], str(row["id"]))] = verdict

    def __len__(self) -> int:
        return len(self._store)

    def get(self, metric: str, item_id: str) -> JudgeVerdict | None:
        return self._store.get((metric, item_id))

    def put(self, item_id: str, verdict: JudgeVerdict):
        self._store[(verdict.metric, item_id)] = verdict
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({
                    "id": item_id,
                    "metric": verdict.metric,
                    "value": verdict.value,
                    "raw": verdict.raw,
                }) + "\n")


def _parse_score_verdict(metric: str, raw: str) -> JudgeVerdict:
    payload = extract_json_object(raw)
    if "score" not in payload:
        raise ParseError(f"judge reply has no 'score' field: {raw!r}")
    return JudgeVerdict(metric, float(payload["score"]), raw)


def _parse_zeroshot_verdicts(raw: str) -> tuple[JudgeVerdict, JudgeVerdict]:
    payload = extract_json_object(raw)
    if "pred" not in payload or "score" not in payload:
        raise ParseError(f"judge reply needs 'pred' and 'score': {raw!r}")
    pred = str(payload["pred"]).strip().lower()
    if pred not in ("yes", "no"):
        raise ParseError(f"judge 'pred' must be yes or no: {raw!r}")
    correct = JudgeVerdict(ACCURACY_METRIC, 1.0 if pred == "yes" else 0.0, raw)
    score = JudgeVerdict(SCORE_METRIC, float(payload["score"]), raw)
    return correct, score


def _quarantine(path: str | Path | None, item_id: str, metric: str, raw: str):
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"id": item_id, "metric": metric, "raw": raw}) + "\n")


def _run_jobs(jobs, client, max_workers, audit):
    """Execute (key, prompt) jobs, possibly concurrently; results keyed, so
    completion order cannot affect aggregation."""
    def run(job):
        key, prompt = job
        return key, call_with_retry(client, prompt, audit=audit)

    if max_workers <= 1 or len(jobs) <= 1:
        return dict(run(job) for job in jobs)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return dict(pool.map(run, jobs))


def _judge_five_metrics(
    items: list[EvalItem],
    judge: TextGenClient,
    cache: JudgeCache,
    max_workers: int,
    audit: AuditLog | None,
    quarantine_path: str | Path | None,
) -> dict[str, dict[str, float]]:
    """Verdict value per (metric, item), via cache where warm."""
    jobs = []
    for item in items:
        for metric in VCG_METRICS:
            if cache.get(metric, item.item_id) is None:
                prompt = render_template(
                    f"judge_vcg_{metric.lower()}",
                    question=item.question,
                    reference=item.answer,
                    prediction=item.prediction,
                )
                jobs.append(((metric, item.item_id), prompt))
    replies = _run_jobs(jobs, judge, max_workers, audit)
    for (metric, item_id), raw in sorted(replies.items()):
        try:
            verdict = _parse_score_verdict(metric, raw)
        except ParseError:
            _quarantine(quarantine_path, item_id, metric, raw)
            raise
        cache.put(item_id, verdict)
    values: dict[str, dict[str, float]] = {m: {} for m in VCG_METRICS}
    for item in items:
        for metric in VCG_METRICS:
            values[metric][item.item_id] = cache.get(metric, item.item_id).value
    return values


def score_vcgbench(
    predictions: dict[str, dict],
    references: dict[str, dict],
    judge: TextGenClient,
    cache: JudgeCache | None = None,
    allow_missing: bool = False,
    max_workers: int = 1,
    audit: AuditLog | None = None,
    quarantine_path: str | Path | None = None,
) -> BenchmarkScore:
    """Five-metric judged protocol; average is the mean of the five means."""
    items, missing = join_items(predictions, references, allow_missing)
    if not items:
        raise CoverageGapError("no scoreable items")
    cache = cache if cache is not None else JudgeCache()
    values = _judge_five_metrics(items, judge, cache, max_workers, audit,
                                 quarantine_path)
    per_metric = {m: mean(values[m].values()) for m in VCG_METRICS}
    return BenchmarkScore(
        per_metric=per_metric,
        average=mean(per_metric.values()),
        num_items=len(items),
        missing_ids=missing,
    )


def score_diverse(
    predictions: dict[str, dict],
    references: dict[str, dict],
    judge: TextGenClient,
    cache: JudgeCache | None = None,
    allow_missing: bool = False,
    max_workers: int = 1,
    audit: AuditLog | None = None,
    quarantine_path: str | Path | None = None,
) -> BenchmarkScore:
    """Five-metric protocol plus an aspect breakdown and a domain table.

    Every reference must carry an aspect tag and a domain; the breakdown is
    the per-aspect mean of each item's five-metric average, reusing the same
    verdicts (no extra judge calls). Aspects with no items are absent from
    the breakdown, not zero.
    """
    items, missing = join_items(predictions, references, allow_missing)
    if not items:
        raise CoverageGapError("no scoreable items")
    for item in items:
        if item.aspect not in ASPECTS:
            raise SchemaError(
                f"item {item.item_id}: unknown aspect {item.aspect!r}; "
                f"expected one of {ASPECTS}"
            )
        if item.domain not in DIVERSE_DOMAINS:
            raise SchemaError(
                f"item {item.item_id}: unknown domain {item.domain!r}"
            )
    cache = cache if cache is not None else JudgeCache()
    values = _judge_five_metrics(items, judge, cache, max_workers, audit,
                                 quarantine_path)
    per_metric = {m: mean(values[m].values()) for m in VCG_METRICS}
    item_avg = {
        item.item_id: mean(values[m][item.item_id] for m in VCG_METRICS)
        for item in items
    }
    breakdown = {}
    for aspect in ASPECTS:
        members = [item_avg[i.item_id] for i in items if i.aspect == aspect]
        if members:
            breakdown[aspect] = mean(members)
    per_domain = {}
    for domain in DIVERSE_DOMAINS:
        members = [item_avg[i.item_id] for i in items if i.domain == domain]
        if members:
            per_domain[domain] = mean(members)
    return BenchmarkScore(
        per_metric=per_metric,
        average=mean(per_metric.values()),
        breakdown=breakdown,
        per_domain=per_domain,
        num_items=len(items),
        missing_ids=missing,
    )


def extract_choice_letter(text: str) -> str | None:
    """First standalone option letter in a multiple-choice reply."""
    for token in text.replace("(", " ").replace(")", " ").replace(".", " ").split():
        stripped = token.strip()
        if len(stripped) == 1 and stripped.upper() in "ABCDEFGH":
            return stripped.upper()
    return None


def score_mvbench(
    predictions: dict[str, dict],
    answer_key: dict[str, dict],
    allow_missing: bool = False,
) -> BenchmarkScore:
    """Multiple-choice accuracy, averaged over tasks with equal weight.

    No judge: a prediction is correct iff its option letter matches the key.
    The overall average is the unweighted mean of per-task accuracies, so
    per-task question counts cannot tilt it.
    """
    items, missing = join_items(predictions, answer_key, allow_missing)
    if not items:
        raise CoverageGapError("no scoreable items")
    per_task_hits: dict[str, list[float]] = {}
    for item in items:
        if item.task not in MVBENCH_TASKS:
            raise SchemaError(
                f"item {item.item_id}: unknown task code {item.task!r}"
            )
        answer = item.answer.strip().upper()
        if len(answer) != 1:
            answer = extract_choice_letter(item.answer) or ""
        predicted = extract_choice_letter(item.prediction)
        per_task_hits.setdefault(item.task, []).append(
            1.0 if predicted == answer and answer else 0.0
        )
    per_task = {task: 100.0 * mean(hits) for task, hits in per_task_hits.items()}
    average = mean(per_task.values())
    return BenchmarkScore(
        per_metric={"accuracy": average},
        average=average,
        per_task=per_task,
        num_items=len(items),
        missing_ids=missing,
    )


def mvbench_average(per_task: dict[str, float]) -> float:
    """Unweighted mean over task accuracies (Avg. column semantics)."""
    for task in per_task:
        if task not in MVBENCH_TASKS:
            raise SchemaError(f"unknown task code {task!r}")
    return mean(per_task.values())


def recompute_average(per_metric: dict[str, float]) -> float:
    """Mean of the five metric means (Avg. column of the judged tables)."""
    missing = [m for m in VCG_METRICS if m not in per_metric]
    if missing:
        raise SchemaError(f"per-metric map missing {missing}")
    return mean(per_metric[m] for m in VCG_METRICS)


@dataclass
class ZeroshotScore:
    dataset: str
    accuracy: float
    score: float
    num_items: int

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "accuracy": self.accuracy,
            "score": self.score,
            "num_items": self.num_items,
        }


def score_zeroshot(
    predictions: dict[str, dict],
    references: dict[str, dict],
    judge: TextGenClient,
    cache: JudgeCache | None = None,
    allow_missing: bool = False,
    max_workers: int = 1,
    audit: AuditLog | None = None,
    quarantine_path: str | Path | None = None,
) -> dict[str, ZeroshotScore]:
    """Open-ended QA: accuracy (%) and mean 0-5 score per dataset.

    One judge call per item yields both the yes/no correctness and the
    score. Datasets with no items are simply absent from the result.
    """
    items, missing = join_items(predictions, references, allow_missing)
    if not items:
        raise CoverageGapError("no scoreable items")
    for item in items:
        if item.dataset not in ZEROSHOT_DATASETS:
            raise SchemaError(
                f"item {item.item_id}: unknown dataset {item.dataset!r}; "
                f"expected one of {ZEROSHOT_DATASETS}"
            )
    cache = cache if cache is not None else JudgeCache()
    jobs = []
    for item in items:
        if cache.get(ACCURACY_METRIC, item.item_id) is None:
            prompt = render_template(
                "judge_zeroshot",
                question=item.question,
                reference=item.answer,
                prediction=item.prediction,
            )
            jobs.append((item.item_id, prompt))
    replies = _run_jobs(jobs, judge, max_workers, audit)
    for item_id, raw in sorted(replies.items()):
        try:
            correct, score = _parse_zeroshot_verdicts(raw)
        except ParseError:
            _quarantine(quarantine_path, item_id, "zeroshot", raw)
            raise
        cache.put(item_id, correct)
        cache.put(item_id, score)
    results: dict[str, ZeroshotScore] = {}
    for dataset in ZEROSHOT_DATASETS:
        members = [i for i in items if i.dataset == dataset]
        if not members:
            continue
        hits = [cache.get(ACCURACY_METRIC, i.item_id).value for i in members]
        scores = [cache.get(SCORE_METRIC, i.item_id).value for i in members]
        results[dataset] = ZeroshotScore(
            dataset=dataset,
            accuracy=100.0 * mean(hits),
            score=mean(scores),
            num_items=len(members),
        )
    return results
