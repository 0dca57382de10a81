"""Regenerate the checked-in test fixtures.

Everything here is deterministic: seeded RNG for pixels, the mock text
client for judge/annotation goldens. Run from the repository root:

    python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from dualvid.annotate import MockTextGenClient
from dualvid.evalharness import (
    load_predictions,
    load_references,
    score_diverse,
    score_vcgbench,
    score_zeroshot,
)
from dualvid.media import FrameArray, write_raw_tensor

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "tests" / "fixtures"

# Published leaderboard tables, transcribed column by column so the
# averaging law can be checked against the printed "Avg." values.
JUDGED_TABLE = {
    "metrics": ["CI", "DO", "CU", "TU", "CO"],
    "rows": [
        {"system": "video-chatgpt", "scores": [2.40, 2.52, 2.62, 1.98, 2.37], "printed_average": 2.38},
        {"system": "bt-adapter", "scores": [2.68, 2.69, 3.27, 2.34, 2.46], "printed_average": 2.69},
        {"system": "vtimellm", "scores": [2.78, 3.10, 3.40, 2.49, 2.47], "printed_average": 2.85},
        {"system": "chat-univi", "scores": [2.89, 2.91, 3.46, 2.89, 2.81], "printed_average": 2.99},
        {"system": "llama-vid", "scores": [2.96, 3.00, 3.53, 2.46, 2.51], "printed_average": 2.89},
        {"system": "video-llava", "scores": [2.84, 2.86, 3.44, 2.46, 2.57], "printed_average": 2.81},
        {"system": "videochat2", "scores": [3.02, 2.88, 3.51, 2.66, 2.81], "printed_average": 2.98},
        {"system": "ig-vlm", "scores": [3.11, 2.78, 3.51, 2.44, 3.29], "printed_average": 3.03},
        {"system": "leaderboard-top", "scores": [3.27, 3.18, 3.74, 2.83, 3.39], "printed_average": 3.28},
    ],
    # Rows whose printed average does not equal the mean of their own
    # columns (transcription checked twice); tests pin the true means.
    "divergent_rows": ["video-llava"],
}

CHOICE_TABLE = {
    "tasks": ["AS", "AP", "AA", "FA", "UA", "OE", "OI", "OS", "MD", "AL",
              "ST", "AC", "MC", "MA", "SC", "FP", "CO", "EN", "ER", "CI"],
    "rows": [
        {"system": "random-baseline",
         "scores": [25.0, 25.0, 33.3, 25.0, 25.0, 33.3, 25.0, 33.3, 25.0, 25.0,
                    25.0, 33.3, 25.0, 33.3, 33.3, 25.0, 33.3, 25.0, 20.0, 30.9],
         "printed_average": 27.3},
        {"system": "gpt-4v",
         "scores": [55.5, 63.5, 72.0, 46.5, 73.5, 18.5, 59.0, 29.5, 12.0, 40.5,
                    83.5, 39.0, 12.0, 22.5, 45.0, 47.5, 52.0, 31.0, 59.0, 11.0],
         "printed_average": 43.5},
        {"system": "otter-v",
         "scores": [23.0, 23.0, 27.5, 27.0, 29.5, 53.0, 28.0, 33.0, 24.5, 23.5,
                    27.5, 26.0, 28.5, 18.0, 38.5, 22.0, 22.0, 23.5, 19.0, 19.5],
         "printed_average": 26.8},
        {"system": "mplug-owl-v",
         "scores": [22.0, 28.0, 34.0, 29.0, 29.0, 40.5, 27.0, 31.5, 27.0, 23.0,
                    29.0, 31.5, 27.0, 40.0, 44.0, 24.0, 31.0, 26.0, 20.5, 29.5],
         "printed_average": 29.7},
        {"system": "video-chatgpt",
         "scores": [23.5, 26.0, 62.0, 22.5, 26.5, 54.0, 28.0, 40.0, 23.0, 20.0,
                    31.0, 30.5, 25.5, 39.5, 48.5, 29.0, 33.0, 29.5, 26.0, 35.5],
         "printed_average": 32.7},
        {"system": "videollama",
         "scores": [27.5, 25.5, 51.0, 29.0, 39.0, 48.0, 40.5, 38.0, 22.5, 22.5,
                    43.0, 34.0, 22.5, 32.5, 45.5, 32.5, 40.0, 30.0, 21.0, 37.0],
         "printed_average": 34.1},
        {"system": "videochat",
         "scores": [33.5, 26.5, 56.0, 33.5, 40.5, 53.0, 40.5, 30.0, 25.5, 27.0,
                    48.5, 35.0, 20.5, 42.5, 46.0, 26.5, 41.0, 23.5, 23.5, 36.0],
         "printed_average": 35.5},
        {"system": "videochat2",
         "scores": [66.0, 47.5, 83.5, 49.5, 60.0, 58.0, 71.5, 42.5, 23.0, 23.0,
                    88.5, 39.0, 42.0, 58.5, 44.0, 49.0, 36.5, 35.0, 40.5, 65.5],
         "printed_average": 51.1},
        {"system": "leaderboard-top",
         "scores": [69.0, 60.0, 83.0, 48.5, 66.5, 85.5, 75.5, 36.0, 44.0, 34.0,
                    89.5, 39.5, 71.0, 90.5, 45.0, 53.0, 50.0, 29.5, 44.0, 60.0],
         "printed_average": 58.7},
    ],
    "divergent_rows": ["random-baseline", "gpt-4v"],
}

VCG_ITEMS = [
    ("q1", "What is the man doing at the start?",
     "He ties his shoelaces before the run.",
     "He ties his shoes and starts jogging."),
    ("q2", "How many dogs appear in the park?",
     "Two dogs appear in the park.",
     "There are two dogs playing."),
    ("q3", "What color is the car?",
     "The car is red.",
     "A blue sedan drives by."),
    ("q4", "What happens at the end?",
     "The group takes a photo together.",
     "They pose for a group photo."),
]
DIVERSE_TAGS = {
    "q1": ("caption", "sports"),
    "q2": ("spatial", "pets"),
    "q3": ("spatial", "automobile"),
    "q4": ("reasoning", "travel"),
}
MVBENCH_ITEMS = [
    ("m1", "AS", "A", "A) the man opens the door first"),
    ("m2", "AS", "B", "C"),
    ("m3", "ST", "D", "The answer is (D)."),
    ("m4", "ST", "A", "a"),
]
ZEROSHOT_ITEMS = [
    ("z1", "MSVD-QA", "What instrument is played?", "a guitar",
     "Someone plays an acoustic guitar."),
    ("z2", "MSVD-QA", "Where does the scene take place?", "a kitchen",
     "On a rooftop terrace."),
    ("z3", "TGIF-QA", "What does the cat knock over?", "a glass",
     "The cat knocks a glass off the table."),
]

ANNOTATE_CAPTIONS = {
    "fixture00": "A kettle heats on a stove until it whistles.",
    "fixture01": "A cyclist rides through a park and stops at a bench.",
    "fixture02": "Children build a sandcastle and the tide washes it away.",
    "fixture03": "A cat chases a laser dot across the floor.",
    "fixture04": "A barista pours milk art into a cup of coffee.",
}
ANNOTATE_BOUNDS = {
    "fixture00": [6],
    "fixture01": [4, 8],
    "fixture02": [3, 6, 9],
    "fixture03": [5],
    "fixture04": [4, 9],
}

OVERFIT_SAMPLES = [
    ("clip0", "What happens in clip zero?", "a copper kettle boils"),
    ("clip1", "What happens in clip one?", "the drone lands softly"),
    ("clip2", "What happens in clip two?", "two kids trade cards"),
    ("clip3", "What happens in clip three?", "a violin bow snaps"),
    ("clip4", "What happens in clip four?", "the tide erases footprints"),
    ("clip5", "What happens in clip five?", "a cat topples the vase"),
    ("clip6", "What happens in clip six?", "green paint drips down"),
    ("clip7", "What happens in clip seven?", "the last domino falls"),
]


def dump_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def dump_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in rows),
                    encoding="utf-8")


def step_video(video_id: str, bounds: list[int], num_frames: int = 12,
               size: int = 16) -> FrameArray:
    """Alternating-level scene blocks with a faint per-frame texture so
    scene cuts are unambiguous and every frame digest is unique."""
    seed = int(hashlib.sha256(video_id.encode("utf-8")).hexdigest()[:8], 16)
    rng = np.random.default_rng(seed)
    data = np.zeros((num_frames, size, size, 3), dtype=np.float32)
    starts = [0] + list(bounds)
    ends = list(bounds) + [num_frames]
    for scene, (lo, hi) in enumerate(zip(starts, ends)):
        level = 0.15 if scene % 2 == 0 else 0.75
        for t in range(lo, hi):
            texture = rng.uniform(-0.02, 0.02, size=(size, size, 3))
            data[t] = np.clip(level + texture, 0.0, 1.0).astype(np.float32)
    return FrameArray(data)


def write_tables():
    dump_json(FIXTURES / "judged_table.json", JUDGED_TABLE)
    dump_json(FIXTURES / "choice_table.json", CHOICE_TABLE)


def write_eval_fixtures():
    dump_jsonl(FIXTURES / "vcg_predictions.jsonl",
               [{"id": i, "question": q, "prediction": p}
                for i, q, _, p in VCG_ITEMS])
    dump_jsonl(FIXTURES / "vcg_references.jsonl",
               [{"id": i, "question": q, "answer": a}
                for i, q, a, _ in VCG_ITEMS])
    dump_jsonl(FIXTURES / "diverse_references.jsonl",
               [{"id": i, "question": q, "answer": a,
                 "aspect": DIVERSE_TAGS[i][0], "domain": DIVERSE_TAGS[i][1]}
                for i, q, a, _ in VCG_ITEMS])
    dump_jsonl(FIXTURES / "mvbench_predictions.jsonl",
               [{"id": i, "prediction": p} for i, _, _, p in MVBENCH_ITEMS])
    dump_jsonl(FIXTURES / "mvbench_answer_key.jsonl",
               [{"id": i, "task": t, "answer": a}
                for i, t, a, _ in MVBENCH_ITEMS])
    dump_jsonl(FIXTURES / "zeroshot_predictions.jsonl",
               [{"id": i, "question": q, "prediction": p}
                for i, _, q, _, p in ZEROSHOT_ITEMS])
    dump_jsonl(FIXTURES / "zeroshot_references.jsonl",
               [{"id": i, "dataset": d, "question": q, "answer": a}
                for i, d, q, a, _ in ZEROSHOT_ITEMS])


def write_goldens():
    judge = MockTextGenClient(seed=0)
    vcg = score_vcgbench(
        load_predictions(FIXTURES / "vcg_predictions.jsonl"),
        load_references(FIXTURES / "vcg_references.jsonl"),
        judge,
    )
    dump_json(FIXTURES / "vcg_golden_score.json", vcg.as_dict())

    diverse = score_diverse(
        load_predictions(FIXTURES / "vcg_predictions.jsonl"),
        load_references(FIXTURES / "diverse_references.jsonl"),
        judge,
    )
    dump_json(FIXTURES / "diverse_golden_score.json", diverse.as_dict())

    zeroshot = score_zeroshot(
        load_predictions(FIXTURES / "zeroshot_predictions.jsonl"),
        load_references(FIXTURES / "zeroshot_references.jsonl"),
        judge,
    )
    dump_json(FIXTURES / "zeroshot_golden_score.json",
              {name: score.as_dict() for name, score in zeroshot.items()})


def write_annotate_fixture():
    video_dir = FIXTURES / "annotate" / "videos"
    video_dir.mkdir(parents=True, exist_ok=True)
    for video_id, bounds in ANNOTATE_BOUNDS.items():
        write_raw_tensor(video_dir / f"{video_id}.rvt",
                         step_video(video_id, bounds))
    dump_jsonl(FIXTURES / "annotate" / "captions.jsonl",
               [{"video_id": k, "caption": v}
                for k, v in ANNOTATE_CAPTIONS.items()])


def write_overfit_fixture():
    video_dir = FIXTURES / "overfit" / "videos"
    video_dir.mkdir(parents=True, exist_ok=True)
    for index, (video_id, _, _) in enumerate(OVERFIT_SAMPLES):
        rng = np.random.default_rng(500 + index)
        frames = FrameArray(rng.random((8, 16, 16, 3)).astype(np.float32))
        write_raw_tensor(video_dir / f"{video_id}.rvt", frames)
    dump_jsonl(FIXTURES / "overfit" / "train.jsonl",
               [{"video_id": v, "question": q, "answer": a,
                 "category": "generic_qa"}
                for v, q, a in OVERFIT_SAMPLES])


def main():
    write_tables()
    write_eval_fixtures()
    write_goldens()
    write_annotate_fixture()
    write_overfit_fixture()
    print(f"fixtures written under {FIXTURES}")


if __name__ == "__main__":
    main()
