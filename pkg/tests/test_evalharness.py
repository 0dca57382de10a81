"""Scoring protocols: averaging laws, judge caching, coverage, schemas."""

import json
from pathlib import Path

import pytest

from dualvid.annotate import MockTextGenClient
from dualvid.errors import CoverageGapError, ParseError, SchemaError
from dualvid.evalharness import (
    ASPECTS,
    DIVERSE_DOMAINS,
    MVBENCH_TASKS,
    VCG_METRICS,
    ZEROSHOT_DATASETS,
    BenchmarkScore,
    JudgeCache,
    JudgeVerdict,
    ZeroshotScore,
    extract_choice_letter,
    join_items,
    load_predictions,
    load_references,
    mvbench_average,
    recompute_average,
    round_half_up,
    score_diverse,
    score_mvbench,
    score_vcgbench,
    score_zeroshot,
)

FIXTURES = Path(__file__).parent / "fixtures"


class CountingClient:
    """Wraps a client and counts completions, for cache-idempotence checks."""

    name = "counting"

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        return self.inner.complete(prompt)


class FixedClient:
    name = "fixed"

    def __init__(self, reply: str):
        self.reply = reply

    def complete(self, prompt: str) -> str:
        return self.reply


def vcg_fixture():
    return (load_predictions(FIXTURES / "vcg_predictions.jsonl"),
            load_references(FIXTURES / "vcg_references.jsonl"))


class TestRounding:
    def test_half_up_beats_bankers(self):
        assert round_half_up(2.375, 2) == 2.38
        assert round_half_up(2.365, 2) == 2.37
        assert round_half_up(27.95, 1) == 28.0

    def test_plain_cases(self):
        assert round_half_up(2.378, 2) == 2.38
        assert round_half_up(3.282, 2) == 3.28


class TestVerdictInvariants:
    def test_metric_range(self):
        JudgeVerdict("CI", 5.0, "ok")
        with pytest.raises(ValueError):
            JudgeVerdict("CI", 5.5, "too high")
        with pytest.raises(ValueError):
            JudgeVerdict("TU", -1.0, "negative")

    def test_accuracy_binary(self):
        JudgeVerdict("accuracy_yesno", 1.0, "yes")
        with pytest.raises(ValueError):
            JudgeVerdict("accuracy_yesno", 0.5, "half")

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            JudgeVerdict("BLEU", 1.0, "n/a")


class TestAveragingLaw:
    """The printed Avg. columns of the transcribed leaderboard tables."""

    def test_judged_table_rows(self):
        table = json.loads((FIXTURES / "judged_table.json").read_text())
        divergent = set(table["divergent_rows"])
        assert len(table["rows"]) == 9
        for row in table["rows"]:
            per_metric = dict(zip(table["metrics"], row["scores"]))
            recomputed = recompute_average(per_metric)
            oracle = sum(row["scores"]) / 5.0
            assert recomputed == pytest.approx(oracle, abs=1e-12)
            if row["system"] in divergent:
                assert abs(recomputed - row["printed_average"]) > 0.01
            else:
                assert abs(recomputed - row["printed_average"]) <= 0.01

    def test_judged_named_example(self):
        per_metric = dict(zip(VCG_METRICS, [2.40, 2.52, 2.62, 1.98, 2.37]))
        assert round_half_up(recompute_average(per_metric), 2) == 2.38

    def test_choice_table_rows(self):
        table = json.loads((FIXTURES / "choice_table.json").read_text())
        divergent = set(table["divergent_rows"])
        assert table["tasks"] == list(MVBENCH_TASKS)
        assert len(table["rows"]) == 9
        for row in table["rows"]:
            assert len(row["scores"]) == 20
            per_task = dict(zip(table["tasks"], row["scores"]))
            recomputed = mvbench_average(per_task)
            oracle = sum(row["scores"]) / 20.0
            assert recomputed == pytest.approx(oracle, abs=1e-12)
            # displayed at one decimal; the table uses float-nearest rounding
            if row["system"] in divergent:
                assert abs(round(recomputed, 1) - row["printed_average"]) > 0.01
            else:
                assert abs(round(recomputed, 1) - row["printed_average"]) <= 0.01

    def test_divergent_rows_pinned(self):
        """The three rows whose printed averages are not the mean of their
        own columns; the true means are asserted so a transcription fix
        would be noticed."""
        table = json.loads((FIXTURES / "choice_table.json").read_text())
        rows = {r["system"]: r for r in table["rows"]}
        random_mean = sum(rows["random-baseline"]["scores"]) / 20.0
        assert random_mean == pytest.approx(27.95, abs=1e-9)
        assert rows["random-baseline"]["printed_average"] == 27.3
        gpt4v_mean = sum(rows["gpt-4v"]["scores"]) / 20.0
        assert gpt4v_mean == pytest.approx(43.65, abs=1e-9)
        assert rows["gpt-4v"]["printed_average"] == 43.5

        judged = json.loads((FIXTURES / "judged_table.json").read_text())
        llava = next(r for r in judged["rows"] if r["system"] == "video-llava")
        assert sum(llava["scores"]) / 5.0 == pytest.approx(2.834, abs=1e-9)
        assert llava["printed_average"] == 2.81

    def test_recompute_average_needs_all_five(self):
        with pytest.raises(SchemaError):
            recompute_average({"CI": 3.0, "DO": 3.0})

    def test_mvbench_average_rejects_unknown_task(self):
        with pytest.raises(SchemaError):
            mvbench_average({"AS": 50.0, "XX": 10.0})


class TestJoinAndCoverage:
    def test_missing_prediction_is_coverage_gap(self):
        predictions, references = vcg_fixture()
        del predictions["q2"]
        with pytest.raises(CoverageGapError):
            join_items(predictions, references)

    def test_allow_missing_excludes_and_reports(self):
        predictions, references = vcg_fixture()
        del predictions["q2"]
        items, missing = join_items(predictions, references, allow_missing=True)
        assert missing == ["q2"]
        assert [i.item_id for i in items] == ["q1", "q3", "q4"]

    def test_extra_predictions_are_ignored(self):
        predictions, references = vcg_fixture()
        predictions["q9"] = {"id": "q9", "prediction": "spare"}
        items, missing = join_items(predictions, references)
        assert len(items) == 4 and not missing


class TestVcgBench:
    def test_matches_checked_in_golden(self):
        predictions, references = vcg_fixture()
        score = score_vcgbench(predictions, references, MockTextGenClient(seed=0))
        golden = json.loads((FIXTURES / "vcg_golden_score.json").read_text())
        assert score.as_dict() == golden

    def test_average_is_mean_of_five_metric_means(self):
        predictions, references = vcg_fixture()
        score = score_vcgbench(predictions, references, MockTextGenClient(seed=0))
        assert set(score.per_metric) == set(VCG_METRICS)
        assert score.average == pytest.approx(
            sum(score.per_metric.values()) / 5.0)

    def test_all_top_verdicts_average_five(self):
        predictions, references = vcg_fixture()
        score = score_vcgbench(predictions, references,
                               FixedClient('{"score": 5}'))
        assert score.average == 5.0
        assert all(v == 5.0 for v in score.per_metric.values())

    def test_warm_cache_issues_zero_calls(self):
        predictions, references = vcg_fixture()
        client = CountingClient(MockTextGenClient(seed=0))
        cache = JudgeCache()
        first = score_vcgbench(predictions, references, client, cache=cache)
        assert client.calls == 4 * 5
        second = score_vcgbench(predictions, references, client, cache=cache)
        assert client.calls == 4 * 5
        assert first.as_dict() == second.as_dict()

    def test_cache_persists_across_processes(self, tmp_path):
        predictions, references = vcg_fixture()
        cache_path = tmp_path / "verdicts.jsonl"
        first = score_vcgbench(predictions, references,
                               MockTextGenClient(seed=0),
                               cache=JudgeCache(cache_path))
        client = CountingClient(MockTextGenClient(seed=0))
        second = score_vcgbench(predictions, references, client,
                                cache=JudgeCache(cache_path))
        assert client.calls == 0
        assert first.as_dict() == second.as_dict()

    def test_concurrent_equals_serial(self):
        predictions, references = vcg_fixture()
        serial = score_vcgbench(predictions, references, MockTextGenClient(0))
        threaded = score_vcgbench(predictions, references, MockTextGenClient(0),
                                  max_workers=4)
        assert serial.as_dict() == threaded.as_dict()

    def test_unparseable_verdict_quarantined(self, tmp_path):
        predictions, references = vcg_fixture()
        qpath = tmp_path / "quarantine.jsonl"
        with pytest.raises(ParseError):
            score_vcgbench(predictions, references, FixedClient("no json here"),
                           quarantine_path=qpath)
        rows = [json.loads(l) for l in qpath.read_text().splitlines()]
        assert rows and rows[0]["raw"] == "no json here"

    def test_out_of_range_judge_score_rejected(self):
        predictions, references = vcg_fixture()
        with pytest.raises(ValueError):
            score_vcgbench(predictions, references, FixedClient('{"score": 9}'))


class TestDiverse:
    def fixture(self):
        return (load_predictions(FIXTURES / "vcg_predictions.jsonl"),
                load_references(FIXTURES / "diverse_references.jsonl"))

    def test_matches_checked_in_golden(self):
        predictions, references = self.fixture()
        score = score_diverse(predictions, references, MockTextGenClient(seed=0))
        golden = json.loads((FIXTURES / "diverse_golden_score.json").read_text())
        assert score.as_dict() == golden

    def test_breakdown_keys_and_oracle(self):
        predictions, references = self.fixture()
        cache = JudgeCache()
        score = score_diverse(predictions, references, MockTextGenClient(seed=0),
                              cache=cache)
        assert set(score.breakdown) == set(ASPECTS)
        # recompute one aspect by hand from the cached verdicts
        spatial_ids = [i for i, ref in references.items()
                       if ref["aspect"] == "spatial"]
        item_avgs = [sum(cache.get(m, i).value for m in VCG_METRICS) / 5.0
                     for i in spatial_ids]
        assert score.breakdown["spatial"] == pytest.approx(
            sum(item_avgs) / len(item_avgs))

    def test_single_aspect_leaves_others_absent(self):
        predictions = {"x": {"id": "x", "prediction": "a red ball"}}
        references = {"x": {"id": "x", "question": "what rolls?",
                            "answer": "a ball", "aspect": "caption",
                            "domain": "sports"}}
        score = score_diverse(predictions, references, MockTextGenClient(0))
        assert set(score.breakdown) == {"caption"}

    def test_domain_table_subset_of_catalog(self):
        predictions, references = self.fixture()
        score = score_diverse(predictions, references, MockTextGenClient(0))
        assert set(score.per_domain) <= set(DIVERSE_DOMAINS)
        assert len(DIVERSE_DOMAINS) == 18

    def test_unknown_aspect_rejected(self):
        predictions = {"x": {"id": "x", "prediction": "p"}}
        references = {"x": {"id": "x", "answer": "a", "aspect": "temporal",
                            "domain": "sports"}}
        with pytest.raises(SchemaError):
            score_diverse(predictions, references, MockTextGenClient(0))

    def test_unknown_domain_rejected(self):
        predictions = {"x": {"id": "x", "prediction": "p"}}
        references = {"x": {"id": "x", "answer": "a", "aspect": "caption",
                            "domain": "sportsball"}}
        with pytest.raises(SchemaError):
            score_diverse(predictions, references, MockTextGenClient(0))


class TestMVBench:
    def fixture(self):
        return (load_predictions(FIXTURES / "mvbench_predictions.jsonl"),
                load_references(FIXTURES / "mvbench_answer_key.jsonl"))

    def test_two_task_fixture(self):
        predictions, key = self.fixture()
        score = score_mvbench(predictions, key)
        assert score.per_task == {"AS": 50.0, "ST": 100.0}
        assert score.average == 75.0
        assert score.per_metric == {"accuracy": 75.0}

    def test_all_correct_is_100_everywhere(self):
        key = {f"i{k}": {"id": f"i{k}", "task": task, "answer": "B"}
               for k, task in enumerate(MVBENCH_TASKS)}
        predictions = {i: {"id": i, "prediction": "B"} for i in key}
        score = score_mvbench(predictions, key)
        assert score.average == 100.0
        assert all(v == 100.0 for v in score.per_task.values())
        assert len(score.per_task) == 20

    def test_unweighted_task_mean(self):
        # task AS has four questions (1 right), task ST has one (right):
        # question-mean would be 2/5, task-mean is (25 + 100) / 2
        key = {}
        predictions = {}
        for k in range(4):
            key[f"a{k}"] = {"id": f"a{k}", "task": "AS", "answer": "A"}
            predictions[f"a{k}"] = {"id": f"a{k}",
                                    "prediction": "A" if k == 0 else "B"}
        key["s0"] = {"id": "s0", "task": "ST", "answer": "C"}
        predictions["s0"] = {"id": "s0", "prediction": "C"}
        score = score_mvbench(predictions, key)
        assert score.average == pytest.approx((25.0 + 100.0) / 2)

    def test_unknown_task_code_rejected(self):
        key = {"x": {"id": "x", "task": "ZZ", "answer": "A"}}
        predictions = {"x": {"id": "x", "prediction": "A"}}
        with pytest.raises(SchemaError):
            score_mvbench(predictions, key)

    def test_letter_extraction(self):
        assert extract_choice_letter("A) the man opens the door") == "A"
        assert extract_choice_letter("The answer is (D).") == "D"
        assert extract_choice_letter("b") == "B"
        assert extract_choice_letter("I cannot tell") is None

    def test_missing_prediction_gap(self):
        predictions, key = self.fixture()
        del predictions["m3"]
        with pytest.raises(CoverageGapError):
            score_mvbench(predictions, key)
        score = score_mvbench(predictions, key, allow_missing=True)
        assert score.missing_ids == ["m3"]


class TestZeroshot:
    def fixture(self):
        return (load_predictions(FIXTURES / "zeroshot_predictions.jsonl"),
                load_references(FIXTURES / "zeroshot_references.jsonl"))

    def test_matches_checked_in_golden(self):
        predictions, references = self.fixture()
        scores = score_zeroshot(predictions, references, MockTextGenClient(0))
        golden = json.loads((FIXTURES / "zeroshot_golden_score.json").read_text())
        assert {k: v.as_dict() for k, v in scores.items()} == golden

    def test_all_correct_full_marks(self):
        predictions, references = self.fixture()
        scores = score_zeroshot(predictions, references,
                                FixedClient('{"pred": "yes", "score": 5}'))
        for result in scores.values():
            assert result.accuracy == 100.0
            assert result.score == 5.0

    def test_empty_partition_absent(self):
        predictions, references = self.fixture()
        scores = score_zeroshot(predictions, references, MockTextGenClient(0))
        assert set(scores) == {"MSVD-QA", "TGIF-QA"}
        assert "MSRVTT-QA" not in scores

    def test_reported_pair_is_representable(self):
        result = ZeroshotScore("MSVD-QA", accuracy=72.4, score=3.9, num_items=1)
        assert result.as_dict()["accuracy"] == 72.4
        assert result.as_dict()["score"] == 3.9
        assert set(ZEROSHOT_DATASETS) == {
            "MSVD-QA", "MSRVTT-QA", "TGIF-QA", "ActivityNet-QA"}

    def test_unknown_dataset_rejected(self):
        predictions = {"x": {"id": "x", "prediction": "p"}}
        references = {"x": {"id": "x", "answer": "a", "dataset": "YouCook2"}}
        with pytest.raises(SchemaError):
            score_zeroshot(predictions, references, MockTextGenClient(0))

    def test_warm_cache_idempotent(self):
        predictions, references = self.fixture()
        client = CountingClient(MockTextGenClient(0))
        cache = JudgeCache()
        first = score_zeroshot(predictions, references, client, cache=cache)
        assert client.calls == 3
        second = score_zeroshot(predictions, references, client, cache=cache)
        assert client.calls == 3
        assert {k: v.as_dict() for k, v in first.items()} == \
            {k: v.as_dict() for k, v in second.items()}

    def test_malformed_pred_field(self):
        predictions, references = self.fixture()
        with pytest.raises(ParseError):
            score_zeroshot(predictions, references,
                           FixedClient('{"pred": "maybe", "score": 3}'))


class TestBenchmarkScoreShape:
    def test_rounded_view(self):
        score = BenchmarkScore(per_metric={"CI": 2.378, "DO": 2.52, "CU": 2.62,
                                           "TU": 1.98, "CO": 2.37},
                               average=2.3736)
        rounded = score.rounded(2)
        assert rounded["per_metric"]["CI"] == 2.38
        assert rounded["average"] == 2.37

    def test_as_dict_omits_absent_sections(self):
        score = BenchmarkScore(per_metric={"accuracy": 75.0}, average=75.0)
        out = score.as_dict()
        assert "breakdown" not in out and "per_task" not in out
