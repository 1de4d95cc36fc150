import json

import pytest

from expcot.au import AuVector
from expcot.cot import ExpressionLabel, validate_cot
from expcot.gateway import Gateway, ScriptedBackend, TranscriptLog
from expcot.pipeline import (
    ACCEPTED,
    FAILED,
    AuBackendError,
    ExpCotPipeline,
    ManifestError,
    PipelinePolicy,
    PrecomputedAuBackend,
    SampleInput,
    StubAuBackend,
    dry_run,
    load_manifest,
    parse_manifest,
    write_outcomes,
)
from expcot.prompts import FEEDBACK_PLAIN_TEXT, render_feedback

from helpers import FEEDBACK_RE, PlannedLLM, cot_text

E = ExpressionLabel


def make_pipeline(plan, policy=PipelinePolicy(), bad_refine=None, log=None):
    backend = ScriptedBackend({}, responder=PlannedLLM(plan, bad_refine))
    gateway = Gateway(backend, log or TranscriptLog())
    return ExpCotPipeline(gateway, StubAuBackend(), policy), gateway


def sample(sid="s1", label=E.HAPPINESS, dataset="RAF-DB"):
    return SampleInput(sid, label, dataset, AuVector.from_mapping({1: 0.23, 14: 0.6}))


def test_policy_invariants():
    with pytest.raises(ValueError):
        PipelinePolicy(label_injection_threshold=4, max_rounds=3)
    with pytest.raises(ValueError):
        PipelinePolicy(0, 3)
    with pytest.raises(ValueError):
        PipelinePolicy(3, 11)
    with pytest.raises(ValueError):
        PipelinePolicy(parallelism=0)


def test_happy_path():
    pipe, gw = make_pipeline({"s1": (E.HAPPINESS, 0)})
    out = pipe.run_sample(sample())
    assert out.status == ACCEPTED
    assert out.rounds_used == 1 and out.label_injected is False
    assert out.verdicts == ["Correct"]
    assert out.final_cot.label is E.HAPPINESS
    assert validate_cot(out.final_cot, "rafdb") == []
    stages = [r["stage"] for r in gw.transcript.records]
    assert stages == ["au2des", "des2exp", "verify", "refine"]


def test_label_injection_after_threshold():
    T = 3
    pipe, gw = make_pipeline({"s1": (E.FEAR, T)}, PipelinePolicy(T, 6))
    out = pipe.run_sample(sample(label=E.FEAR))
    assert out.status == ACCEPTED
    assert out.rounds_used == T + 1 and out.label_injected is True
    assert out.verdicts == ["Incorrect"] * T + ["Correct"]
    last_request = [r for r in gw.transcript.records if r["stage"] == "feedback"][-1]["request_messages"]
    feedback = [m["content"] for m in last_request if m["role"] == "user" and FEEDBACK_RE.match(m["content"])]
    assert feedback == [FEEDBACK_PLAIN_TEXT] * (T - 1) + [render_feedback(True, E.FEAR)]
    assert "The correct expression is Fear." in feedback[-1]


def test_exhaustion_counts_calls():
    M = 4
    pipe, gw = make_pipeline({"s1": (E.ANGER, 99)}, PipelinePolicy(2, M))
    out = pipe.run_sample(sample(label=E.ANGER))
    assert out.status == FAILED and out.rounds_used == M and out.final_cot is None
    assert "no verified description" in out.reason
    # no refinement for failed samples: exactly 3 calls per round
    assert len(gw.transcript.records) == 3 * M


def test_verification_runs_in_a_fresh_conversation():
    pipe, gw = make_pipeline({"s1": (E.SADNESS, 1)})
    pipe.run_sample(sample(label=E.SADNESS))
    for rec in gw.transcript.records:
        if rec["stage"] == "verify":
            assert len(rec["request_messages"]) == 1
            assert "Determine whether the description contains AU" in rec["request_messages"][0]["content"]
        if rec["stage"] == "refine":
            assert len(rec["request_messages"]) == 1
            assert rec["request_messages"][0]["content"].startswith("Enhance the expression description")


def test_generation_memory_grows_monotonically():
    pipe, gw = make_pipeline({"s1": (E.SADNESS, 3)})
    pipe.run_sample(sample(label=E.SADNESS))
    lengths = [len(r["request_messages"]) for r in gw.transcript.records if r["stage"] != "verify"
               and r["stage"] != "refine"]
    assert lengths == sorted(lengths)
    # each later request extends the earlier one
    reqs = [r["request_messages"] for r in gw.transcript.records if r["stage"] in ("au2des", "des2exp", "feedback")]
    for a, b in zip(reqs, reqs[1:]):
        assert b[: len(a)] == a


def test_label_mismatch_is_not_accepted_even_if_verifier_says_correct():
    plan = PlannedLLM({"s1": (E.HAPPINESS, 0)})

    def responder(ctx, messages):
        if ctx.stage == "des2exp" and ctx.round == 1:
            return "Sadness"
        return plan(ctx, messages)

    gw = Gateway(ScriptedBackend({}, responder=responder))
    out = ExpCotPipeline(gw).run_sample(sample())
    assert out.status == ACCEPTED and out.rounds_used == 2
    assert out.verdicts == ["Correct", "Correct"]


def test_unparseable_label_and_verdict_are_failed_rounds():
    plan = PlannedLLM({"s1": (E.HAPPINESS, 0)})

    def responder(ctx, messages):
        if ctx.round == 1 and ctx.stage == "des2exp":
            return "joyful"
        if ctx.round == 2 and ctx.stage == "verify":
            return "correct-ish? not sure, maybe incorrect"
        return plan(ctx, messages)

    out = ExpCotPipeline(Gateway(ScriptedBackend({}, responder=responder))).run_sample(sample())
    assert out.status == ACCEPTED and out.rounds_used == 3
    assert out.verdicts == ["Correct", "Unparseable", "Correct"]


def test_refinement_retry_then_fail():
    pipe, gw = make_pipeline({"s1": (E.HAPPINESS, 0)}, bad_refine={"s1"})
    out = pipe.run_sample(sample())
    assert out.status == FAILED and out.refine_attempts == 2
    assert "au-index-present" in out.reason
    assert len(gw.transcript.records) == 3 + 2


def test_refinement_second_attempt_succeeds():
    script = {("s1", "refine", 1): "no headers here", ("s1", "refine", 2): cot_text(E.HAPPINESS)}
    gw = Gateway(ScriptedBackend(script, responder=PlannedLLM({"s1": (E.HAPPINESS, 0)})))
    out = ExpCotPipeline(gw).run_sample(sample())
    assert out.status == ACCEPTED and out.refine_attempts == 2


def test_refined_label_must_match_ground_truth():
    script = {("s1", "refine", 1): cot_text(E.SADNESS), ("s1", "refine", 2): cot_text(E.SADNESS)}
    gw = Gateway(ScriptedBackend(script, responder=PlannedLLM({"s1": (E.HAPPINESS, 0)})))
    out = ExpCotPipeline(gw).run_sample(sample())
    assert out.status == FAILED and "refined label" in out.reason


def test_gateway_errors_become_failed_outcomes():
    gw = Gateway(ScriptedBackend({}))
    out = ExpCotPipeline(gw).run_sample(sample())
    assert out.status == FAILED and "ScriptExhaustedError" in out.reason


def test_au_backend_lookup_and_errors(tmp_path):
    path = tmp_path / "au.jsonl"
    path.write_text(json.dumps({"id": "img1", "au": [0.0] * 23 + [0.4]}) + "\n")
    backend = PrecomputedAuBackend(path)
    assert backend.get("s1", "img1")[24] == 0.4
    with pytest.raises(AuBackendError):
        backend.get("s2", "missing")
    gw = Gateway(ScriptedBackend({}, responder=PlannedLLM({"s9": (E.FEAR, 0)})))
    out = ExpCotPipeline(gw, backend).run_sample(SampleInput("s9", E.FEAR, "RAF-DB", au_ref="missing"))
    assert out.status == FAILED and "AuBackendError" in out.reason


def test_stub_backend_is_deterministic():
    a, b = StubAuBackend(), StubAuBackend()
    assert a.get("x") == b.get("x")
    assert a.get("x") != a.get("y")


def test_run_batch_counts():
    plan = {f"s{i}": (E.SURPRISE, 0) for i in range(10)}
    pipe, _ = make_pipeline(plan)
    report = pipe.run_batch([sample(sid, E.SURPRISE) for sid in plan])
    assert report.accepted == 10 and report.failed == 0 and report.mean_rounds == 1.0
    assert [o.sample_id for o in report.outcomes] == list(plan)


def test_run_batch_rejects_duplicates_before_running():
    pipe, gw = make_pipeline({"s1": (E.FEAR, 0)})
    with pytest.raises(ValueError, match="duplicate"):
        pipe.run_batch([sample(), sample()])
    assert gw.transcript.records == []


def test_parallel_outcomes_identical(tmp_path):
    plan = {f"s{i:02d}": (list(E)[i % 7], i % 5) for i in range(24)}
    samples = [sample(sid, lab, "RAF-DB") for sid, (lab, _) in plan.items()]
    files = []
    for par in (1, 4):
        pipe, _ = make_pipeline(plan, PipelinePolicy(3, 6, par))
        path = tmp_path / f"out{par}.jsonl"
        write_outcomes(path, pipe.run_batch(samples).outcomes)
        files.append(path.read_bytes())
    assert files[0] == files[1]


def test_transcript_replay_reproduces_outcomes(tmp_path):
    plan = {f"s{i}": (E.DISGUST, i % 4) for i in range(6)}
    samples = [sample(sid, E.DISGUST) for sid in plan]
    log_path = tmp_path / "t.jsonl"
    pipe, _ = make_pipeline(plan, PipelinePolicy(2, 6, 3), log=TranscriptLog(log_path))
    first = [o.to_dict() for o in pipe.run_batch(samples).outcomes]
    replay = ExpCotPipeline(Gateway(ScriptedBackend.from_transcript(log_path)), policy=PipelinePolicy(2, 6, 1))
    second = [o.to_dict() for o in replay.run_batch(samples).outcomes]
    assert first == second


def manifest_lines(records):
    return [json.dumps(r) for r in records]


def test_manifest_parsing():
    lines = manifest_lines([
        {"sample_id": "a", "dataset": "RAF-DB", "gt_label": "Happiness", "au": [0.0] * 24},
        {"sample_id": "b", "dataset": "RAF-DB", "gt_label": 4, "au_ref": "img_b"},
        {"sample_id": "c", "dataset": "AffectNet", "gt_label": "contempt", "au_ref": "img_c", "image": "c.jpg"},
    ])
    samples, issues = parse_manifest(lines)
    assert issues == []
    assert [s.gt_label for s in samples] == [E.HAPPINESS, E.HAPPINESS, E.CONTEMPT]
    assert samples[2].image_ref == "c.jpg"


@pytest.mark.parametrize("record, field", [
    ({"sample_id": "a", "dataset": "RAF-DB", "gt_label": "Happiness", "au": [0.0] * 23 + [1.3]}, "au[23]"),
    ({"sample_id": "a", "dataset": "RAF-DB", "gt_label": "Contempt", "au": [0.0] * 24}, "gt_label"),
    ({"sample_id": "a", "dataset": "RAF-DB", "gt_label": "joy", "au": [0.0] * 24}, "gt_label"),
    ({"sample_id": "a", "dataset": "RAF-DB", "gt_label": "Fear"}, "au"),
    ({"sample_id": "a", "dataset": "RAF-DB", "gt_label": "Fear", "au": [0.1] * 3}, "au"),
    ({"dataset": "RAF-DB", "gt_label": "Fear", "au_ref": "x"}, "sample_id"),
])
def test_manifest_issues_name_field(record, field):
    _, issues = parse_manifest(manifest_lines([record]))
    assert [i.field for i in issues] == [field]


def test_manifest_duplicate_ids(tmp_path):
    rec = {"sample_id": "a", "dataset": "RAF-DB", "gt_label": "Fear", "au_ref": "x"}
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(manifest_lines([rec, rec])))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)


def test_dry_run_counts():
    samples = [sample(f"r{i}", dataset="RAF-DB") for i in range(3)] + [sample(f"a{i}", dataset="AffectNet")
                                                                     for i in range(2)]
    report = dry_run(samples)
    assert report.dataset_counts == {"AffectNet": 2, "RAF-DB": 3}
    assert report.summary()["samples"] == 5 and report.outcomes == []
