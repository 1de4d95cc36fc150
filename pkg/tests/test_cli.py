import json
import subprocess
import sys

import pytest
import yaml

from expcot import __version__
from expcot.cli import main
from expcot.cot import ExpressionLabel, parse_cot
from expcot.pipeline import read_outcomes

from helpers import cot_text

E = ExpressionLabel


def au(**dens):
    v = [0.0] * 24
    for k, d in dens.items():
        v[int(k[1:]) - 1] = d
    return v


def write_manifest(path, n, dataset="RAF-DB", label="Happiness", extra=None):
    with open(path, "w") as f:
        for i in range(n):
            rec = {"sample_id": f"s{i:03d}", "gt_label": label, "dataset": dataset, "au": au(a1=0.23, a9=0.5)}
            f.write(json.dumps(rec) + "\n")
        for rec in extra or []:
            f.write(json.dumps(rec) + "\n")


def mock_config(tmp_path, failing=()):
    entries = [
        {"stage": "au2des", "response": "The left eye closes a little while the jaw opens, a relaxed happy look."},
        {"stage": "feedback", "response": "A revised reading: the eye closure is mild, the jaw is open, happiness."},
        {"stage": "des2exp", "response": "Happiness"},
        {"stage": "verify", "response": "Correct"},
        {"stage": "refine", "response": cot_text(E.HAPPINESS)},
    ]
    for sid in failing:
        for rnd in range(1, 7):
            entries.append({"sample_id": sid, "stage": "verify", "round": rnd, "response": "Incorrect"})
    (tmp_path / "script.json").write_text(json.dumps({"entries": entries}))
    cfg = {"gateway": {"backend": "mock", "mock_script": "script.json"}, "profile": "affectnet8"}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def snapshot_files(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*"))


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_validate_reports_sample_and_field(tmp_path, capsys):
    manifest = tmp_path / "m.jsonl"
    bad = {"sample_id": "bad7", "gt_label": "Fear", "dataset": "RAF-DB", "au": au(a3=1.3)}
    write_manifest(manifest, 3, extra=[bad])
    assert main(["validate", "--manifest", str(manifest)]) == 1
    err = capsys.readouterr().err
    assert "bad7" in err and "au[2]" in err and "1.3" in err


def test_validate_clean_manifest(tmp_path, capsys):
    manifest = tmp_path / "m.jsonl"
    write_manifest(manifest, 4)
    assert main(["validate", "--manifest", str(manifest)]) == 0
    assert json.loads(capsys.readouterr().out)["dataset_counts"] == {"RAF-DB": 4}


def test_generate_dry_run_makes_no_calls(tmp_path, capsys):
    manifest, out = tmp_path / "m.jsonl", tmp_path / "out"
    write_manifest(manifest, 5)
    assert main(["generate", "--manifest", str(manifest), "--out", str(out), "--dry-run"]) == 0
    assert json.loads(capsys.readouterr().out) == {"RAF-DB": 5}
    assert (out / "transcripts.jsonl").read_text() == ""
    assert not (out / "outcomes.jsonl").exists()
    assert json.loads((out / "generate.config.json").read_text())["command"] == "generate"


def test_generate_with_failures_then_emit_and_stats(tmp_path, capsys):
    manifest, out = tmp_path / "m.jsonl", tmp_path / "out"
    write_manifest(manifest, 20)
    cfg = mock_config(tmp_path, failing=("s004", "s013"))
    before = set(snapshot_files(tmp_path))
    code = main(["generate", "--config", cfg, "--manifest", str(manifest), "--out", str(out), "--parallelism", "4"])
    assert code == 2
    summary = json.loads(capsys.readouterr().out)
    assert summary["accepted"] == 18 and summary["failed"] == 2
    outcomes = read_outcomes(out / "outcomes.jsonl")
    assert [o.sample_id for o in outcomes] == [f"s{i:03d}" for i in range(20)]
    assert {o.sample_id for o in outcomes if not o.accepted} == {"s004", "s013"}
    transcript = (out / "transcripts.jsonl").read_text().splitlines()
    assert len(transcript) == 18 * (3 + 1) + 2 * 3 * 6
    report = json.loads((out / "report.json").read_text())
    assert report["dataset_counts"] == {"RAF-DB": 20}
    # everything new lives under the output directory
    after = set(snapshot_files(tmp_path))
    assert all(p.startswith("out") for p in after - before)

    train = tmp_path / "out" / "train.jsonl"
    assert main(["emit-dataset", "--outcomes", str(out / "outcomes.jsonl"), "--mix", "0.5", "--out", str(train)]) == 0
    capsys.readouterr()
    assert len(train.read_text().splitlines()) == 18

    stats_out = tmp_path / "out" / "stats.json"
    assert main(["stats", "--in", str(train), "--out", str(stats_out)]) == 0
    stats = json.loads(stats_out.read_text())
    assert stats["total"] == 18 and stats["per_label"] == {"Happiness": 18}

    assert main(["validate", "--outcomes", str(out / "outcomes.jsonl")]) == 0


def test_generate_resume_skips_done_samples(tmp_path, capsys):
    manifest, out = tmp_path / "m.jsonl", tmp_path / "out"
    write_manifest(manifest, 4)
    cfg = mock_config(tmp_path)
    assert main(["generate", "--config", cfg, "--manifest", str(manifest), "--out", str(out)]) == 0
    first = (out / "outcomes.jsonl").read_bytes()
    n_lines = len((out / "transcripts.jsonl").read_text().splitlines())
    assert main(["generate", "--config", cfg, "--manifest", str(manifest), "--out", str(out), "--resume"]) == 0
    assert (out / "outcomes.jsonl").read_bytes() == first
    assert len((out / "transcripts.jsonl").read_text().splitlines()) == n_lines


def test_generate_http_without_endpoint_is_fatal(tmp_path, capsys):
    manifest = tmp_path / "m.jsonl"
    write_manifest(manifest, 1)
    assert main(["generate", "--manifest", str(manifest), "--out", str(tmp_path / "o")]) == 1
    assert "endpoint" in capsys.readouterr().err


def test_score_reflexive_with_mock_judge(tmp_path, capsys):
    cots = tmp_path / "cots.jsonl"
    with open(cots, "w") as f:
        for i, label in enumerate([E.FEAR, E.ANGER, E.NEUTRAL]):
            f.write(json.dumps({"sample_id": f"c{i}", **parse_cot(cot_text(label)).to_dict()}) + "\n")
    out = tmp_path / "score" / "report.json"
    assert main(["score", "--pred", str(cots), "--gt", str(cots), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["means"]["ALL"] == 1.0 and report["label_accuracy"] == 1.0
    assert (out.parent / "score.config.json").exists()
    assert "ALL 1.00" in capsys.readouterr().out


def test_config_errors_are_fatal(tmp_path, capsys):
    manifest = tmp_path / "m.jsonl"
    write_manifest(manifest, 1)
    bad = tmp_path / "bad.yaml"
    bad.write_text("gateway:\n  backend: mock\n  colour: blue\n")
    assert main(["validate", "--config", str(bad), "--manifest", str(manifest)]) == 1
    assert "colour" in capsys.readouterr().err
    bad.write_text("profile: rafdb9\n")
    assert main(["validate", "--config", str(bad), "--manifest", str(manifest)]) == 1
    assert main(["validate", "--config", str(tmp_path / "missing.yaml"), "--manifest", str(manifest)]) == 1


def test_secret_snapshot_is_redacted(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("EXPCOT_TEST_KEY", "sk-very-secret")
    cfg = tmp_path / "c.yaml"
    cfg.write_text("gateway:\n  backend: http\n  endpoint: http://x\n  model: m\n  api_key: ${EXPCOT_TEST_KEY}\n")
    manifest, out = tmp_path / "m.jsonl", tmp_path / "out"
    write_manifest(manifest, 1)
    assert main(["generate", "--config", str(cfg), "--manifest", str(manifest), "--out", str(out), "--dry-run"]) == 0
    text = (out / "generate.config.json").read_text()
    assert "sk-very-secret" not in text and "<redacted>" in text


def test_missing_secret_env_is_fatal(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("EXPCOT_ABSENT_KEY", raising=False)
    cfg = tmp_path / "c.yaml"
    cfg.write_text("gateway:\n  api_key: ${EXPCOT_ABSENT_KEY}\n")
    manifest = tmp_path / "m.jsonl"
    write_manifest(manifest, 1)
    assert main(["validate", "--config", str(cfg), "--manifest", str(manifest)]) == 1
    assert "EXPCOT_ABSENT_KEY" in capsys.readouterr().err


def test_log_json_lines(tmp_path):
    manifest, out = tmp_path / "m.jsonl", tmp_path / "out"
    write_manifest(manifest, 2)
    cfg = mock_config(tmp_path)
    proc = subprocess.run(
        [sys.executable, "-m", "expcot.cli", "generate", "--config", cfg, "--manifest", str(manifest),
         "--out", str(out), "--log-json", "--log-level", "DEBUG", "--resume"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stderr.strip()
    for line in proc.stderr.splitlines():
        rec = json.loads(line)
        assert {"time", "level", "logger", "message"} <= set(rec)
