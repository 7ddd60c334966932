from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from nscr.cli import main


@pytest.fixture
def example(data_dir):
    return [
        "--facts", str(data_dir / "confusion_example.facts"),
        "--rules", str(data_dir / "classroom.rules"),
        "--policies", str(data_dir / "classroom.policies"),
    ]


def run(*argv) -> int:
    return main([str(a) for a in argv])


def tiny_config(tmp_path: Path, seed: int = 3) -> Path:
    cfg = {
        "seed": seed, "n_students": 4, "n_groups": 2, "duration": 599,
        "timeline": [{"activity": "whole_class_discussion", "start": 0, "end": 299},
                     {"activity": "small_group_work", "start": 300, "end": 599}],
        "rates": {"confusion": 2, "participation": 1, "collaboration": 1, "distractor": 1},
        "noise": {"video": {"miss_rate": 0.1, "substitution_rate": 0.1, "confidence_model": "calibrated",
                            "delta": 0.0}},
        "gaze_period": 30,
    }
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg))
    return path


def test_reason_answers_worked_example(tmp_path, example, capsys):
    out = tmp_path / "r"
    assert run("reason", *example, "--tau-s", 0.6, "--tau-delta", 0.1, "--retention", "l1", "--out", out) == 0
    assert "ANSWER confusion_candidate(student_4)" in capsys.readouterr().out
    assert sorted(p.name for p in out.iterdir()) == ["decisions.jsonl", "hypotheses.jsonl", "manifest.json",
                                                     "trace.json"]
    (d,) = [json.loads(line) for line in (out / "decisions.jsonl").read_text().splitlines()]
    assert d["outcome"] == "ANSWER" and d["bindings"] == {"S": "student_4"}


def test_reason_defers_at_high_tau(tmp_path, example, capsys):
    assert run("reason", *example, "--tau-s", 0.99, "--tau-delta", 0.1, "--retention", "l1",
               "--out", tmp_path) == 0
    assert "DEFER  confusion_candidate(student_4) below_support" in capsys.readouterr().out


def test_reason_config_file(tmp_path, data_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"facts": str(data_dir / "confusion_example.facts"),
                               "rules": str(data_dir / "classroom.rules"),
                               "tau_s": 0.6, "tau_delta": 0.1, "retention": "l0"}))
    assert run("reason", "--config", cfg, "--out", tmp_path / "o") == 0
    assert run("reason", "--config", cfg, "--tau-s", 2.0, "--out", tmp_path / "o") == 1


def test_reason_l2_hides_entities(tmp_path, example):
    assert run("reason", *example, "--tau-s", 0.6, "--tau-delta", 0.1, "--retention", "l2", "--seed", 4,
               "--out", tmp_path) == 0
    blob = "".join(p.read_text() for p in tmp_path.iterdir() if p.name != "manifest.json")
    assert "student_4" not in blob and "raw_ref" not in blob
    assert (tmp_path / "hypotheses.jsonl").read_text() == ""


def test_reason_missing_thresholds_is_usage_error(tmp_path, example, capsys):
    assert run("reason", *example, "--out", tmp_path) == 2
    assert "--tau-s" in capsys.readouterr().err


def test_reason_reports_parse_errors_with_location(tmp_path, data_dir, capsys):
    bad = tmp_path / "bad.rules"
    bad.write_text("RULE r\n  CONCLUDE c(S)\n  MATCH a EVENT(S, x, ?)\nEND\n")
    code = run("reason", "--facts", data_dir / "confusion_example.facts", "--rules", bad, "--tau-s", 0.5,
               "--tau-delta", 0.1, "--retention", "l1", "--out", tmp_path / "o")
    assert code == 1
    assert f"{bad}:3:" in capsys.readouterr().err


def test_validate(tmp_path, data_dir, capsys):
    assert run("validate", "--facts", data_dir / "confusion_example.facts") == 0
    assert "5 facts ok" in capsys.readouterr().out
    bad = tmp_path / "bad.facts"
    bad.write_text("OBS(s1, gaze_target, board, 10, 1.2)\n")
    assert run("validate", "--facts", bad) == 1
    assert run("validate", "--facts", tmp_path / "missing.facts") == 2
    assert run("frobnicate") == 2


def test_query_command(tmp_path, data_dir, capsys):
    facts = data_dir / "confusion_example.facts"
    assert run("query", "--facts", facts, "--query", "COUNT_DISTINCT actor FROM EVENT(?, ?, ?)",
               "--out", tmp_path) == 0
    assert capsys.readouterr().out.startswith("COUNT_DISTINCT: 2")
    assert json.loads((tmp_path / "result.json").read_text())["scalar"] == 2
    assert run("query", "--facts", facts, "--query", "DROP actor FROM EVENT(?, ?, ?)") == 1
    assert run("query", "--facts", facts, "--query",
               "SELECT actor FROM EVENT(?, ?, ?) WHERE after(this, anchor)") == 1
    assert run("query", "--facts", facts, "--query", "SELECT actor FROM EVENT(?, ?, ?)", "--anchor", "nope") == 1


def test_simulate_writes_four_files(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--config", tiny_config(tmp_path), "--out", out) == 0
    assert sorted(p.name for p in out.iterdir()) == ["gt.facts", "labels.jsonl", "manifest.json", "obs.facts"]
    assert run("validate", "--facts", out / "obs.facts") == 0


def test_simulate_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"seed": 1}))
    assert run("simulate", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "missing config field" in capsys.readouterr().err
    assert run("simulate", "--config", tmp_path / "nope.json", "--out", tmp_path / "o") == 2


def test_evaluate_gold_against_itself(tmp_path):
    sim = tmp_path / "sim"
    run("simulate", "--config", tiny_config(tmp_path), "--out", sim)
    assert run("evaluate", "--pred", sim, "--gold", sim, "--grid", "0:1:0.25", "--out", tmp_path / "e") == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["labels"]["precision"] == 1.0 and report["labels"]["recall"] == 1.0
    assert len((tmp_path / "e" / "curve.csv").read_text().splitlines()) == 6
    assert run("sweep", "--pred", sim, "--gold", sim, "--out", tmp_path / "s") == 0
    assert len((tmp_path / "s" / "curve.csv").read_text().splitlines()) == 22
    assert run("evaluate", "--pred", sim, "--gold", sim, "--grid", "1:0", "--out", tmp_path / "x") == 2


def test_evaluate_rejects_mismatched_episodes(tmp_path):
    for name in ("a", "b"):
        run("simulate", "--config", tiny_config(tmp_path), "--out", tmp_path / "gold" / name)
    run("simulate", "--config", tiny_config(tmp_path), "--out", tmp_path / "pred" / "a")
    assert run("evaluate", "--pred", tmp_path / "pred", "--gold", tmp_path / "gold", "--out", tmp_path / "e") == 1


def _artifacts(d: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(d.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name == "manifest.json":
            doc = json.loads(data)
            doc.pop("timestamp")
            data = json.dumps(doc, sort_keys=True).replace(str(d), "<root>").encode()
        out[str(p.relative_to(d))] = data
    return out


def pipeline(root: Path, cfg: Path, data_dir: Path) -> None:
    assert run("simulate", "--config", cfg, "--out", root / "sim") == 0
    assert run("reason", "--facts", root / "sim" / "obs.facts", "--rules", data_dir / "classroom.rules",
               "--policies", data_dir / "classroom.policies", "--tau-s", 0.0, "--tau-delta", 0.0,
               "--retention", "l1", "--out", root / "pred") == 0
    for name in ("obs.facts", "gt.facts", "labels.jsonl"):
        (root / "gold").mkdir(exist_ok=True)
        (root / "gold" / name).write_bytes((root / "sim" / name).read_bytes())
    assert run("evaluate", "--pred", root / "pred", "--gold", root / "gold", "--out", root / "eval") == 0


def test_pipeline_is_byte_reproducible(tmp_path, data_dir):
    cfg = tiny_config(tmp_path)
    pipeline(tmp_path / "one", cfg, data_dir)
    pipeline(tmp_path / "two", cfg, data_dir)
    a, b = _artifacts(tmp_path / "one"), _artifacts(tmp_path / "two")
    assert a.keys() == b.keys() and len(a) >= 12
    assert a == b


def test_console_entry_point(data_dir):
    proc = subprocess.run([sys.executable, "-m", "nscr.cli", "validate", "--facts",
                           str(data_dir / "confusion_example.facts")], capture_output=True, text=True)
    assert proc.returncode == 0 and "5 facts ok" in proc.stdout
