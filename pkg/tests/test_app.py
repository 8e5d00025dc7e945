"""
Tests for the parablock command line
"""

import json
import os

import pytest

import app
from app import EXIT_INVALID, EXIT_OK, main


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return str(path)


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def test_filter_writes_kept_documents_and_report(tmp_path):
    docs = write_jsonl(tmp_path / "docs.jsonl", [
        {"id": "a", "lang": "en", "text": "the cat sat with the dog"},
        {"id": "b", "lang": "en", "text": "Home\nLogin"},
    ])
    out, report = tmp_path / "kept.jsonl", tmp_path / "report.csv"
    assert main(["filter", "--input", docs, "--output", str(out), "--report", str(report)]) == EXIT_OK
    assert [d["id"] for d in read_jsonl(out)] == ["a"]
    assert report.exists() and (tmp_path / "report.json").exists()


def test_filter_code_samples(tmp_path, capsys):
    comment = "# the value of the total and the count of the items with the sum\n"
    text = comment + " ".join(["total = total + value"] * 8)
    samples = write_jsonl(tmp_path / "code.jsonl", [
        {"id": "ok", "text": text, "programming_language": "Python"},
        {"id": "short", "text": "x = 1", "programming_language": "Python"},
    ])
    assert main(["filter", "--code", "--input", samples, "--output", str(tmp_path / "kept.jsonl")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"kept": 1, "score": 1}
    assert [r["id"] for r in read_jsonl(tmp_path / "kept.jsonl")] == ["ok"]


def test_flatten_trees(tmp_path):
    trees = write_jsonl(tmp_path / "trees.jsonl", [{"id": "t", "source": "chat", "nodes": [
        {"id": "1", "role": "user", "parent": None, "text": "hi"},
        {"id": "2", "role": "assistant", "parent": "1", "text": "hello"},
        {"id": "3", "role": "assistant", "parent": "1", "text": "hey"},
    ]}])
    out, summary = tmp_path / "threads.jsonl", tmp_path / "summary.json"
    assert main(["flatten", "--input", trees, "--output", str(out), "--summary", str(summary)]) == EXIT_OK
    threads = read_jsonl(out)
    assert [t["path"] for t in threads] == [["1", "2"], ["1", "3"]]
    assert threads[1]["loss_mask"] == [0, 0, 1, 1, 1]
    assert json.loads(summary.read_text())["chat"]["overhead"] == pytest.approx(2 / 10)


def test_dedup_then_pack(tmp_path, capsys):
    shared = list(range(60))
    docs = write_jsonl(tmp_path / "docs.jsonl", [
        {"id": "a", "source": "web", "tokens": shared},
        {"id": "b", "source": "web", "tokens": [200] * 5 + shared + [201] * 5},
    ])
    deduped = tmp_path / "dedup.jsonl"
    assert main(["dedup", "--input", docs, "--output", str(deduped), "--min-len", "50"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["removed_tokens"] == 60
    assert [len(d["tokens"]) for d in read_jsonl(deduped)] == [60, 10]

    packs = tmp_path / "packs"
    assert main(["pack", "--input", str(deduped), "--output", str(packs), "--context", "64"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["samples"] == 2 and summary["real_tokens"] == 70
    assert os.path.exists(summary["manifest"])


def test_pack_defaults_to_cache_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(app, "CACHE_DIR", str(tmp_path / "cache"))
    docs = write_jsonl(tmp_path / "web.jsonl", [{"id": "a", "lang": "en", "text": "hello there"}])
    assert main(["pack", "--input", docs, "--context", "16"]) == EXIT_OK
    manifest = json.loads(capsys.readouterr().out)["manifest"]
    assert manifest.startswith(str(tmp_path / "cache" / "packs" / "web-ctx16"))


def test_missing_input_is_invalid(tmp_path):
    assert main(["filter", "--input", str(tmp_path / "missing.jsonl")]) == EXIT_INVALID
    assert main(["report", "--run", str(tmp_path)]) == EXIT_INVALID


def test_bad_plan_is_invalid(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text("{")
    assert main(["train", "--plan", str(plan), "--out", str(tmp_path / "run"), "--quiet"]) == EXIT_INVALID


def test_train_halt_resume_and_report(tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--scale", "1e-9", "--out", str(run), "--halt-at-tokens", "1100", "--quiet"]) == EXIT_OK
    halt = run / "checkpoints" / "ckpt-000000001536-halt"
    assert halt.is_dir()
    assert json.loads((run / "plan.json").read_text())["scale"] == 1e-9

    assert main(["resume", "--from", str(halt), "--quiet"]) == EXIT_OK
    records = read_jsonl(run / "run_report.jsonl")
    kinds = [r["type"] for r in records]
    assert kinds.count("run_start") == 1 and kinds.count("resume") == 1
    assert kinds[-1] == "run_end"

    assert main(["report", "--run", str(run), "--no-plot"]) == EXIT_OK
    assert (run / "loss_curve.csv").exists() and (run / "summary.json").exists()


def test_vlm_pretrain_then_finetune(tmp_path):
    pre, fine = tmp_path / "pre", tmp_path / "fine"
    assert main(["vlm-train", "--stage", "pretrain", "--out", str(pre), "--steps", "2", "--quiet"]) == EXIT_OK
    assert (pre / "projector.json").exists()
    assert main(["vlm-train", "--stage", "finetune", "--init", str(pre), "--out", str(fine), "--steps", "1",
                 "--quiet"]) == EXIT_OK
    manifest = json.loads((fine / "projector.json").read_text())
    assert manifest["step"] == 3
