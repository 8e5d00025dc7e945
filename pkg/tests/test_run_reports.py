"""
Tests for run report records and their exports
"""

import json

import numpy as np
import pandas as pd
import pytest

import run_reports
from run_reports import (
    REPORT_FILE, RunReport, doubling_events, export_report, load_records, loss_curve_frame, summarize,
)


def fill(report):
    report.add("run_start", plan="desk", scale=1e-6, seed=0)
    report.add("step", step=1, stage=1, tokens_seen=256, loss=5.5, lr=1e-3, batch_size=2)
    report.add("batch_doubling", tokens_seen=512, batch_size=4)
    report.add("step", step=2, stage=1, tokens_seen=512, loss=np.float64(5.0), lr=2e-3, batch_size=2)
    report.add("spike", stage=1, loss=50.0, median=5.0, reason="loss-jump", tokens_seen=512)
    report.add("rollback", stage=1, to="ckpt-000000000256-periodic", tokens_seen=256, data_cursor=257)
    report.add("step", step=3, stage=1, tokens_seen=1024, loss=4.0, lr=2e-3, batch_size=4)
    report.add("checkpoint", id="ckpt-000000001024-periodic", kind="periodic", tokens_seen=1024, stage=1)
    report.add("stage_end", stage=1, tokens_seen=1024, overshoot=0)
    report.add("throughput", stage=1, gt_per_hour=0.001)
    return report


@pytest.fixture
def run_dir(tmp_path):
    fill(RunReport(str(tmp_path / REPORT_FILE)))
    return tmp_path


def test_records_append_to_file_and_reload(run_dir):
    records = load_records(str(run_dir / REPORT_FILE))
    assert len(records) == 10
    assert records[3]["loss"] == 5.0
    resumed = RunReport(str(run_dir / REPORT_FILE))
    resumed.add("resume", tokens_seen=1024)
    assert len(load_records(str(run_dir / REPORT_FILE))) == 11
    assert len(resumed) == 11


def test_deterministic_records_drop_wall_clock():
    report = fill(RunReport())
    assert [r["type"] for r in report.deterministic_records()].count("throughput") == 0
    assert len(report.deterministic_records()) == len(report) - 1


def test_loss_curve_frame():
    frame = loss_curve_frame(fill(RunReport()).records)
    assert list(frame.columns) == ["tokens_seen", "gt", "stage", "step", "loss", "lr", "batch_size", "doubling",
                                   "spikes"]
    assert frame["step"].tolist() == [1, 2, 3]
    assert frame["doubling"].tolist() == [False, True, False]
    assert frame["spikes"].tolist() == [0, 0, 1]
    assert frame["gt"].iloc[-1] == pytest.approx(1.024)


def test_doubling_events_and_summary():
    records = fill(RunReport()).records
    doublings = doubling_events(records)
    assert doublings.to_dict("records") == [{"tokens_seen": 512, "gt": pytest.approx(0.512), "batch_size": 4}]
    summary = summarize(records)
    assert summary["steps"] == 3
    assert summary["final_loss"] == 4.0
    assert (summary["spikes"], summary["rollbacks"], summary["batch_doublings"]) == (1, 1, 1)
    assert summary["checkpoints"] == ["ckpt-000000001024-periodic"]
    assert summarize([])["final_loss"] is None


def test_bad_record_line(tmp_path):
    path = tmp_path / REPORT_FILE
    path.write_text('{"type": "step"}\nnot json\n')
    with pytest.raises(ValueError, match=":2:"):
        load_records(str(path))


def test_export_writes_tables(run_dir, tmp_path):
    out = tmp_path / "out"
    written = export_report(str(run_dir), str(out), plot=False)
    assert set(written) == {"loss_curve", "doublings", "summary"}
    assert pd.read_csv(written["loss_curve"])["loss"].tolist() == [5.5, 5.0, 4.0]
    assert json.loads(open(written["summary"], encoding="utf-8").read())["spikes"] == 1


@pytest.mark.skipif(not run_reports.PLOTLY_AVAILABLE, reason="plotly not installed")
def test_export_writes_figure(run_dir):
    written = export_report(str(run_dir))
    assert written["figure"].endswith("loss_curve.html")
    records = load_records(str(run_dir / REPORT_FILE))
    fig = run_reports.loss_curve_figure(loss_curve_frame(records), doubling_events(records))
    assert [trace.name for trace in fig.data] == ["training loss", "batch doubling", "spikes (cumulative)"]


def test_export_without_report(tmp_path):
    with pytest.raises(FileNotFoundError):
        export_report(str(tmp_path))
