"""
Run reports
Line-delimited JSON records written during training, and the loss-curve,
batch-doubling and spike exports built from them
"""

import json
import logging
import os
from typing import Dict, List, Optional, Sequence

import pandas as pd

from config import GIGATOKEN

try:
    import plotly.graph_objects as go
    from plotly.subplots import make_subplots
    PLOTLY_AVAILABLE = True
except ImportError:
    PLOTLY_AVAILABLE = False

logger = logging.getLogger(__name__)

REPORT_FILE = "run_report.jsonl"

# Record types whose content depends on wall-clock time
WALL_CLOCK_TYPES = ("throughput",)


class RunReport:
    """
    Append-only list of run records

    Every record is a flat dict with a "type" key. When a path is given each
    record is also appended to that file as one JSON line, and records already
    in the file are loaded first so a resumed run keeps extending it.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: List[Dict] = []
        if path is not None and os.path.exists(path):
            self.records = load_records(path)

    def add(self, kind: str, /, **fields) -> Dict:
        record = {"type": kind, **fields}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")
        return record

    def of_type(self, kind: str) -> List[Dict]:
        return [r for r in self.records if r["type"] == kind]

    def deterministic_records(self) -> List[Dict]:
        """Records that must match between two runs with the same seed and plan"""
        return [r for r in self.records if r["type"] not in WALL_CLOCK_TYPES]

    def __len__(self):
        return len(self.records)


def _jsonable(value):
    if hasattr(value, "item"):
        return value.item()
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def load_records(path: str) -> List[Dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid report record: {exc}") from exc
    return records


def run_scale(records: Sequence[Dict]) -> float:
    starts = [r for r in records if r["type"] == "run_start"]
    return float(starts[0].get("scale", 1.0)) if starts else 1.0


def loss_curve_frame(records: Sequence[Dict]) -> pd.DataFrame:
    """
    One row per optimizer step

    Columns: tokens_seen, gt (full-scale equivalent), stage, step, loss, lr,
    batch_size, doubling (True on the first step at a new batch size) and
    spikes (cumulative spike count up to that step).
    """
    scale = run_scale(records)
    rows = []
    spikes = 0
    pending_doubling = False
    for record in records:
        kind = record["type"]
        if kind == "spike":
            spikes += 1
        elif kind == "batch_doubling":
            pending_doubling = True
        elif kind == "step":
            rows.append({
                "tokens_seen": record["tokens_seen"],
                "gt": record["tokens_seen"] / (GIGATOKEN * scale),
                "stage": record["stage"],
                "step": record["step"],
                "loss": record["loss"],
                "lr": record["lr"],
                "batch_size": record["batch_size"],
                "doubling": pending_doubling,
                "spikes": spikes,
            })
            pending_doubling = False
    columns = ["tokens_seen", "gt", "stage", "step", "loss", "lr", "batch_size", "doubling", "spikes"]
    return pd.DataFrame(rows, columns=columns)


def doubling_events(records: Sequence[Dict]) -> pd.DataFrame:
    scale = run_scale(records)
    rows = [{"tokens_seen": r["tokens_seen"], "gt": r["tokens_seen"] / (GIGATOKEN * scale),
             "batch_size": r["batch_size"]} for r in records if r["type"] == "batch_doubling"]
    return pd.DataFrame(rows, columns=["tokens_seen", "gt", "batch_size"])


def spike_count(records: Sequence[Dict]) -> int:
    return sum(1 for r in records if r["type"] == "spike")


def summarize(records: Sequence[Dict]) -> Dict:
    steps = [r for r in records if r["type"] == "step"]
    evals = [r for r in records if r["type"] == "eval"]
    return {
        "steps": len(steps),
        "tokens_seen": steps[-1]["tokens_seen"] if steps else 0,
        "final_loss": steps[-1]["loss"] if steps else None,
        "spikes": spike_count(records),
        "rollbacks": sum(1 for r in records if r["type"] == "rollback"),
        "batch_doublings": sum(1 for r in records if r["type"] == "batch_doubling"),
        "stages": [r for r in records if r["type"] == "stage_end"],
        "evaluations": evals,
        "throughput": [r for r in records if r["type"] == "throughput"],
        "checkpoints": [r["id"] for r in records if r["type"] == "checkpoint"],
    }


def loss_curve_figure(frame: pd.DataFrame, doublings: pd.DataFrame):
    """Loss against full-scale GT with a star per batch doubling and the cumulative spike count"""
    if not PLOTLY_AVAILABLE:
        raise RuntimeError("plotly is not installed")
    fig = make_subplots(specs=[[{"secondary_y": True}]])
    fig.add_trace(go.Scatter(x=frame["gt"], y=frame["loss"], mode="lines", name="training loss"))
    if len(doublings):
        at = frame.set_index("tokens_seen")["loss"]
        markers = [at[at.index >= t].iloc[0] if (at.index >= t).any() else None for t in doublings["tokens_seen"]]
        fig.add_trace(go.Scatter(x=doublings["gt"], y=markers, mode="markers", name="batch doubling",
                                 marker={"symbol": "star", "size": 14},
                                 text=[f"B={b}" for b in doublings["batch_size"]]))
    fig.add_trace(go.Scatter(x=frame["gt"], y=frame["spikes"], mode="lines", name="spikes (cumulative)",
                             line={"dash": "dot"}), secondary_y=True)
    fig.update_layout(title="Training loss", xaxis_title="GT (full-scale equivalent)")
    fig.update_yaxes(title_text="loss", secondary_y=False)
    fig.update_yaxes(title_text="spikes", secondary_y=True)
    return fig


def export_report(run_dir: str, out_dir: Optional[str] = None, plot: bool = True) -> Dict[str, str]:
    """
    Write loss_curve.csv, doublings.csv, summary.json and, with plotly, loss_curve.html

    Returns:
        Mapping from artifact name to written path
    """
    path = os.path.join(run_dir, REPORT_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no run report at {path}")
    records = load_records(path)
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)

    frame = loss_curve_frame(records)
    doublings = doubling_events(records)
    written = {
        "loss_curve": os.path.join(out_dir, "loss_curve.csv"),
        "doublings": os.path.join(out_dir, "doublings.csv"),
        "summary": os.path.join(out_dir, "summary.json"),
    }
    frame.to_csv(written["loss_curve"], index=False)
    doublings.to_csv(written["doublings"], index=False)
    with open(written["summary"], "w", encoding="utf-8") as f:
        json.dump(summarize(records), f, indent=2, default=_jsonable)

    if plot and PLOTLY_AVAILABLE and len(frame):
        written["figure"] = os.path.join(out_dir, "loss_curve.html")
        loss_curve_figure(frame, doublings).write_html(written["figure"])
    elif plot and not PLOTLY_AVAILABLE:
        logger.warning("plotly not installed; skipping loss_curve.html")
    logger.info("report for %s: %d steps, %d spike(s), %d doubling(s)", run_dir, len(frame),
                spike_count(records), len(doublings))
    return written
