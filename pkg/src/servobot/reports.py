"""Report emission: canonical JSON, CSV ledgers, depth series, failure dumps.

Serialization is part of the determinism contract: the same run must produce
byte-identical files, so JSON is emitted with sorted keys and a fixed indent,
CSV rows use repr-style float formatting, and every numpy scalar is converted
to its plain Python equivalent before encoding.
"""
from __future__ import annotations

import csv
import io
import json
import os
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from . import jacobian as jac
from . import world as wd
from .harness import RunReport, TrialRun
from .tfod import ANNOTATION_SECONDS_PER_CLICK, TaskId


def jsonify(value):
    """Recursively convert a report structure to plain JSON-ready types."""
    if isinstance(value, dict):
        return {str(k): jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonify(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return jsonify(value.tolist())
    return value


def dumps(doc) -> str:
    """Canonical JSON text: sorted keys, two-space indent, one trailing \\n."""
    return json.dumps(jsonify(doc), indent=2, sort_keys=True) + "\n"


def _csv_text(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


LEDGER_HEADER = ("trial", "arm", "find", "servo", "depth", "grasp",
                 "place_find", "examples", "clicks", "annotation_s",
                 "robot_s", "cpu_s", "find_rate", "vs_rate", "de_rate",
                 "grasp_rate", "placements")


def ledger_rows(runs: Sequence[TrialRun]) -> List[List]:
    """Per-trial annotation ledger: new examples by task plus time costs.

    For prior-annotation arms the counts are deltas over the inherited set,
    so each row reflects only the work this trial added.
    """
    rows: List[List] = [list(LEDGER_HEADER)]
    for run in runs:
        per_task = run.new_per_task()
        rep = run.report
        rows.append([
            run.label, run.arm,
            per_task[TaskId.FIND.value], per_task[TaskId.SERVO.value],
            per_task[TaskId.DEPTH.value], per_task[TaskId.GRASP.value],
            per_task[TaskId.PLACE_FIND.value],
            run.new_examples(), run.new_clicks(),
            ANNOTATION_SECONDS_PER_CLICK * run.new_clicks(),
            rep.robot_seconds, run.new_cpu_seconds(),
            rep.rate("find"), rep.rate("vs"), rep.rate("de"),
            rep.rate("grasp"), rep.placements,
        ])
    return rows


SESSION_HEADER = ("trial", "formulation", "converged", "updates",
                  "skipped", "dx_dsx", "dx_dsy", "dy_dsx", "dy_dsy",
                  "robot_s")


def session_rows(sessions: Sequence[jac.LearningSession]) -> List[List]:
    rows: List[List] = [list(SESSION_HEADER)]
    for i, s in enumerate(sessions):
        m = s.final.matrix
        rows.append([f"t{i:02d}", s.formulation, s.converged,
                     s.updates_used, s.skipped_updates,
                     float(m[0, 0]), float(m[0, 1]),
                     float(m[1, 0]), float(m[1, 1]),
                     s.robot_seconds])
    return rows


COMPARISON_HEADER = ("formulation", "trials", "converged", "mean_updates",
                     "min_updates", "max_updates", "dx_dsx_min", "dx_dsx_max",
                     "cross_min", "cross_max", "dy_dsy_min", "dy_dsy_max",
                     "mean_robot_s")


def comparison_rows(report: jac.ComparisonReport) -> List[List]:
    """Formulation comparison in the update-rule summary layout."""
    rows: List[List] = [list(COMPARISON_HEADER)]
    for st in report.stats:
        rows.append([
            st.formulation, st.trials, st.converged, st.mean_updates,
            st.min_updates, st.max_updates,
            st.dx_dsx_range[0], st.dx_dsx_range[1],
            st.cross_range[0], st.cross_range[1],
            st.dy_dsy_range[0], st.dy_dsy_range[1],
            st.mean_robot_seconds,
        ])
    return rows


def _write_text(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _write_bytes(path: str, blob: bytes) -> str:
    with open(path, "wb") as fh:
        fh.write(blob)
    return path


def write_run_report(report: RunReport, out_dir: str,
                     formats: Sequence[str] = ("json", "csv")) -> List[str]:
    """Emit report files under out_dir; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []
    if "json" in formats:
        written.append(_write_text(os.path.join(out_dir, "report.json"),
                                   dumps(report.to_json())))
    if "csv" in formats:
        rows = (session_rows(report.sessions) if report.sessions
                else ledger_rows(report.trials))
        written.append(_write_text(os.path.join(out_dir, "report.csv"),
                                   _csv_text(rows)))
    written.extend(write_depth_series(report.trials, out_dir))
    written.extend(write_failures(report.trials, out_dir))
    return written


def write_depth_series(runs: Sequence[TrialRun], out_dir: str) -> List[str]:
    """One CSV of descent checkpoints per object that ran depth estimation."""
    written: List[str] = []
    series_dir = os.path.join(out_dir, "depth_series")
    for run in runs:
        for obj in run.report.objects:
            if not obj.depth_rows:
                continue
            if not os.path.isdir(series_dir):
                os.makedirs(series_dir, exist_ok=True)
            name = f"{run.label}-{obj.object_id}.csv"
            written.append(_write_text(os.path.join(series_dir, name),
                                       "\n".join(obj.depth_rows) + "\n"))
    return written


def write_failures(runs: Sequence[TrialRun], out_dir: str) -> List[str]:
    """PNG + JSON sidecar per failure event, named by trial and event id."""
    written: List[str] = []
    fail_dir = os.path.join(out_dir, "failures")
    for run in runs:
        for event in run.report.events:
            if not os.path.isdir(fail_dir):
                os.makedirs(fail_dir, exist_ok=True)
            stem = f"{run.label}-{event.event_id}"
            doc = dict(event.to_json(), trial=run.label, arm=run.arm,
                       images=[f"{stem}-{img}.png"
                               for img in event.image_ids])
            written.append(_write_text(
                os.path.join(fail_dir, f"{stem}.json"), dumps(doc)))
            for img in event.image_ids:
                record = run.ctx.store.get(img)
                written.append(_write_bytes(
                    os.path.join(fail_dir, f"{stem}-{img}.png"),
                    wd.to_png_bytes(record.rasterize())))
    return written


def write_comparison(report: jac.ComparisonReport, out_dir: str,
                     formats: Sequence[str] = ("json", "csv")) -> List[str]:
    """Emit a formulation-comparison report (the `compare` subcommand)."""
    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []
    if "json" in formats:
        written.append(_write_text(os.path.join(out_dir, "report.json"),
                                   dumps(report.to_json())))
    if "csv" in formats:
        written.append(_write_text(os.path.join(out_dir, "report.csv"),
                                   _csv_text(comparison_rows(report))))
    return written


def read_report_json(out_dir: str) -> Optional[str]:
    """Raw text of a previously written report.json, if present."""
    path = os.path.join(out_dir, "report.json")
    if not os.path.isfile(path):
        return None
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return fh.read()
