"""Accuracy over cumulative query sets, multi-seed aggregation, report files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .io_utils import dump_json, write_text_atomic
from .model import gcn_forward

__all__ = [
    "StageRow",
    "AccuracyMatrix",
    "AggregateReport",
    "evaluate_accuracy",
    "predict",
    "aggregate",
    "emit_report",
    "emit_comparison",
    "stage_names",
]

REPORT_SCHEMA = "mega-aggregate/1"


def stage_names(n_rows: int) -> list[str]:
    return ["Base"] + [f"Task {i}" for i in range(1, n_rows)]


@dataclass
class StageRow:
    overall: float
    per_task: list[float]
    n_query: int = 0

    def to_json(self) -> dict:
        return {"overall": self.overall, "per_task": list(self.per_task), "n_query": self.n_query}


@dataclass
class AccuracyMatrix:
    rows: list[StageRow]

    def __post_init__(self):
        for i, row in enumerate(self.rows):
            if len(row.per_task) != i + 1:
                raise ValueError(f"stage {i} must have {i + 1} per-task entries, got {len(row.per_task)}")
            vals = [row.overall, *row.per_task]
            if not all(0.0 <= v <= 1.0 for v in vals):
                raise ValueError(f"accuracy outside [0, 1] at stage {i}")

    @property
    def overall(self) -> np.ndarray:
        return np.array([r.overall for r in self.rows])

    def to_json(self) -> dict:
        return {"rows": [r.to_json() for r in self.rows]}

    @classmethod
    def from_json(cls, doc: dict) -> "AccuracyMatrix":
        return cls([StageRow(r["overall"], list(r["per_task"]), r.get("n_query", 0)) for r in doc["rows"]])


def predict(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Argmax over visible classes; ties go to the lowest class id."""
    visible = np.flatnonzero(mask)
    # np.argmax returns the first maximum, and visible ids are ascending
    return visible[np.argmax(logits[:, visible], axis=1)]


def evaluate_accuracy(params, adj, features, query_nodes, labels, mask) -> float:
    q = np.asarray(query_nodes, dtype=np.int64)
    if q.size == 0:
        raise ValueError("empty query set")
    labels = np.asarray(labels)
    if not np.asarray(mask, dtype=bool)[labels[q]].all():
        raise ValueError("query labels include classes that are not visible")
    with ad.no_record():
        logits = gcn_forward(params.detached(), adj, features, None).data
    pred = predict(logits[q], mask)
    return float(np.count_nonzero(pred == labels[q]) / q.size)


@dataclass
class AggregateReport:
    mean: list[float]
    std: list[float]
    per_task_mean: list[list[float]]
    per_task_std: list[list[float]]
    n_runs: int
    config: dict = field(default_factory=dict)

    @property
    def stages(self) -> list[str]:
        return stage_names(len(self.mean))

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "stages": self.stages,
            "mean": self.mean,
            "std": self.std,
            "per_task_mean": self.per_task_mean,
            "per_task_std": self.per_task_std,
            "n_runs": self.n_runs,
            "config": self.config,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AggregateReport":
        return cls(doc["mean"], doc["std"], doc["per_task_mean"], doc["per_task_std"], doc["n_runs"],
                   doc.get("config", {}))


def aggregate(runs: list[AccuracyMatrix], config: dict | None = None) -> AggregateReport:
    """Entrywise mean and population standard deviation across runs."""
    if not runs:
        raise ValueError("nothing to aggregate")
    shape = [len(r.per_task) for r in runs[0].rows]
    for r in runs[1:]:
        if [len(x.per_task) for x in r.rows] != shape:
            raise ValueError("accuracy matrices have different shapes")
    overall = np.array([[row.overall for row in r.rows] for r in runs])
    mean, std = overall.mean(axis=0), overall.std(axis=0)
    pt_mean, pt_std = [], []
    for i in range(len(shape)):
        block = np.array([r.rows[i].per_task for r in runs])
        pt_mean.append(block.mean(axis=0).tolist())
        pt_std.append(block.std(axis=0).tolist())
    return AggregateReport(mean.tolist(), std.tolist(), pt_mean, pt_std, len(runs), dict(config or {}))


def _cell(m: float, s: float) -> str:
    return f"{100 * m:.2f}±{100 * s:.2f}"


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_report(report: AggregateReport, fmt: str, path) -> list[Path]:
    """Write ``report`` as json, csv (one row per stage) or plot-data.

    plot-data writes a two-column "stage accuracy" text file; ``path`` is
    the file to write for json/csv and plot-data alike.
    """
    path = Path(path)
    if fmt == "json":
        return [write_text_atomic(path, dump_json(report.to_json()))]
    if fmt == "csv":
        n_tasks = len(report.mean)
        header = ["stage", "overall"] + [f"task_{j}" for j in range(n_tasks)]
        rows = []
        for i, name in enumerate(report.stages):
            cells = [_cell(report.per_task_mean[i][j], report.per_task_std[i][j]) for j in range(i + 1)]
            rows.append([name, _cell(report.mean[i], report.std[i])] + cells + [""] * (n_tasks - i - 1))
        return [write_text_atomic(path, _csv_text(header, rows))]
    if fmt == "plot-data":
        lines = "".join(f"{i} {m!r}\n" for i, m in enumerate(report.mean))
        return [write_text_atomic(path, lines)]
    raise ValueError(f"unknown report format {fmt!r}")


def emit_comparison(reports: dict[str, AggregateReport], out_dir) -> list[Path]:
    """Side-by-side table (stages x methods) plus one plot-data series per method."""
    out_dir = Path(out_dir)
    names = list(reports)
    n = max(len(r.mean) for r in reports.values())
    rows = []
    for i, stage in enumerate(stage_names(n)):
        rows.append([stage] + [_cell(reports[k].mean[i], reports[k].std[i]) if i < len(reports[k].mean) else ""
                               for k in names])
    written = [write_text_atomic(out_dir / "table.csv", _csv_text(["stage", *names], rows))]
    written.append(write_text_atomic(out_dir / "table.json",
                                     dump_json({k: v.to_json() for k, v in reports.items()})))
    for k in names:
        written += emit_report(reports[k], "plot-data", out_dir / "plot-data" / f"{k}.txt")
    return written
