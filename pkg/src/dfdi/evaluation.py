"""Metrics and report emission.

Time integrals use the trapezoidal rule on the simulation grid. Reports are
a versioned JSON document plus CSV tables with fixed headers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

REPORT_SCHEMA = "dfdi-report/1"


def _on_grid(true, pred, grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise DimensionError("grid must be strictly increasing with at least two points")

    def expand(a):
        a = np.asarray(a, dtype=float)
        if a.ndim == 1 and a.shape[0] != grid.size:
            a = np.broadcast_to(a, (grid.size, a.shape[0]))  # constant vector over time
        if a.ndim == 1:
            a = a[:, None]
        if a.shape[0] != grid.size:
            raise DimensionError(f"series has {a.shape[0]} samples, grid has {grid.size}")
        return a

    t, p = expand(true), expand(pred)
    if t.shape != p.shape:
        raise DimensionError(f"shape mismatch: {t.shape} vs {p.shape}")
    return t, p, grid


def _time_average(values: np.ndarray, grid: np.ndarray) -> float:
    # normalized by the covered span, which equals t_N for grids starting at 0
    return float(np.trapezoid(values, grid) / (grid[-1] - grid[0]))


def rmse(theta_true, theta_pred, grid) -> float:
    """sqrt of the time average of ||true - pred||^2.

    Series are (n_times, d) arrays; a 1-D array of length != n_times is taken
    as constant in time.
    """
    t, p, g = _on_grid(theta_true, theta_pred, grid)
    return math.sqrt(max(_time_average(np.sum((t - p) ** 2, axis=1), g), 0.0))


def l2_error(theta_true, theta_pred, grid) -> float:
    """Time average of ||true - pred||."""
    t, p, g = _on_grid(theta_true, theta_pred, grid)
    return _time_average(np.linalg.norm(t - p, axis=1), g)


@dataclass
class ClassificationMetrics:
    accuracy: float
    mean_precision: float
    mean_false_alarm: float
    precision: list[float | None]
    false_alarm: list[float | None]

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def confusion_matrix(true_idx: Sequence[int], pred_idx: Sequence[int], n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(true_idx, dtype=int), np.asarray(pred_idx, dtype=int)), 1)
    return cm


def classification_metrics(confusion) -> ClassificationMetrics:
    """Accuracy, mean precision and mean false-alarm rate of a confusion matrix.

    Precision of a predicted class is diag / column sum; classes never
    predicted are left out of the mean. The false-alarm rate of class i is
    the number of wrong predictions of i over the trials whose true class is
    not i; classes with no such trials are left out.
    """
    cm = np.asarray(confusion, dtype=float)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DimensionError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ConfigError("confusion counts must be nonnegative")
    total = cm.sum()
    if total == 0:
        raise ConfigError("confusion matrix is all zeros")
    diag = np.diag(cm)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision = [float(d / c) if c > 0 else None for d, c in zip(diag, col)]
    negatives = total - row
    far = [float((c - d) / neg) if neg > 0 else None for d, c, neg in zip(diag, col, negatives)]
    valid_p = [p for p in precision if p is not None]
    valid_f = [f for f in far if f is not None]
    return ClassificationMetrics(
        accuracy=float(diag.sum() / total),
        mean_precision=float(np.mean(valid_p)) if valid_p else float("nan"),
        mean_false_alarm=float(np.mean(valid_f)) if valid_f else float("nan"),
        precision=precision,
        false_alarm=far,
    )


@dataclass
class EvalReport:
    classification: dict[str, Any] | None = None
    per_profile: list[dict[str, Any]] = field(default_factory=list)
    estimation: list[dict[str, Any]] = field(default_factory=list)
    bound: dict[str, Any] | None = None
    config: dict[str, Any] = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self, timestamp: bool = True) -> dict[str, Any]:
        d = {
            "schema": REPORT_SCHEMA,
            "classification": self.classification,
            "per_profile": self.per_profile,
            "estimation": self.estimation,
            "bound": self.bound,
            "config": self.config,
            "wall_times": self.wall_times,
            "warnings": self.warnings,
        }
        if timestamp:
            d["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        return d


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def build_report(
    confusion=None,
    labels: Sequence[str] | None = None,
    per_profile: Sequence[dict[str, Any]] | None = None,
    estimation: Sequence[dict[str, Any]] | None = None,
    bound: dict[str, Any] | None = None,
    config: dict[str, Any] | None = None,
    wall_times: dict[str, float] | None = None,
) -> EvalReport:
    """Collect whatever sections are available; missing ones become nulls plus a warning."""
    rep = EvalReport(config=dict(config or {}), wall_times=dict(wall_times or {}))
    if confusion is not None:
        cm = np.asarray(confusion)
        metrics = classification_metrics(cm)
        names = list(labels) if labels is not None else [f"class{i}" for i in range(cm.shape[0])]
        if len(names) != cm.shape[0]:
            raise DimensionError("one label per confusion row required")
        rep.classification = {"labels": names, "confusion": cm.tolist(), **metrics.to_dict()}
    else:
        rep.warnings.append("no classification results")
    if per_profile:
        rep.per_profile = [dict(r) for r in per_profile]
        for key in ("rmse", "l2"):
            vals = [r[key] for r in per_profile if r.get(key) is not None]
            if vals and rep.classification is not None:
                rep.classification[f"overall_{key}"] = float(np.mean(vals))
    if estimation:
        rep.estimation = [dict(r) for r in estimation]
    else:
        rep.warnings.append("no estimation results")
    if bound is not None:
        rep.bound = dict(bound)
    else:
        rep.warnings.append("no bound comparison")
    return rep


def report_csv(rep: EvalReport) -> dict[str, str]:
    """CSV tables: overall metrics, per-profile rows and estimation rows."""
    out: dict[str, str] = {}

    def table(header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()

    overall = []
    if rep.classification is not None:
        c = rep.classification
        for key in ("accuracy", "mean_precision", "mean_false_alarm", "overall_rmse", "overall_l2"):
            if key in c:
                overall.append([key, repr(c[key])])
    if rep.bound is not None:
        for key in ("w2_empirical", "w2_bound", "kl"):
            if key in rep.bound:
                overall.append([key, repr(rep.bound[key])])
    out["metrics.csv"] = table(["metric", "value"], overall)
    out["per_profile.csv"] = table(
        ["profile", "trials", "correct", "rmse", "l2"],
        [[r.get("profile"), r.get("trials"), r.get("correct"), r.get("rmse"), r.get("l2")] for r in rep.per_profile],
    )
    out["estimation.csv"] = table(
        ["case", "method", "mean_abs_eta_error", "wall_time"],
        [[r.get("case"), r.get("method"), r.get("mean_abs_eta_error"), r.get("wall_time")] for r in rep.estimation],
    )
    return out


def write_report(rep: EvalReport, out_dir: str | Path, timestamp: bool = True) -> Path:
    """Write report.json and the CSV tables into ``out_dir``; returns the JSON path."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"report directory {out_dir} does not exist")
    path = out_dir / "report.json"
    path.write_text(json.dumps(_json_safe(rep.to_dict(timestamp)), indent=2, sort_keys=True) + "\n")
    for name, text in report_csv(rep).items():
        (out_dir / name).write_text(text)
    return path
