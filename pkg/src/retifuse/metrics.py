"""ROC analysis and comparison reports.

Convention: a sample is predicted positive iff ``score >= threshold``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

REPORT_COLUMNS = ("method", "backbone", "auc", "sensitivity", "specificity", "improvement")
TEXT_HEADER = ("Method", "Backbone", "AUC", "Sensitivity", "Specificity", "Improvement")
BASELINE_LABEL = "Baseline"


class UndefinedMetricError(ValueError):
    """Raised when a metric needs both classes and only one is present."""


@dataclass
class ScoredSet:
    ids: list
    scores: np.ndarray
    labels: np.ndarray

    def __init__(self, ids: Sequence, scores, labels):
        self.scores = np.asarray(scores, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.ids = list(ids) if ids is not None else list(range(len(self.scores)))
        if not (len(self.ids) == len(self.scores) == len(self.labels)):
            raise ValueError("ids, scores and labels must have equal lengths")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def require_both_classes(self) -> tuple[int, int]:
        n_pos = int(self.labels.sum())
        n_neg = len(self.labels) - n_pos
        if n_pos == 0 or n_neg == 0:
            raise UndefinedMetricError(f"need positives and negatives, got {n_pos} and {n_neg}")
        return n_pos, n_neg

    def to_json(self) -> dict:
        return {"ids": list(self.ids), "scores": self.scores.tolist(), "labels": self.labels.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ScoredSet":
        return cls(obj["ids"], obj["scores"], obj["labels"])


def auc(s: ScoredSet) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly, ties counting half."""
    n_pos, n_neg = s.require_both_classes()
    ranks = rankdata(s.scores, method="average")
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(s: ScoredSet) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` points from ``(0, 0, +inf)`` down to ``(1, 1, min score)``."""
    n_pos, n_neg = s.require_both_classes()
    thresholds = np.unique(s.scores)[::-1]
    points = [(0.0, 0.0, math.inf)]
    order = np.argsort(-s.scores, kind="stable")
    sorted_scores = s.scores[order]
    sorted_labels = s.labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    # last index holding each distinct score (scores sorted descending)
    last = np.searchsorted(-sorted_scores, -thresholds, side="right") - 1
    for t, i in zip(thresholds, last):
        points.append((fp[i] / n_neg, tp[i] / n_pos, float(t)))
    return points


def trapezoid_area(points: Iterable[tuple[float, float, float]]) -> float:
    pts = list(points)
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(pts[:-1], pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def youden_scan(s: ScoredSet) -> list[tuple[float, float]]:
    """``(threshold, J)`` for every ROC threshold, highest threshold first."""
    return [(t, tpr - fpr) for fpr, tpr, t in roc_curve(s)]


def operating_point(validation: ScoredSet) -> float:
    """Threshold maximizing Youden's J; ties go to the higher threshold (higher specificity)."""
    best_t, best_j = math.inf, -math.inf
    for t, j in youden_scan(validation):
        if j > best_j:
            best_t, best_j = t, j
    return best_t


def sens_spec(s: ScoredSet, threshold: float) -> tuple[float, float]:
    n_pos, n_neg = s.require_both_classes()
    pred = s.scores >= threshold
    tp = int(np.sum(pred & (s.labels == 1)))
    tn = int(np.sum(~pred & (s.labels == 0)))
    return tp / n_pos, tn / n_neg


# ---------------------------------------------------------------------------
# reports

@dataclass
class ReportRow:
    method: str
    backbone: str
    auc: float
    sensitivity: float
    specificity: float
    improvement: float = 0.0
    is_baseline: bool = False
    run: str = ""

    @property
    def key(self) -> str:
        return self.run or self.method

    def cells(self) -> list[str]:
        improvement = BASELINE_LABEL if self.is_baseline else f"{self.improvement:+.3f}"
        return [self.method, self.backbone, f"{self.auc:.3f}", f"{self.sensitivity:.2f}",
                f"{self.specificity:.2f}", improvement]


@dataclass
class MetricsReport:
    rows: list[ReportRow]
    baseline: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(r.cells())
        return buf.getvalue()

    def to_text(self) -> str:
        header = list(TEXT_HEADER)
        body = [r.cells() for r in self.rows]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def build_report(rows: Sequence[ReportRow | tuple], baseline_name: str) -> MetricsReport:
    """Fill the improvement column as ``auc - auc(baseline)``.

    ``baseline_name`` is matched against each row's run name, or its method
    when the row has no run name.
    """
    rows = [r if isinstance(r, ReportRow) else ReportRow(*r) for r in rows]
    base = [r for r in rows if r.key == baseline_name]
    if not base:
        raise KeyError(f"baseline {baseline_name!r} is not among the rows")
    base_auc = base[0].auc
    out = []
    for r in rows:
        is_base = r.key == baseline_name
        out.append(ReportRow(r.method, r.backbone, r.auc, r.sensitivity, r.specificity,
                             0.0 if is_base else r.auc - base_auc, is_base, r.run))
    return MetricsReport(out, baseline_name)


def parse_report_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report header {reader.fieldnames}")
    return list(reader)


def roc_svg(curves: dict[str, list[tuple[float, float, float]]], size: int = 400) -> str:
    """Overlay ROC curves plus the chance diagonal as a standalone SVG document."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
    pad = 40
    span = size - 2 * pad

    def xy(fpr, tpr):
        return f"{pad + fpr * span:.2f},{pad + (1 - tpr) * span:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(curves)}" '
        f'viewBox="0 0 {size} {size + 20 * len(curves)}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad + span}" x2="{pad + span}" y2="{pad}" stroke="gray" stroke-dasharray="4 4"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">False positive rate</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">True positive rate</text>',
    ]
    for i, (name, points) in enumerate(curves.items()):
        color = palette[i % len(palette)]
        path = " ".join(xy(f, t) for f, t, _ in points)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        y = size + 14 * (i + 1)
        parts.append(f'<text x="{pad}" y="{y}" font-size="12" fill="{color}">{_escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
