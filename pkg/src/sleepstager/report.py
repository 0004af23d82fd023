"""Results tables: one per stratification axis, baseline row on top.

Column order is Subgroup, n, Acc, MF1, Kappa, W, N1, N2, N3, R, plus an
improvement column in kappa points relative to the baseline row.
Metrics print with three decimals and improvements with one, in both
markdown and CSV, so the two formats carry identical numeric content.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import (
    ConfusionMatrix,
    kappa_improvement,
    report_from_confusion,
)
from .stratify import StratAxis

_AXIS_TITLES = {
    StratAxis.GENDER: "Gender",
    StratAxis.AGE: "Age",
    StratAxis.AHI: "AHI Severity",
    StratAxis.GENDER_X_AHI: "Gender x AHI Severity",
    StratAxis.GENDER_X_AGE: "Gender x Age",
    StratAxis.AGE_X_AHI: "Age x AHI Severity",
}

COLUMNS = ("Subgroup", "n", "Acc", "MF1", "Kappa", "W", "N1", "N2", "N3", "R")


@dataclass(frozen=True)
class ReportRow:
    label: str
    n_subjects: int | None
    accuracy: float
    macro_f1: float
    kappa: float
    per_class_f1: tuple[float, ...]

    @classmethod
    def from_report(cls, label, n_subjects, report):
        return cls(label=label, n_subjects=n_subjects,
                   accuracy=report.accuracy, macro_f1=report.macro_f1,
                   kappa=report.kappa,
                   per_class_f1=tuple(report.per_class_f1))


@dataclass
class AxisTable:
    axis: StratAxis
    rows: list[ReportRow]


@dataclass
class ReportBundle:
    baseline: ReportRow | None
    tables: list[AxisTable]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def n_rows(self):
        return sum(len(t.rows) for t in self.tables)


def aggregate_fold_reports(reports, mode="mean"):
    """Combine per-fold metrics into one row's worth of numbers.

    "mean" averages each metric over folds with equal weight; "pool"
    sums the fold confusion matrices and recomputes the metrics from
    the pooled counts.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no fold reports to aggregate")
    if mode == "pool":
        cm = ConfusionMatrix(sum(r.confusion.counts for r in reports))
        return report_from_confusion(cm)
    if mode != "mean":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    per_class = np.mean([r.per_class_f1 for r in reports], axis=0)
    cm = ConfusionMatrix(sum(r.confusion.counts for r in reports))
    cls = type(reports[0])
    return cls(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        per_class_f1=tuple(float(v) for v in per_class),
        macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        kappa=float(np.mean([r.kappa for r in reports])),
        confusion=cm,
        n_epochs=sum(r.n_epochs for r in reports))


def _fmt_metric(value):
    return f"{value:.3f}"


def _fmt_improvement(points):
    return f"{points:+.1f}"


def _render_rows(table, baseline):
    """Yield per-row cell lists; improvement column only when a baseline exists."""
    rows = []
    if baseline is not None:
        rows.append(_cells(baseline, improvement=None, with_improvement=True))
    for row in table.rows:
        if baseline is not None:
            delta = kappa_improvement(baseline.kappa, row.kappa)
            rows.append(_cells(row, improvement=delta, with_improvement=True))
        else:
            rows.append(_cells(row, improvement=None, with_improvement=False))
    return rows


def _cells(row, improvement, with_improvement):
    cells = [row.label,
             "" if row.n_subjects is None else str(row.n_subjects),
             _fmt_metric(row.accuracy), _fmt_metric(row.macro_f1),
             _fmt_metric(row.kappa)]
    cells.extend(_fmt_metric(v) for v in row.per_class_f1)
    if with_improvement:
        cells.append("" if improvement is None else _fmt_improvement(improvement))
    return cells


def render_markdown(bundle):
    lines = []
    if not bundle.tables and bundle.baseline is not None:
        # Baseline-only bundle: a single-row table with no improvement column.
        lines.append("## Baseline")
        lines.append("")
        lines.append("| " + " | ".join(COLUMNS) + " |")
        lines.append("|" + "|".join("---" for _ in COLUMNS) + "|")
        lines.append("| " + " | ".join(
            _cells(bundle.baseline, improvement=None, with_improvement=False)) + " |")
        lines.append("")
    for table in bundle.tables:
        header = list(COLUMNS)
        if bundle.baseline is not None:
            header.append("Improvement")
        lines.append(f"## {_AXIS_TITLES[table.axis]}")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "|".join("---" for _ in header) + "|")
        for cells in _render_rows(table, bundle.baseline):
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    if bundle.skipped:
        lines.append("## Skipped subgroups")
        lines.append("")
        for label, reason in bundle.skipped:
            lines.append(f"- {label}: {reason}")
        lines.append("")
    return "\n".join(lines)


def render_csv(bundle):
    lines = []
    if not bundle.tables and bundle.baseline is not None:
        lines.append(",".join(["axis"] + list(COLUMNS)))
        lines.append(",".join(
            ["baseline"]
            + _cells(bundle.baseline, improvement=None, with_improvement=False)))
    for table in bundle.tables:
        header = ["axis"] + list(COLUMNS)
        if bundle.baseline is not None:
            header.append("Improvement")
        if not lines:
            lines.append(",".join(header))
        for cells in _render_rows(table, bundle.baseline):
            lines.append(",".join([table.axis.value] + cells))
    for label, reason in bundle.skipped:
        lines.append(f"# skipped,{label},{reason}")
    return "\n".join(lines) + "\n"


def render_axis_markdown(bundle, axis):
    sub = ReportBundle(baseline=bundle.baseline,
                       tables=[t for t in bundle.tables if t.axis == axis])
    return render_markdown(sub)


def render_axis_csv(bundle, axis):
    sub = ReportBundle(baseline=bundle.baseline,
                       tables=[t for t in bundle.tables if t.axis == axis])
    return render_csv(sub)


def emit_tables(bundle, out_dir, formats=("markdown", "csv")):
    """Write one file per axis and format; returns the written paths."""
    if not bundle.tables and bundle.baseline is None:
        raise ValueError("empty report bundle")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt not in ("markdown", "csv"):
            raise ValueError(f"unknown report format {fmt!r}")
    for table in bundle.tables:
        single = ReportBundle(baseline=bundle.baseline, tables=[table],
                              skipped=[s for s in bundle.skipped
                                       if s[0].startswith(table.axis.value)])
        if "markdown" in formats:
            path = out_dir / f"{table.axis.value}.md"
            path.write_text(render_markdown(single), encoding="utf-8")
            written.append(path)
        if "csv" in formats:
            path = out_dir / f"{table.axis.value}.csv"
            path.write_text(render_csv(single), encoding="utf-8")
            written.append(path)
    if not bundle.tables and bundle.baseline is not None:
        if "markdown" in formats:
            path = out_dir / "baseline.md"
            path.write_text(render_markdown(bundle), encoding="utf-8")
            written.append(path)
        if "csv" in formats:
            path = out_dir / "baseline.csv"
            path.write_text(render_csv(bundle), encoding="utf-8")
            written.append(path)
    return written
