"""Report tables: layout, improvement arithmetic, format parity."""

import numpy as np
import pytest

from sleepstager.metrics import ConfusionMatrix, MetricsReport
from sleepstager.report import (
    AxisTable,
    ReportBundle,
    ReportRow,
    aggregate_fold_reports,
    emit_tables,
    render_csv,
    render_markdown,
)
from sleepstager.stratify import StratAxis


def _row(label, n, acc, mf1, kappa, stages):
    return ReportRow(label=label, n_subjects=n, accuracy=acc, macro_f1=mf1,
                     kappa=kappa, per_class_f1=tuple(stages))


BASELINE = _row("Baseline", 100, 0.705, 0.647, 0.589,
                (0.800, 0.396, 0.779, 0.528, 0.733))

SINGLE_AXIS_FIXTURE = ReportBundle(
    baseline=BASELINE,
    tables=[
        AxisTable(axis=StratAxis.GENDER, rows=[
            _row("Male", 45, 0.772, 0.683, 0.680,
                 (0.852, 0.496, 0.820, 0.403, 0.841)),
            _row("Female", 55, 0.735, 0.691, 0.629,
                 (0.832, 0.443, 0.792, 0.595, 0.792)),
        ]),
        AxisTable(axis=StratAxis.AHI, rows=[
            _row("Normal", 26, 0.778, 0.735, 0.686,
                 (0.880, 0.443, 0.809, 0.709, 0.834)),
            _row("Severe", 25, 0.717, 0.681, 0.607,
                 (0.780, 0.493, 0.798, 0.581, 0.751)),
        ]),
    ])


def test_improvement_column_reproduces_quoted_points():
    md = render_markdown(SINGLE_AXIS_FIXTURE)
    rows = {line.split("|")[1].strip(): line for line in md.splitlines()
            if line.startswith("|") and "---" not in line}
    assert rows["Male"].split("|")[-2].strip() == "+9.1"
    assert rows["Female"].split("|")[-2].strip() == "+4.0"
    assert rows["Normal"].split("|")[-2].strip() == "+9.7"
    assert rows["Severe"].split("|")[-2].strip() == "+1.8"
    assert rows["Baseline"].split("|")[-2].strip() == ""


def test_markdown_column_order_matches_table_schema():
    md = render_markdown(SINGLE_AXIS_FIXTURE)
    header = next(line for line in md.splitlines() if line.startswith("|"))
    cells = [c.strip() for c in header.strip("|").split("|")]
    assert cells == ["Subgroup", "n", "Acc", "MF1", "Kappa",
                     "W", "N1", "N2", "N3", "R", "Improvement"]


def test_baseline_only_bundle_single_row_no_improvement():
    bundle = ReportBundle(baseline=BASELINE, tables=[])
    md = render_markdown(bundle)
    body = [line for line in md.splitlines()
            if line.startswith("|") and "---" not in line]
    assert len(body) == 2  # header + the baseline row
    assert "Improvement" not in body[0]
    csv = render_csv(bundle)
    assert "Improvement" not in csv.splitlines()[0]
    assert len(csv.strip().splitlines()) == 2


def _parse_markdown_numbers(md):
    values = {}
    for line in md.splitlines():
        if not line.startswith("|") or "---" in line:
            continue
        cells = [c.strip() for c in line.strip("|").split("|")]
        if cells[0] in ("Subgroup",):
            continue
        values[cells[0]] = [c for c in cells[1:] if c != ""]
    return values


def _parse_csv_numbers(csv):
    values = {}
    for line in csv.splitlines()[1:]:
        if line.startswith("#"):
            continue
        cells = line.split(",")
        values[cells[1]] = [c for c in cells[2:] if c != ""]
    return values


def test_csv_and_markdown_numeric_parity():
    md = _parse_markdown_numbers(render_markdown(SINGLE_AXIS_FIXTURE))
    csv = _parse_csv_numbers(render_csv(SINGLE_AXIS_FIXTURE))
    assert set(md) == set(csv)
    for label in md:
        assert md[label] == csv[label], label


def test_emit_tables_one_file_per_axis_and_format(tmp_path):
    written = emit_tables(SINGLE_AXIS_FIXTURE, tmp_path)
    names = sorted(p.name for p in written)
    assert names == ["ahi.csv", "ahi.md", "gender.csv", "gender.md"]
    gender_md = (tmp_path / "gender.md").read_text(encoding="utf-8")
    assert "Male" in gender_md and "Normal" not in gender_md


def test_emit_tables_rejects_empty_bundle(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        emit_tables(ReportBundle(baseline=None, tables=[]), tmp_path)
    with pytest.raises(ValueError, match="format"):
        emit_tables(SINGLE_AXIS_FIXTURE, tmp_path, formats=("pdf",))


def test_skipped_subgroups_are_listed(tmp_path):
    bundle = ReportBundle(baseline=BASELINE,
                          tables=[AxisTable(axis=StratAxis.GENDER, rows=[])],
                          skipped=[("M-Severe", "only 2 subjects (minimum 4)")])
    md = render_markdown(bundle)
    assert "M-Severe: only 2 subjects" in md


# ---------------------------------------------------------------------------
# fold aggregation
# ---------------------------------------------------------------------------

def _report(counts):
    from sleepstager.metrics import report_from_confusion
    return report_from_confusion(ConfusionMatrix(np.asarray(counts)))


def test_aggregate_mean_averages_per_fold_metrics():
    a = _report([[8, 2], [2, 8]])
    b = _report([[5, 5], [0, 10]])
    merged = aggregate_fold_reports([a, b], mode="mean")
    assert merged.accuracy == pytest.approx((a.accuracy + b.accuracy) / 2)
    assert merged.kappa == pytest.approx((a.kappa + b.kappa) / 2)
    assert merged.n_epochs == 40


def test_aggregate_pool_sums_confusions_first():
    a = _report([[8, 2], [2, 8]])
    b = _report([[5, 5], [0, 10]])
    merged = aggregate_fold_reports([a, b], mode="pool")
    pooled = _report([[13, 7], [2, 18]])
    assert merged.accuracy == pytest.approx(pooled.accuracy)
    assert merged.kappa == pytest.approx(pooled.kappa)


def test_aggregate_validation():
    with pytest.raises(ValueError, match="no fold reports"):
        aggregate_fold_reports([], mode="mean")
    with pytest.raises(ValueError, match="unknown aggregation"):
        aggregate_fold_reports([_report([[1, 0], [0, 1]])], mode="median")
