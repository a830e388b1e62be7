from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from reports.charts import chart_label_accuracy
from reports.metrics import (
    EvalReport,
    cluster_purity,
    confusion_by_area,
    leaf_accuracy,
    part_accuracy,
    per_label_accuracy,
    write_report,
)
from services.errors import DataError

PRED = [np.array(["top", "leg", "leg"]), np.array(["foot"])]
TRUTH = [np.array(["top", "leg", "foot"]), np.array(["foot"])]
AREAS = [np.array([2.0, 1.0, 1.0]), np.array([4.0])]


def test_leaf_accuracy_is_area_weighted():
    assert leaf_accuracy(PRED, TRUTH, AREAS) == pytest.approx(7.0 / 8.0)
    assert leaf_accuracy(TRUTH, TRUTH, AREAS) == 1.0
    with pytest.raises(DataError):
        leaf_accuracy([PRED[0][:2]], [TRUTH[0]], [AREAS[0]])


def test_everything_wrong_on_a_single_label():
    pred = [np.array(["leg", "leg"])]
    truth = [np.array(["top", "top"])]
    areas = [np.array([1.0, 1.0])]
    assert leaf_accuracy(pred, truth, areas) == 0.0
    per = per_label_accuracy(confusion_by_area(pred, truth, areas))
    assert per["accuracy"].tolist() == [0.0]


def test_confusion_rows_sum_to_label_areas():
    table = confusion_by_area(PRED, TRUTH, AREAS)
    assert list(table.columns) == ["foot", "leg", "top"]
    assert table.loc["foot"].sum() == pytest.approx(5.0)
    assert table.loc["foot", "leg"] == pytest.approx(1.0)
    assert table.loc["leg", "leg"] == pytest.approx(1.0)
    per = per_label_accuracy(table).set_index("label")
    assert per.loc["foot", "accuracy"] == pytest.approx(0.8)
    assert per.loc["top", "accuracy"] == 1.0


def test_part_metrics():
    assert part_accuracy(["a", "b", "c"], ["a", "b", "d"]) == pytest.approx(2 / 3)
    assert part_accuracy([], []) == 0.0
    with pytest.raises(DataError):
        part_accuracy(["a"], [])
    # cluster 0 holds two wheels and a door, cluster 1 two doors
    assert cluster_purity([0, 0, 0, 1, 1], ["wheel", "wheel", "door", "door", "door"]) == pytest.approx(0.8)


def test_summary_lists_unset_metrics():
    report = EvalReport(leaf_accuracy=0.5, timings={"segment": 1.23456})
    summary = report.summary()
    assert summary["Leaf accuracy (area)"] == 0.5
    assert summary["Part accuracy"] is None
    assert summary["Time segment (s)"] == 1.235
    assert "Leaf accuracy (area)" in report.to_markdown()


def test_empty_chart():
    assert len(chart_label_accuracy(pd.DataFrame()).data) == 0
    per = per_label_accuracy(confusion_by_area(PRED, TRUTH, AREAS))
    assert len(chart_label_accuracy(per).data) == 1


def test_write_report(tmp_path):
    pytest.importorskip("kaleido")
    confusion = confusion_by_area(PRED, TRUTH, AREAS)
    report = EvalReport(leaf_accuracy=0.875, confusion=confusion, per_label=per_label_accuracy(confusion))
    paths = write_report(report, tmp_path / "eval")
    assert set(paths) == {"report", "confusion", "summary", "metrics", "chart"}
    summary = json.loads(paths["metrics"].read_text(encoding="utf-8"))
    assert summary["Leaf accuracy (area)"] == 0.875
    assert summary["Hierarchy recovered"] is None
    assert pd.read_csv(paths["report"])["label"].tolist() == ["foot", "leg", "top"]
    assert "<svg" in paths["chart"].read_text(encoding="utf-8")
    assert "## Per label" in paths["summary"].read_text(encoding="utf-8")
