# reports/metrics.py
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from reports.charts import chart_label_accuracy, write_svg
from services.errors import DataError

UNLABELED = "(none)"


def leaf_accuracy(pred: Sequence[np.ndarray], truth: Sequence[np.ndarray], areas: Sequence[np.ndarray]) -> float:
    """Area-weighted share of faces whose predicted leaf name equals the true one, pooled over shapes."""
    correct = total = 0.0
    for p, t, a in zip(pred, truth, areas):
        p, t, a = np.asarray(p, dtype=object), np.asarray(t, dtype=object), np.asarray(a, dtype=np.float64)
        if not (len(p) == len(t) == len(a)):
            raise DataError(f"prediction covers {len(p)} faces, truth {len(t)}, areas {len(a)}")
        correct += float(a[p == t].sum())
        total += float(a.sum())
    return correct / total if total > 0 else 0.0


def confusion_by_area(pred: Sequence[np.ndarray], truth: Sequence[np.ndarray], areas: Sequence[np.ndarray]) -> pd.DataFrame:
    """Rows: true leaf, columns: predicted leaf, cells: summed face area."""
    frame = pd.DataFrame({
        "truth": np.concatenate([np.asarray(t, dtype=object) for t in truth]) if truth else [],
        "pred": np.concatenate([np.asarray(p, dtype=object) for p in pred]) if pred else [],
        "area": np.concatenate([np.asarray(a, dtype=np.float64) for a in areas]) if areas else [],
    })
    if frame.empty:
        return pd.DataFrame()
    frame["pred"] = frame["pred"].fillna(UNLABELED)
    table = pd.crosstab(frame["truth"], frame["pred"], values=frame["area"], aggfunc="sum").fillna(0.0)
    labels = sorted(set(table.index) | set(table.columns))
    return table.reindex(index=sorted(table.index), columns=labels, fill_value=0.0)


def per_label_accuracy(confusion: pd.DataFrame) -> pd.DataFrame:
    """Per true label: area, correctly labeled area and their ratio."""
    if confusion is None or confusion.empty:
        return pd.DataFrame(columns=["label", "area", "correct_area", "accuracy"])
    rows = []
    for label in confusion.index:
        area = float(confusion.loc[label].sum())
        correct = float(confusion.loc[label, label]) if label in confusion.columns else 0.0
        rows.append({"label": label, "area": area, "correct_area": correct, "accuracy": correct / area if area > 0 else 0.0})
    return pd.DataFrame(rows, columns=["label", "area", "correct_area", "accuracy"])


def part_accuracy(pred_names: Sequence[str], true_names: Sequence[str]) -> float:
    pred = pd.Series(list(pred_names), dtype=object)
    true = pd.Series(list(true_names), dtype=object)
    if len(pred) != len(true):
        raise DataError(f"{len(pred)} predicted part labels for {len(true)} parts")
    if pred.empty:
        return 0.0
    return float((pred == true).mean())


def cluster_purity(clusters: Sequence[int], true_types: Sequence[str]) -> float:
    """Share of parts that carry the majority true type of their cluster."""
    frame = pd.DataFrame({"cluster": list(clusters), "type": list(true_types)})
    if frame.empty:
        return 0.0
    majority = frame.groupby(["cluster", "type"]).size().groupby(level=0).max()
    return float(majority.sum() / len(frame))


@dataclass
class EvalReport:
    leaf_accuracy: Optional[float] = None
    part_accuracy: Optional[float] = None
    naive_part_accuracy: Optional[float] = None
    cluster_purity: Optional[float] = None
    hierarchy_recovered: Optional[bool] = None
    energy_ok: Optional[bool] = None          # every MRF output at or below its argmax energy
    confusion: pd.DataFrame = field(default_factory=pd.DataFrame)
    per_label: pd.DataFrame = field(default_factory=pd.DataFrame)
    timings: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> Dict[str, Optional[float | bool]]:
        out: Dict[str, Optional[float | bool]] = {
            "Leaf accuracy (area)": self.leaf_accuracy,
            "Part accuracy": self.part_accuracy,
            "Part accuracy (tags only)": self.naive_part_accuracy,
            "Cluster purity": self.cluster_purity,
            "Hierarchy recovered": self.hierarchy_recovered,
            "Energy not above argmax": self.energy_ok,
        }
        for stage, seconds in self.timings.items():
            out[f"Time {stage} (s)"] = round(seconds, 3)
        return out

    def to_markdown(self) -> str:
        summary = pd.DataFrame([{"metric": k, "value": "n/a" if v is None else v} for k, v in self.summary().items()])
        parts = ["# Evaluation", "", summary.to_markdown(index=False)]
        if not self.per_label.empty:
            parts += ["", "## Per label", "", self.per_label.to_markdown(index=False, floatfmt=".4f")]
        return "\n".join(parts) + "\n"


def write_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """report.csv (per label), confusion.csv, summary.md, summary.json and accuracy.svg."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.csv",
        "confusion": out / "confusion.csv",
        "summary": out / "summary.md",
        "metrics": out / "summary.json",
        "chart": out / "accuracy.svg",
    }
    report.per_label.to_csv(paths["report"], index=False)
    report.confusion.to_csv(paths["confusion"])
    paths["summary"].write_text(report.to_markdown(), encoding="utf-8")
    paths["metrics"].write_text(json.dumps(report.summary(), indent=1), encoding="utf-8")
    write_svg(chart_label_accuracy(report.per_label), paths["chart"])
    return paths
