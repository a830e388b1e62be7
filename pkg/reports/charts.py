# reports/charts.py
from __future__ import annotations

import logging
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go

logger = logging.getLogger(__name__)


def _pct(x):
    if x is None:
        return []
    s = pd.Series(x, dtype="float64")
    return (s * 100.0).tolist()


def chart_label_accuracy(per_label: pd.DataFrame, title: str = "Leaf accuracy by label") -> go.Figure:
    """One bar per true leaf label: share of its surface area labeled correctly."""
    if per_label is None or per_label.empty:
        return go.Figure()

    x = per_label["label"].astype(str).tolist()
    y = _pct(per_label["accuracy"])

    fig = go.Figure()
    fig.add_trace(go.Bar(
        x=x, y=y, name="Accuracy",
        text=[f"{v:.1f}%" for v in y], textposition="outside",
        hovertemplate="%{y:.1f}%<extra>%{x}</extra>",
    ))
    fig.update_yaxes(title_text="Area labeled correctly", range=[0, 110], ticksuffix="%")
    fig.update_xaxes(title_text="Label")
    fig.update_layout(
        title=title,
        margin=dict(l=10, r=10, t=70, b=30),
        showlegend=False,
    )
    return fig


def write_svg(fig: go.Figure, path: str | Path, width: int = 900, height: int = 500) -> None:
    """Static SVG export (kaleido)."""
    fig.write_image(str(path), format="svg", width=width, height=height)
    logger.debug("wrote chart %s", path)
