"""HTML figures for evaluation curves and receptive-field labels (plotly)."""
import logging
from pathlib import Path
from typing import Dict, Union

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)

LABEL_COLORS = {
    "centroid": "#d62728",
    "in_field": "#1f77b4",
    "out_of_field": "#c7c7c7",
}


def _write(fig: go.Figure, path: Union[str, Path], div_id: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed div id keeps the file stable across runs
    fig.write_html(str(path), include_plotlyjs="cdn", full_html=True, div_id=div_id)
    logger.debug("wrote figure %s", path)
    return path


def metric_curves_figure(aggregate: pd.DataFrame) -> go.Figure:
    """F-score and Chamfer distance against scale, one line per method."""
    fig = make_subplots(rows=1, cols=2, subplot_titles=("F-score", "Chamfer distance"))
    methods = aggregate["method"].unique() if "method" in aggregate.columns else [None]
    for method in methods:
        rows = aggregate if method is None else aggregate[aggregate["method"] == method]
        rows = rows.sort_values("scale")
        name = method or "model"
        fig.add_trace(go.Scatter(x=rows["scale"], y=rows["fscore"], mode="lines+markers", name=name,
                                 legendgroup=name), row=1, col=1)
        fig.add_trace(go.Scatter(x=rows["scale"], y=rows["cd"], mode="lines+markers", name=name,
                                 legendgroup=name, showlegend=False), row=1, col=2)
    fig.update_xaxes(title_text="scale factor R")
    fig.update_layout(template="plotly_white", height=420)
    return fig


def write_metric_curves(path: Union[str, Path], aggregate: pd.DataFrame) -> Path:
    return _write(metric_curves_figure(aggregate), path, "metapu-metric-curves")


def receptive_field_figure(labelled: Dict[float, pd.DataFrame]) -> go.Figure:
    """
    One 3-D scatter per scale of the labelled input cloud.

    ``labelled`` maps scale -> frame with x, y, z and label columns.
    """
    scales = sorted(labelled)
    fig = make_subplots(rows=1, cols=len(scales), specs=[[{"type": "scene"}] * len(scales)],
                        subplot_titles=[f"R={s:g}  #P={int((labelled[s]['label'] != 'out_of_field').sum())}"
                                        for s in scales])
    for col, scale in enumerate(scales, start=1):
        df = labelled[scale]
        for label, color in LABEL_COLORS.items():
            part = df[df["label"] == label]
            fig.add_trace(go.Scatter3d(x=part["x"], y=part["y"], z=part["z"], mode="markers",
                                       marker={"size": 5 if label == "centroid" else 2, "color": color},
                                       name=label, legendgroup=label, showlegend=col == 1),
                          row=1, col=col)
    fig.update_layout(template="plotly_white", height=480)
    return fig


def write_receptive_field(path: Union[str, Path], labelled: Dict[float, pd.DataFrame]) -> Path:
    return _write(receptive_field_figure(labelled), path, "metapu-receptive-field")
