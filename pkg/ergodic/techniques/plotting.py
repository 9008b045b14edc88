#############################################
# STATIC FIGURES                            #
#############################################
import logging

import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)

_SERIES = ("sup_error_on_compact", "oscillation_B0", "anchor_value", "weighted_norm_vs_Vstar", "mu_average")


def diagnostics_figure(frame, title=""):
    """One panel per diagnostics column that holds at least one value."""
    columns = [c for c in _SERIES if c in frame and frame[c].notna().any()]
    fig = make_subplots(rows=max(len(columns), 1), cols=1, shared_xaxes=True, subplot_titles=columns)
    for row, column in enumerate(columns, start=1):
        fig.add_trace(go.Scatter(x=frame["time"], y=frame[column], mode="lines+markers", name=column),
                      row=row, col=1)
    fig.update_xaxes(title_text="t", row=max(len(columns), 1), col=1)
    fig.update_layout(title=title, height=250 * max(len(columns), 1), showlegend=False)
    return fig


def value_figure(report, trajectory=None):
    """V* - V*(0) + rho against the final field of a run (1-D grids only)."""
    grid = report.grid
    fig = go.Figure()
    if grid.dim != 1:
        fig.add_trace(go.Heatmap(z=report.target().values.reshape(grid.shape).T,
                                 x=grid.axes[0], y=grid.axes[1]))
        return fig
    fig.add_trace(go.Scatter(x=grid.axes[0], y=report.target().values, name="V* - V*(0) + rho"))
    if trajectory is not None:
        fig.add_trace(go.Scatter(x=grid.axes[0], y=trajectory.final.values,
                                 name="%s at t = %g" % (trajectory.mode, trajectory.T)))
    fig.update_layout(xaxis_title="x")
    return fig


def write_html(frame, path, report=None, trajectory=None, title=""):
    """:return: list of written files (the value figure only when a report is given)"""
    written = [path]
    diagnostics_figure(frame, title).write_html(path, include_plotlyjs="cdn")
    if report is not None:
        written.append(path.replace(".html", "_value.html"))
        value_figure(report, trajectory).write_html(written[-1], include_plotlyjs="cdn")
    logger.info("wrote %s", ", ".join(written))
    return written
