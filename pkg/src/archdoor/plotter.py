"""Plotly figures of experiment results.

Training curves show task and triggered accuracy per epoch, one trace per
arm and seed. The summary figure shows per-arm medians with inter-quartile
error bars. Figures are written as HTML and, through kaleido, as static
images.

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import logging
from io import BytesIO
from pathlib import Path
from typing import Union

import plotly.colors as colors
import plotly.graph_objects as go
from plotly.graph_objects import Figure
from plotly.subplots import make_subplots

from archdoor.experiments import ArmSummary, ExperimentResult
from archdoor.miscellaneous import atomic_write
from archdoor.training import RunHistory

logger = logging.getLogger(__name__)

ARM_COLORS = {
    "none": colors.qualitative.Plotly[0],
    "badnets": colors.qualitative.Plotly[1],
    "mab-naive": colors.qualitative.Plotly[2],
    "mab-robust": colors.qualitative.Plotly[3],
}
METRICS = (("task_acc", "Task accuracy"), ("trig_acc", "Triggered accuracy"))


# = FUNCTIONS FOR TRAINING CURVES =======================================================
def get_arm_color(arm: str) -> str:
    return ARM_COLORS.get(arm, colors.qualitative.Plotly[-1])


def plot_history(
    fig: Figure,
    history: RunHistory,
    arm: str,
    seed: int,
    show_legend: bool = False,
) -> Figure:
    """Add task (left) and triggered (right) accuracy traces of one run."""
    frame = history.to_frame()
    for column, (metric, _) in enumerate(METRICS, start=1):
        fig.add_trace(
            go.Scatter(
                x=frame["epoch"],
                y=frame[metric],
                mode="lines+markers",
                name=arm,
                legendgroup=arm,
                showlegend=show_legend and column == 1,
                line=dict(color=get_arm_color(arm), width=1.5),
                marker=dict(size=4),
                customdata=[seed] * len(frame),
                hovertemplate=f"<b>{arm}</b> seed %{{customdata}}<br>"
                "epoch %{x}: %{y:.1%}<extra></extra>",
            ),
            row=1,
            col=column,
        )
    return fig


def make_training_curves(result: ExperimentResult) -> Figure:
    """Accuracy per epoch for every arm and seed."""
    fig = make_subplots(
        rows=1, cols=2, shared_yaxes=True, subplot_titles=[title for _, title in METRICS]
    )
    legend_shown = set()
    for record in result.records:
        show_legend = record.arm not in legend_shown
        plot_history(fig, record.history, record.arm, record.seed, show_legend)
        legend_shown.add(record.arm)
    fig.update_xaxes(title_text="Epoch", showgrid=False)
    fig.update_yaxes(range=[0, 1.02], tickformat=".0%")
    fig.update_layout(
        title=dict(text=f"{result.config.name}: setting {result.config.setting}"),
        plot_bgcolor="white",
        legend=dict(title=dict(text="Attack")),
    )
    return fig


# = FUNCTIONS FOR SUMMARIES =============================================================
def _error_bars(summary_field) -> dict:
    return dict(
        type="data",
        symmetric=False,
        array=[summary_field.q3 - summary_field.median],
        arrayminus=[summary_field.median - summary_field.q1],
    )


def plot_arm_summary(fig: Figure, arm: str, summary: ArmSummary) -> Figure:
    """Median task and triggered accuracy of one arm with IQR error bars."""
    for metric, (_, title) in zip((summary.task, summary.triggered), METRICS):
        fig.add_trace(
            go.Bar(
                x=[title],
                y=[metric.median],
                name=arm,
                legendgroup=arm,
                showlegend=title == METRICS[0][1],
                marker=dict(color=get_arm_color(arm)),
                error_y=_error_bars(metric),
                hovertemplate=f"<b>{arm}</b><br>%{{x}}: %{{y:.1%}}<extra></extra>",
            )
        )
    return fig


def make_summary_figure(result: ExperimentResult) -> Figure:
    """Grouped bars of per-arm medians; error bars span the inter-quartile range."""
    fig = go.Figure()
    for arm, summary in result.aggregates.items():
        plot_arm_summary(fig, arm, summary)
    fig.update_layout(
        barmode="group",
        title=dict(text=f"{result.config.name}: median over {len(result.config.seeds)} seeds"),
        yaxis=dict(range=[0, 1.05], tickformat=".0%", title=dict(text="Accuracy")),
        plot_bgcolor="white",
    )
    return fig


# = WRITING =============================================================================
def write_figure(
    fig: Figure,
    stem: Union[str, Path],
    image_format: Union[str, None] = "png",
    scale: float = 2.0,
) -> list[Path]:
    """Write `stem.html` and, when kaleido works, `stem.<image_format>`."""
    stem = Path(stem)
    written = []
    html_path = stem.with_suffix(".html")
    with atomic_write(html_path) as stream:
        stream.write(fig.to_html(include_plotlyjs="cdn", full_html=True))
    written.append(html_path)
    if image_format is None:
        return written

    buffer = BytesIO()
    try:
        fig.write_image(buffer, format=image_format, scale=scale, engine="kaleido")
    except Exception as error:  # kaleido backends raise their own error types
        logger.warning("Static %s export skipped: %s", image_format, error)
        return written
    image_path = stem.with_suffix(f".{image_format}")
    with atomic_write(image_path, "wb") as stream:
        stream.write(buffer.getvalue())
    written.append(image_path)
    return written


def write_figures(
    result: ExperimentResult,
    output_dir: Union[str, Path],
    image_format: Union[str, None] = "png",
) -> list[Path]:
    """Training curves and summary of an experiment under `output_dir/figures`."""
    figures_dir = Path(output_dir) / "figures"
    written = write_figure(
        make_training_curves(result), figures_dir / "training_curves", image_format
    )
    written += write_figure(make_summary_figure(result), figures_dir / "summary", image_format)
    logger.info("Wrote %d figure files to %s", len(written), figures_dir)
    return written
