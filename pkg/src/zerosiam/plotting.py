"""SVG line plots of trajectory metrics, one file per panel.

Rendering goes through matplotlib's object API on the SVG canvas (no pyplot
state). Output is byte-deterministic: the SVG id salt is fixed per run and the
date stamp is dropped.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import List, Mapping, Sequence, Tuple

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from .diagnostics import Trajectory, moving_average

# metric name, y-axis label
PANELS: Tuple[Tuple[str, str], ...] = (
    ("batch_acc", "online accuracy"),
    ("logit_l2", "logit L2 norm"),
    ("center_dominance", "center dominance"),
    ("pred_frob_drift", "||P - I||_F"),
)

# rcParams are process-global; serialize renders so concurrent runs cannot race on them.
_RC_LOCK = threading.Lock()


def _save(fig: Figure, path: Path, run_id: str) -> None:
    with _RC_LOCK, matplotlib.rc_context({"svg.hashsalt": run_id, "svg.fonttype": "path"}):
        FigureCanvasSVG(fig)
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": f"run_id {run_id}"})


def line_panel(
    curves: Mapping[str, Tuple[Sequence[float], Sequence[float]]],
    ylabel: str,
    path,
    run_id: str,
    xlabel: str = "step",
    title: str = "",
) -> Path:
    """Draw one panel with a line per labeled ``(x, y)`` curve."""
    path = Path(path)
    fig = Figure(figsize=(4.0, 3.0))
    ax = fig.add_subplot(1, 1, 1)
    for label, (x, y) in curves.items():
        ax.plot(np.asarray(x), np.asarray(y), label=label, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=9)
    if len(curves) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path, run_id)
    return path


def render_panels(
    trajectories: Mapping[str, Trajectory],
    out_dir,
    stem: str,
    run_id: str,
    window: int = 10,
) -> List[Path]:
    """Write ``<stem>.<metric>.svg`` for each of :data:`PANELS`.

    Accuracy is smoothed with a trailing window; panels whose metric is
    undefined for every trajectory (all NaN) are skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric, ylabel in PANELS:
        curves = {}
        for label, traj in trajectories.items():
            y = traj.series(metric)
            if not np.isfinite(y).any():
                continue
            if metric == "batch_acc":
                y = moving_average(np.nan_to_num(y, nan=0.0), window)
            curves[label] = (np.arange(len(y)), y)
        if curves:
            paths.append(line_panel(curves, ylabel, out_dir / f"{stem}.{metric}.svg", run_id))
    return paths
