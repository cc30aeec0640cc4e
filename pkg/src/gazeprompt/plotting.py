"""Figures for evaluation reports.

Uses the object-oriented matplotlib API with an Agg canvas so plotting never
touches global pyplot state and is safe inside worker threads.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

REPORT_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

BAR_COLORS = ("#4c72b0", "#dd8452", "#55a868", "#c44e52")


def plot_report(rep, path: Union[str, Path], dpi: int = 120) -> Path:
    """Grouped bars of accuracy and macro P/R/F1 for every method row."""
    import matplotlib

    from .metrics import TABLE_COLUMNS

    path = Path(path)
    names = [r.name for r in rep.rows]
    values = np.array([[r.metrics.as_dict()[key] for _, key in TABLE_COLUMNS] for r in rep.rows])

    with matplotlib.rc_context(REPORT_RC):
        width_in = max(6.0, 0.9 * len(names) + 2.0)
        fig = Figure(figsize=(width_in, 3.6))
        FigureCanvasAgg(fig)
        ax = fig.add_subplot(1, 1, 1)
        x = np.arange(len(names))
        bw = 0.8 / len(TABLE_COLUMNS)
        for j, (title, _) in enumerate(TABLE_COLUMNS):
            ax.bar(x + (j - 1.5) * bw, values[:, j], bw, label=title, color=BAR_COLORS[j])
        ax.axhline(0.5, color="0.4", lw=0.8, ls="--")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=25, ha="right")
        ax.set_ylim(0, 1.2)
        ax.set_yticks(np.linspace(0, 1, 6))
        ax.set_ylabel("score")
        d = rep.distribution
        ax.set_title(f"N = {d.total}, class 0 = {d.p0:.1%}")
        ax.legend(ncol=len(TABLE_COLUMNS), loc="upper center", bbox_to_anchor=(0.5, 1.0), frameon=False)
        fig.tight_layout()
        # no Software/Date metadata: keeps reruns byte-identical
        fig.savefig(path, dpi=dpi, metadata={"Software": None})
    return path
