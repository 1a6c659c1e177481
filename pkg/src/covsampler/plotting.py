"""Metric-vs-NFE line plots written as deterministic SVG."""

from __future__ import annotations

import io
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS = ("mean_err", "cov_err", "spectrum_err", "sw_dist", "energy_dist")
METRIC_LABELS = {
    "mean_err": "mean error (L2)",
    "cov_err": "covariance error (rel. Frobenius)",
    "spectrum_err": "spectrum error (mean rel.)",
    "sw_dist": "sliced W2",
    "energy_dist": "energy distance",
}

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
WIDTH_IN = 5.0

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "figure.figsize": (WIDTH_IN, WIDTH_IN * GOLDEN),
    # fixed ids and no timestamp keep the SVG byte-stable
    "svg.hashsalt": "covsampler",
    "svg.fonttype": "path",
}


def series_label(row: dict) -> str:
    if row["sampler"] == "covaware":
        return f"covaware/{row['transform']}/{row['averaging']}"
    return row["sampler"]


def group_series(rows, metric: str) -> dict:
    """``label -> (nfe array, seed-averaged metric array)``, NFE ascending."""
    acc = defaultdict(lambda: defaultdict(list))
    for row in rows:
        acc[series_label(row)][int(row["nfe"])].append(float(row[metric]))
    out = {}
    for label in sorted(acc):
        nfes = sorted(acc[label])
        out[label] = (np.array(nfes), np.array([np.mean(acc[label][n]) for n in nfes]))
    return out


def metric_figure(rows, metric: str):
    """One line per sampler (and covaware transform/averaging) against NFE."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (nfe, vals) in group_series(rows, metric).items():
            ax.plot(nfe, vals, marker="o", label=label)
        ax.set_xlabel("NFE")
        ax.set_ylabel(METRIC_LABELS.get(metric, metric))
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
    return fig


def figure_svg(fig) -> bytes:
    buf = io.BytesIO()
    with plt.rc_context(STYLE):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()
