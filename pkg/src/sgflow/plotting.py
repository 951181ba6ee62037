"""Static figures for training curves and evaluation reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport, degree_histogram  # noqa: E402
from .scene import SceneGraph  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(history: Sequence[dict], path) -> Path:
    """Per-epoch L_n, L_e, L_m and their sum; L_m on its own axis."""
    with plt.rc_context(_STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.2))
        ep = [h["epoch"] for h in history]
        ax0.plot(ep, [h["L_m"] for h in history], color="tab:blue", label="L_m")
        ax0.plot(ep, [h["L"] for h in history], color="black", lw=1, ls="--", label="L")
        ax0.set_xlabel("epoch")
        ax0.set_ylabel("loss")
        ax0.legend(frameon=False)
        ax1.plot(ep, [h["L_n"] for h in history], color="tab:orange", label="L_n")
        ax1.plot(ep, [h["L_e"] for h in history], color="tab:green", label="L_e")
        ax1.set_xlabel("epoch")
        ax1.set_yscale("log")
        ax1.legend(frameon=False)
        return _save(fig, path)


def plot_report(report: EvalReport, path) -> Path:
    keys = [("node_validity", "node val."), ("edge_validity", "edge val."),
            ("uniqueness", "uniq."), ("diversity", "div.")]
    vals = [getattr(report, k) for k, _ in keys]
    with plt.rc_context(_STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7, 3), gridspec_kw={"width_ratios": [2, 1]})
        x = np.arange(len(keys))
        ax0.bar(x, np.nan_to_num(vals), color="tab:blue")
        ax0.set_xticks(x, [lbl for _, lbl in keys])
        ax0.set_ylim(0, 105)
        ax0.set_ylabel("%")
        for xi, v in zip(x, vals):
            ax0.text(xi, np.nan_to_num(v) + 1.5, "n/a" if np.isnan(v) else f"{v:.1f}", ha="center", fontsize=8)
        ax1.bar([0, 1], np.nan_to_num([report.mmd_degree, report.mmd_cluster]), color="tab:gray")
        ax1.set_xticks([0, 1], ["MMD deg.", "MMD clus."])
        return _save(fig, path)


def plot_degree_comparison(generated: Sequence[SceneGraph], reference: Sequence[SceneGraph], path) -> Path:
    """Mean normalized degree histogram of two graph sets."""
    def mean_hist(graphs):
        hs = [degree_histogram(g) for g in graphs]
        width = max(len(h) for h in hs)
        return np.mean([np.pad(h, (0, width - len(h))) for h in hs], axis=0)

    a, b = mean_hist(generated), mean_hist(reference)
    width = max(len(a), len(b))
    a, b = np.pad(a, (0, width - len(a))), np.pad(b, (0, width - len(b)))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        x = np.arange(width)
        ax.bar(x - 0.2, a, width=0.4, label="generated", color="tab:blue")
        ax.bar(x + 0.2, b, width=0.4, label="reference", color="tab:orange")
        ax.set_xlabel("degree")
        ax.set_ylabel("fraction of nodes")
        ax.legend(frameon=False)
        return _save(fig, path)
