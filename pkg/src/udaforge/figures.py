"""Report figures rendered next to the delimited outputs.

Everything draws through the Agg backend with pinned metadata so identical
inputs give byte-identical PNGs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .kspace import CLASS_NAMES
from .metrics import METRIC_NAMES

_SAVE_KW = dict(dpi=120, metadata={"Software": "uda-forge"})

MODE_TITLES = {
    "source_only": "train on source",
    "uda": "adapted",
    "target_supervised": "train on target",
}


def render_gap_bars(modes, coverage, path):
    """Grouped bars: lower / adapted / ceiling per metric, coverage annotated."""
    fig, ax = plt.subplots(figsize=(7.5, 4.0))
    x = np.arange(len(METRIC_NAMES))
    width = 0.26
    for i, mode in enumerate(("source_only", "uda", "target_supervised")):
        if mode not in modes:
            continue
        vals = [100.0 * modes[mode][m]["mean"] for m in METRIC_NAMES]
        errs = [
            100.0 * (modes[mode][m]["std"] or 0.0) for m in METRIC_NAMES
        ]
        ax.bar(x + (i - 1) * width, vals, width, yerr=errs, capsize=2,
               label=MODE_TITLES[mode])
    if coverage and coverage.get("accuracy") is not None:
        ax.set_title(f"domain gap coverage (accuracy): {coverage['accuracy']:.2f}")
    ax.set_xticks(x, METRIC_NAMES)
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_feature_scatter(points, labels, domains, path):
    """Two panels of the same 2-D projection: colored by domain and by class."""
    points = np.asarray(points)
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.2), sharex=True, sharey=True)
    for dom, name, color in ((0, "source", "tab:blue"), (1, "target", "tab:red")):
        m = domains == dom
        axes[0].scatter(points[m, 0], points[m, 1], s=6, alpha=0.6,
                        color=color, label=name, linewidths=0)
    axes[0].set_title("by domain")
    axes[0].legend(fontsize=8)
    cmap = plt.get_cmap("tab10")
    for c in range(5):
        m = labels == c
        axes[1].scatter(points[m, 0], points[m, 1], s=6, alpha=0.6,
                        color=cmap(c), label=CLASS_NAMES[c], linewidths=0)
    axes[1].set_title("by class")
    axes[1].legend(fontsize=7)
    for ax in axes:
        ax.set_xlabel("pc 1")
    axes[0].set_ylabel("pc 2")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_distance_trend(trend, path):
    """Per-iteration critic distance estimate over training."""
    trend = np.asarray(trend, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7.0, 3.5))
    ax.plot(trend[:, 0], trend[:, 1], lw=0.9)
    ax.set_xlabel("iteration")
    ax.set_ylabel("estimated distance")
    ax.set_title("critic distance estimate")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_training_curves(steps, path):
    """CE and distance estimate per optimizer step from a train log."""
    it = [r["iteration"] for r in steps]
    fig, axes = plt.subplots(2, 1, figsize=(7.0, 5.0), sharex=True)
    axes[0].plot(it, [r["ce"] for r in steps], lw=0.9)
    axes[0].set_ylabel("cross-entropy")
    axes[1].plot(it, [r["wasserstein"] for r in steps], lw=0.9)
    axes[1].set_ylabel("distance estimate")
    axes[1].set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
