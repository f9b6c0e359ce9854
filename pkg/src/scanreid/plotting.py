"""Report figures. Uses the Agg backend so nothing needs a display."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import atomic_write  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 120,
}


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight")
    plt.close(fig)
    atomic_write(Path(path), buf.getvalue())


def plot_cmc(curves: dict, path, title="CMC"):
    """``curves`` maps a label to a list of rank-r accuracies (r from 1)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for label, curve in curves.items():
            ax.plot(range(1, len(curve) + 1), curve, marker="o", ms=3, label=label)
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate")
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        if len(curves) > 1:
            ax.legend(frameon=False, fontsize=7)
        _save(fig, path)


def plot_sweep(rates, top1, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot([100 * r for r in rates], top1, marker="s", ms=4)
        ax.set_xlabel("ensemble rate (%)")
        ax.set_ylabel("top-1")
        ax.set_title("top-1 vs ensemble rate")
        _save(fig, path)


def plot_ablation(names, top1, path, errors=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 3.0))
        ax.bar(range(len(names)), top1, yerr=errors, capsize=3, color="0.55")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=35, ha="right")
        ax.set_ylabel("top-1")
        ax.set_ylim(0, 1.05)
        _save(fig, path)


def plot_history(history, path):
    """Training curves from a list of EpochStats."""
    epochs = [h.epoch for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot(epochs, [h.bce for h in history], label="bce")
        ax.plot(epochs, [h.oim for h in history], label="oim")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        _save(fig, path)
