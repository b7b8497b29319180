"""Report figures rendered straight to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_history(history, path) -> Path:
    """Objective and reconstruction per epoch, with the anneal weight."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.set_xlabel("epoch")
    ax.set_ylabel("objective")
    if history:
        epochs = np.arange(len(history))
        ax.plot(epochs, [h.total for h in history], color="C0", label="total")
        ax.plot(
            epochs, [h.l_rec for h in history], color="C1", alpha=0.8, label="reconstruction"
        )
        ax2 = ax.twinx()
        ax2.plot(epochs, [h.beta for h in history], color="C2", ls="--", label="beta")
        ax2.set_ylabel("beta")
        ax2.set_ylim(0.0, 1.05)
        handles, labels = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(handles + h2, labels + l2, loc="lower right", fontsize="small")
    else:
        ax.text(0.5, 0.5, "no epochs", ha="center", va="center", transform=ax.transAxes)
    fig.tight_layout()
    return _finish(fig, path)


def plot_forecast(report, path, max_cols: int = 4) -> Path:
    """Predicted vs observed traces for the first few columns."""
    t_steps, d = report.predictions.shape
    cols = list(range(min(d, max_cols)))
    fig, axes = plt.subplots(
        len(cols), 1, figsize=(7.0, 2.0 * len(cols)), sharex=True, squeeze=False
    )
    x = np.arange(t_steps)
    for ax, j in zip(axes[:, 0], cols):
        actual = np.where(report.mask[:, j], report.actuals[:, j], np.nan)
        ax.plot(x, actual, color="C0", marker=".", ms=3, lw=1.0, label="actual")
        ax.plot(x, report.predictions[:, j], color="C3", alpha=0.8, lw=1.0, label="predicted")
        ax.set_ylabel(f"d={j}", fontsize="small")
    axes[0, 0].legend(loc="upper right", fontsize="small")
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    return _finish(fig, path)


def plot_clusters(z0_mean, labels, path) -> Path:
    """Scatter of per-instance initial-state means colored by cluster."""
    z = np.asarray(z0_mean, dtype=np.float64)
    if z.shape[1] < 2:
        z = np.column_stack([z[:, 0], np.zeros(z.shape[0])])
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    for lab in np.unique(labels):
        pts = z[labels == lab]
        ax.scatter(pts[:, 0], pts[:, 1], s=20, label=f"cluster {lab}")
    ax.set_xlabel("z0 mean, dim 0")
    ax.set_ylabel("z0 mean, dim 1")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return _finish(fig, path)


def plot_preview(data, path, max_cols: int = 8) -> Path:
    """First instance's traces; missing cells leave gaps."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    x = np.arange(data.t)
    for j in range(min(data.d, max_cols)):
        y = np.where(data.mask[0, :, j], data.values[0, :, j], np.nan)
        ax.plot(x, y, alpha=0.8, lw=1.0, label=f"d={j}")
    ax.set_xlabel("t")
    ax.set_ylabel("value")
    ax.set_title(f"instance {data.instance_ids[0]}")
    ax.legend(ncol=2, fontsize="small")
    fig.tight_layout()
    return _finish(fig, path)
