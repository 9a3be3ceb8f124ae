"""Figure rendering for the report outputs.

Every report path writes delimited data first; these helpers render the
matching matplotlib figure next to it. All figures go straight to files
(Agg backend), no interactive windows.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import CutoffBin, MetricsRow


def save_sweep_figure(rows: list[MetricsRow], path: str,
                      title: str = "Threshold sweep") -> str:
    """Cutoff rate against median and tail latency across the sweep."""
    defined = [r for r in rows if r.ep50_ms is not None]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    for ax, attr, label in ((axes[0], "ep50_ms", "median latency ep50 (ms)"),
                            (axes[1], "ep90_ms", "tail latency ep90 (ms)")):
        xs = [getattr(r, attr) for r in defined]
        ys = [r.ep_cutoff_pct for r in defined]
        ax.plot(xs, ys, marker="o", ms=3, lw=1)
        ax.set_xlabel(label)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("cutoff rate (%)")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_error_bins_figure(bins: list[CutoffBin], in_speech: int,
                           path: str) -> str:
    """Histogram of cutoff counts by enclosing mid-silence duration."""
    labels = []
    counts = []
    for b in bins:
        hi = "inf" if math.isinf(b.hi_ms) else f"{b.hi_ms:.0f}"
        labels.append(f"{b.lo_ms:.0f}-{hi}")
        counts.append(b.count)
    labels.append("in speech")
    counts.append(in_speech)
    fig, ax = plt.subplots(figsize=(8, 3.6))
    ax.bar(range(len(counts)), counts, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_xlabel("mid-silence duration (ms)")
    ax.set_ylabel("cutoff errors")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_entropy_figure(entropy: np.ndarray, frame_rate_hz: float, path: str,
                        silence_mask: Optional[np.ndarray] = None) -> str:
    """Per-frame codebook entropy trace, with silence regions shaded."""
    times = np.arange(len(entropy)) / frame_rate_hz
    fig, ax = plt.subplots(figsize=(9, 3.2))
    if silence_mask is not None and len(silence_mask) == len(entropy):
        ax.fill_between(times, 0, float(np.max(entropy) if len(entropy) else 1),
                        where=silence_mask.astype(bool), color="#cccccc",
                        alpha=0.5, label="silence", step="post")
    ax.plot(times, entropy, lw=0.9, color="#a84848", label="entropy (nats)")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("stage-1 codebook entropy (nats)")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_training_figure(history: Sequence[dict], path: str) -> str:
    """Loss and validation score per epoch."""
    epochs = [row["epoch"] for row in history]
    fig, ax1 = plt.subplots(figsize=(7, 3.6))
    ax1.plot(epochs, [row["train_loss"] for row in history],
             color="#4878a8", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="#4878a8")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [row["val_score"] for row in history],
             color="#a84848", label="validation score")
    ax2.set_ylabel("validation score", color="#a84848")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
