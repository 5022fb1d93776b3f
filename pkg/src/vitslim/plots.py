"""Report figures rendered to files (headless matplotlib backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_metrics(metrics, path) -> Path:
    """Loss and top-1 per epoch, side by side."""
    epochs = [m.epoch for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [m.loss for m in metrics], marker="o", markersize=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2.plot(epochs, [m.top1 for m in metrics], marker="o", markersize=3, color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("top-1")
    ax2.set_ylim(0, 1.05)
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_slim_trace(trace: List[dict], target_s: float, path) -> Path:
    """Estimated latency across slimming iterations, with the target line."""
    fig, ax = plt.subplots(figsize=(6, 3.8))
    if trace:
        its = [t["iter"] for t in trace]
        lat = [t["est_latency_after_s"] * 1e3 for t in trace]
        start = trace[0]["est_latency_before_s"] * 1e3
        ax.plot([its[0] - 1] + its, [start] + lat, marker="o", markersize=3)
        for t in trace:
            ax.annotate(t["action"]["kind"], (t["iter"], t["est_latency_after_s"] * 1e3),
                        textcoords="offset points", xytext=(0, 6), fontsize=7, ha="center")
    ax.axhline(target_s * 1e3, color="tab:red", linestyle="--", label="target")
    ax.set_xlabel("iteration")
    ax.set_ylabel("estimated latency (ms)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_table(table, path) -> Path:
    """Median latency vs width, one line per (kind, resolution)."""
    series: Dict[tuple, List[tuple]] = {}
    for (kind, w, r, _exp), e in sorted(table.entries.items()):
        series.setdefault((kind, r), []).append((w, e.median_s * 1e3))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for (kind, r), pts in sorted(series.items()):
        ws, ms = zip(*pts)
        ax.plot(ws, ms, marker="o", markersize=3, label=f"{kind} @{r}")
    ax.set_xlabel("width")
    ax.set_ylabel("median latency (ms)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
