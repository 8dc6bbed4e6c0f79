"""PNG figures written next to run and sweep outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from .metrics_io import MetricsReport


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_exit_table(report: MetricsReport, path: str | Path) -> None:
    """Bar chart of served exit-layer shares, one group per model."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels, values = [], []
    for model, row in report.exit_table.items():
        for layer, pct in sorted(row.items()):
            labels.append(f"{model}\nL{layer}")
            values.append(pct)
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("share of tokens (%)")
    ax.set_title(f"exit layers ({report.mode})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_memory_timeline(report: MetricsReport, path: str | Path, capacity_bytes: float | None = None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3))
    if report.memory_timeline:
        t, b = zip(*report.memory_timeline)
        ax.step(t, [x / 1e9 for x in b], where="post", lw=1)
    if capacity_bytes:
        ax.axhline(capacity_bytes / 1e9, color="k", ls="--", lw=0.8, label="capacity")
        ax.legend(loc="lower right", fontsize=8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("occupancy (GB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(param: str, values: Sequence[float], series: Mapping[str, Sequence[float | None]],
               path: str | Path) -> None:
    """Throughput against the swept parameter, one line per mode."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, ys in series.items():
        pts = [(x, y) for x, y in zip(values, ys) if y is not None]
        if pts:
            xs, vs = zip(*pts)
            ax.plot(xs, vs, marker="o", label=mode)
    ax.set_xlabel(param)
    ax.set_ylabel("throughput (tok/s)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
