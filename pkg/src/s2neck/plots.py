"""Standalone SVG figures: precision-recall curves and ablation bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "s2neck"


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def pr_curves(path: str | Path, recall, curves: dict[str, list[float]], title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, precision in curves.items():
        ax.plot(recall, precision, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left")
    _save(fig, Path(path))


def ablation_bars(path: str | Path, rows: list[dict], metrics=("AP", "AP_S", "AP_M", "AP_L")) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    n = len(rows)
    width = 0.8 / max(n, 1)
    for i, row in enumerate(rows):
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, [float(row[m]) for m in metrics], width, label=row["variant"])
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(metrics))])
    ax.set_xticklabels(metrics)
    ax.set_ylabel("AP")
    ax.legend()
    _save(fig, Path(path))
