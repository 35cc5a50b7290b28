"""Static SVG figures rendered next to the delimited report files.

Uses the Agg backend with a fixed svg hashsalt and no embedded date, so
re-running a command reproduces the figure byte for byte.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "mvhash"

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def save_curves(records: Sequence, path: str | Path) -> None:
    """Training loss curves with the test-mAP trajectory on a twin axis."""
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r.l_total for r in records], label="total loss", color="C0")
    ax.plot(epochs, [r.l_sim for r in records], label="similarity loss",
            color="C1", linestyle="--", linewidth=1)
    ax.plot(epochs, [r.l_clf for r in records], label="classifier loss",
            color="C2", linestyle=":", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    evaluated = [(r.epoch, r.map) for r in records if r.map is not None]
    if evaluated:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evaluated), label="test mAP", color="C3", marker="o",
                 markersize=3)
        ax2.set_ylabel("mAP")
        ax2.set_ylim(0, 1.05)
        lines, labels = ax.get_legend_handles_labels()
        lines2, labels2 = ax2.get_legend_handles_labels()
        ax.legend(lines + lines2, labels + labels2, loc="center right", fontsize=8)
    else:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_ablation_chart(table: dict[str, dict[int, float]], path: str | Path) -> None:
    """Grouped bars: one group per bit width, one bar per variant."""
    variants = list(table)
    bits = sorted({b for row in table.values() for b in row})
    fig, ax = plt.subplots(figsize=(1.2 + 1.6 * len(bits), 4.5))
    width = 0.8 / max(len(variants), 1)
    for i, variant in enumerate(variants):
        xs = [j + i * width for j in range(len(bits))]
        ys = [table[variant].get(b, 0.0) for b in bits]
        ax.bar(xs, ys, width=width, label=variant)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(bits))])
    ax.set_xticklabels([f"{b} bits" for b in bits])
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    _save(fig, path)


def save_precision_curve(precision_at: Sequence[tuple[int, float]],
                         path: str | Path) -> None:
    rs = [r for r, _ in precision_at]
    ps = [p for _, p in precision_at]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rs, ps, marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("R (retrieved items)")
    ax.set_ylabel("precision@R")
    ax.set_ylim(0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
