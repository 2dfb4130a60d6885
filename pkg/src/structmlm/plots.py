"""Figure rendering for the report paths.

Every figure lands next to its delimited counterpart (loss curve CSV,
heatmap CSV, stats CSV), so outputs stay scriptable while staying visible.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(path: Union[str, Path], curve: Sequence[Tuple[int, float]], title: str = "training loss") -> None:
    steps = [s for s, _ in curve]
    losses = [v for _, v in curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("masked cross entropy (nats)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_heatmap(path: Union[str, Path], labels: Sequence[str], matrix: np.ndarray, title: str = "attention") -> None:
    fig, ax = plt.subplots(figsize=(max(5, 0.4 * len(labels)), max(4, 0.4 * len(labels))))
    im = ax.imshow(matrix, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(labels)))
    ax.set_yticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metric_histograms(path: Union[str, Path], values: Dict[str, List[float]]) -> None:
    """One histogram panel per corpus metric."""
    names = list(values)
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.2))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        ax.hist(values[name], bins=min(20, max(5, len(values[name]) // 2)), color="#4878a8")
        ax.set_title(name, fontsize=10)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_report_comparison(path: Union[str, Path], a, b) -> None:
    """Grouped bars of the two directional means for two attention reports."""
    directions = ["header_to_keyword", "keyword_to_header"]
    a_vals = [a.header_to_keyword, a.keyword_to_header]
    b_vals = [b.header_to_keyword, b.keyword_to_header]
    x = np.arange(len(directions))
    width = 0.35
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - width / 2, a_vals, width, label=a.model_id)
    ax.bar(x + width / 2, b_vals, width, label=b.model_id)
    ax.set_xticks(x)
    ax.set_xticklabels([d.replace("_", " ") for d in directions])
    ax.set_ylabel("mean attention weight")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
