"""Report figures written next to the CSV outputs.

Uses the object-oriented matplotlib API with the Agg canvas so nothing
depends on a display or on pyplot's global state.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _figure(width: float = 6.0, height: float | None = None, **kw) -> tuple[Figure, object]:
    if height is None:
        height = width * (np.sqrt(5.0) - 1.0) / 2.0
    fig = Figure(figsize=(width, height), dpi=120, **kw)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(111)


def _save(fig: Figure, path: str | Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    return Path(path)


def plot_projection(coords: np.ndarray, variants: Sequence[int] | None, path: str | Path,
                    explained: Sequence[float] | None = None, highlight: Sequence[int] = ()) -> Path:
    """2-D scatter of projected feature vectors, coloured by control-flow variant."""
    fig, ax = _figure(6.0, 5.0)
    c = np.asarray(variants) if variants is not None else None
    ax.scatter(coords[:, 0], coords[:, 1], c=c, cmap="tab20", s=8, alpha=0.8, linewidths=0)
    if len(highlight):
        h = np.asarray(highlight)
        ax.scatter(coords[h, 0], coords[h, 1], marker="x", c="k", s=30)
    if explained is not None:
        ax.set_xlabel(f"PC1 ({explained[0]:.1%})")
        ax.set_ylabel(f"PC2 ({explained[1]:.1%})")
    ax.set_title("Case representations")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_history(history: Sequence[dict], path: str | Path, title: str = "") -> Path:
    fig, ax = _figure()
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], label="train", marker="o", ms=3)
    ax.plot(epochs, [h["val_loss"] for h in history], label="validation", marker="s", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_breakdown(by_length: Sequence[tuple[int, int, float]], metric: str, path: str | Path,
                   title: str = "") -> Path:
    """Metric per prefix length, with prefix counts on a twin axis."""
    fig, ax = _figure()
    t = [r[0] for r in by_length]
    ax.bar(t, [r[1] for r in by_length], color="0.85", label="prefixes")
    ax.set_xlabel("prefix length")
    ax.set_ylabel("prefixes")
    ax2 = ax.twinx()
    ax2.plot(t, [r[2] for r in by_length], color="C3", marker="o", ms=3)
    ax2.set_ylabel(metric)
    if metric == "accuracy":
        ax2.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_gafs(matrices: Sequence[np.ndarray], names: Sequence[str], path: str | Path) -> Path:
    k = len(matrices)
    fig = Figure(figsize=(2.2 * k, 2.4), dpi=120)
    FigureCanvasAgg(fig)
    for i, (m, name) in enumerate(zip(matrices, names)):
        ax = fig.add_subplot(1, k, i + 1)
        ax.imshow(m, cmap="gray", vmin=-1, vmax=1)
        ax.set_title(name, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
