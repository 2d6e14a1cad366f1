"""Matplotlib figures for run reports.

Figures are written with the non-interactive Agg backend and fixed metadata
so that re-rendering the same data gives byte-identical PNG files.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "savefig.dpi": 120,
    "figure.dpi": 120,
}
_METADATA = {"Software": None}
_COLORS = {"metric": "#c0392b", "cosine": "#2c3e50"}
_LINESTYLES = ["-", "--", ":", "-."]


@contextmanager
def _figure(ncols: int = 1, width: float = 3.4, height: float = 2.8):
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
        try:
            yield fig, axes[0]
        finally:
            plt.close(fig)


def _save(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_METADATA)


def plot_pr_curves(curves: dict, path: str | os.PathLike, tasks: dict[str, str]) -> None:
    """One panel per retrieval task.

    ``curves`` maps an arm label to ``{(scorer, task): (recall, precision)}``.
    """
    with _figure(ncols=len(tasks)) as (fig, axes):
        for ax, (task, title) in zip(axes, tasks.items()):
            for k, (arm, by_key) in enumerate(curves.items()):
                for (scorer, t), (recall, precision) in sorted(by_key.items()):
                    if t != task:
                        continue
                    label = scorer if len(curves) == 1 else f"{arm}: {scorer}"
                    ax.plot(recall, precision, color=_COLORS.get(scorer),
                            linestyle=_LINESTYLES[k % len(_LINESTYLES)], label=label)
            ax.set(title=title, xlabel="Recall", ylabel="Precision", xlim=(0, 1), ylim=(0, 1.02))
            ax.legend(loc="upper right", frameon=False)
        _save(fig, path)


def plot_map_bars(rows: list[tuple[str, str, float]], path: str | os.PathLike, title: str) -> None:
    """Grouped bars: one group per task, one bar per series label."""
    tasks = list(dict.fromkeys(t for _, t, _ in rows))
    series = list(dict.fromkeys(s for s, _, _ in rows))
    values = {(s, t): v for s, t, v in rows}
    x = np.arange(len(tasks))
    width = 0.8 / max(len(series), 1)
    with _figure(width=4.2) as (fig, (ax,)):
        for k, s in enumerate(series):
            heights = [values.get((s, t), np.nan) for t in tasks]
            ax.bar(x + (k - (len(series) - 1) / 2) * width, heights, width,
                   label=s, color=_COLORS.get(s))
        ax.set_xticks(x, tasks)
        ax.set(ylabel="MAP", ylim=(0, 1), title=title)
        ax.legend(frameon=False, loc="lower right")
        _save(fig, path)


def plot_loss_histories(histories: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    """Training loss per stage, smoothed with a trailing mean over 1% of the run."""
    stages = [s for s, h in histories.items() if len(h)]
    if not stages:
        return
    with _figure(ncols=len(stages), width=2.8) as (fig, axes):
        for ax, name in zip(axes, stages):
            h = np.asarray(histories[name])
            w = max(1, len(h) // 100)
            smooth = np.convolve(h, np.ones(w) / w, mode="valid")
            ax.plot(np.arange(len(smooth)) + w, smooth, color="#2c3e50")
            ax.set(title=name, xlabel="iteration", ylabel="loss")
        _save(fig, path)
