"""Comparison tables and figures built from evaluated run directories.

``build_report`` accepts either one run directory or a directory whose
subdirectories are runs (for example the two arms of a pretraining
ablation).  It writes ``report.txt`` plus PNG figures next to it.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from . import plotting
from .evaluation import TASKS
from .pipeline import read_history, read_pr, read_summary

TASK_NAMES = list(TASKS.values()) + ["Average"]


def find_runs(path: Path) -> dict[str, Path]:
    if (path / "eval" / "summary.csv").exists():
        return {path.name: path}
    return {p.name: p for p in sorted(path.iterdir())
            if p.is_dir() and (p / "eval" / "summary.csv").exists()}


def _skip_pretrain(run: Path) -> bool | None:
    cfg = run / "config.json"
    if not cfg.exists():
        return None
    return bool(json.loads(cfg.read_text()).get("skip_pretrain", False))


def metric_vs_cosine_table(runs: dict[str, Path]) -> tuple[list[str], list[str]]:
    """Rows of the cosine-vs-metric comparison plus any flagged inversions."""
    lines = [f"{'Run':<20} {'Task':<12} {'Cosine':>8} {'Metric':>8}"]
    notes = []
    for name, run in runs.items():
        s = read_summary(run)
        for task in TASK_NAMES:
            cos = s.get("cosine", {}).get(task)
            met = s.get("metric", {}).get(task)
            lines.append(f"{name:<20} {task:<12} {_cell(cos)} {_cell(met)}")
            if cos is not None and met is not None and met < cos:
                notes.append(f"note: {name} {task}: metric network below cosine "
                             f"({met:.3f} < {cos:.3f})")
    return lines, notes


def pretrain_table(runs: dict[str, Path], scorer: str = "metric") -> list[str] | None:
    arms = {}
    for name, run in runs.items():
        flag = _skip_pretrain(run)
        if flag is not None:
            arms.setdefault(flag, (name, run))
    if set(arms) != {True, False}:
        return None
    lines = [f"{'Method':<28} " + " ".join(f"{t:>12}" for t in TASK_NAMES)]
    for flag, label in ((True, "without pretrain"), (False, "with pretrain")):
        name, run = arms[flag]
        s = read_summary(run).get(scorer, {})
        lines.append(f"{label + ' (' + name + ')':<28} "
                     + " ".join(f"{_cell(s.get(t), 12)}" for t in TASK_NAMES))
    return lines


def _cell(v: float | None, width: int = 8) -> str:
    return f"{'-':>{width}}" if v is None else f"{v:>{width}.3f}"


def build_report(path: str | os.PathLike, out: str | os.PathLike | None = None) -> Path:
    path = Path(path)
    runs = find_runs(path)
    if not runs:
        raise FileNotFoundError(f"no evaluated runs under {path}")
    out_dir = Path(out) if out is not None else path
    out_dir.mkdir(parents=True, exist_ok=True)

    text = ["MAP on the test split: cosine similarity vs metric network", ""]
    table, notes = metric_vs_cosine_table(runs)
    text += table + [""] + notes + ([""] if notes else [])

    ablation = pretrain_table(runs)
    if ablation is not None:
        text += ["MAP of the metric network with and without contrastive pretraining", ""]
        text += ablation + [""]
    elif len(runs) > 1:
        text += ["notice: pretraining comparison skipped (needs one run with and one "
                 "without pretraining)", ""]

    curves = {}
    for name, run in runs.items():
        by_key = {}
        for scorer in read_summary(run):
            for task in TASKS:
                by_key[(scorer, task)] = read_pr(run, scorer, task)
        curves[name] = by_key
    plotting.plot_pr_curves(curves, out_dir / "pr_curves.png", TASKS)
    figures = ["pr_curves.png"]

    rows = []
    for name, run in runs.items():
        for scorer, by_task in read_summary(run).items():
            label = scorer if len(runs) == 1 else f"{name}/{scorer}"
            rows += [(label, t, v) for t, v in by_task.items()]
    plotting.plot_map_bars(rows, out_dir / "map.png", "Test MAP")
    figures.append("map.png")

    for name, run in runs.items():
        hist = {}
        for stage in ("pretrain", "finetune", "metric"):
            f = run / "history" / f"{stage}.csv"
            if f.exists():
                hist[stage] = read_history(f)
        fname = f"loss_{name}.png"
        plotting.plot_loss_histories(hist, out_dir / fname)
        if (out_dir / fname).exists():
            figures.append(fname)

    text += ["figures: " + ", ".join(figures)]
    report = out_dir / "report.txt"
    report.write_text("\n".join(text) + "\n")
    return report
