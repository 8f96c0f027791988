"""Static learning-curve figures from metrics CSVs."""
from __future__ import annotations

import csv
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .rollout.engine import METRIC_COLUMNS


class PlotError(ValueError):
    pass


def read_curve(path: str | Path) -> dict[str, np.ndarray]:
    """Evaluation rows of one metrics CSV as arrays (steps, success, return)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise PlotError(f"{path}: no data (empty file)")
        if header != METRIC_COLUMNS:
            missing = [c for c in METRIC_COLUMNS if c not in header]
            extra = [c for c in header if c not in METRIC_COLUMNS]
            raise PlotError(f"{path}: schema mismatch, missing columns {missing}, unexpected columns {extra}")
        rows = [dict(zip(header, r)) for r in reader if r]
    evals = [r for r in rows if r["success_rate"] != ""]
    if not evals:
        raise PlotError(f"{path}: no data (no evaluation rows)")
    return {
        "env_steps": np.array([float(r["env_steps"]) for r in evals]),
        "success_rate": np.array([float(r["success_rate"]) for r in evals]),
        "mean_return": np.array([float(r["mean_return"]) for r in evals]),
    }


def parse_inputs(items: list[str]) -> "OrderedDict[str, list[Path]]":
    """``label=path`` items sharing a label form one group; bare paths stand alone."""
    groups: OrderedDict[str, list[Path]] = OrderedDict()
    for item in items:
        label, sep, path = item.partition("=")
        if not sep:
            path, label = item, Path(item).parent.name or Path(item).stem
            base, k = label, 2
            while label in groups:
                label, k = f"{base} ({k})", k + 1
        groups.setdefault(label, []).append(Path(path))
    return groups


def plot_curves(items: list[str], out: str | Path, title: str | None = None) -> Path:
    """One line per group (mean across members) with a min/max band for groups of two or more."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = parse_inputs(items)
    if not groups:
        raise PlotError("no input CSVs given")
    curves = {label: [read_curve(p) for p in paths] for label, paths in groups.items()}

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "jointppo", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        for label, runs in curves.items():
            steps = runs[0]["env_steps"]
            for ax, key in zip(axes, ("success_rate", "mean_return")):
                ys = np.stack([np.interp(steps, r["env_steps"], r[key]) for r in runs])
                (line,) = ax.plot(steps, ys.mean(axis=0), label=label)
                if len(runs) > 1:
                    ax.fill_between(steps, ys.min(axis=0), ys.max(axis=0), alpha=0.2, color=line.get_color())
        for ax, name in zip(axes, ("success rate", "mean return")):
            ax.set_xlabel("env_steps")
            ax.set_ylabel(name)
            ax.grid(alpha=0.3)
        axes[0].legend(loc="best", fontsize="small")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out
