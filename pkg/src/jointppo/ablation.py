"""Ablation grids over the three studied axes, with per-cell resume."""
from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import Field, model_validator

from .config import RunConfig, _Strict

log = logging.getLogger(__name__)

Axis = Literal["epochs_clip", "entropy_weight", "agent_order"]

RESULT_COLUMNS = [
    "cell", "seed_index", "seed", "ppo_epochs", "clip_eps", "lambda2", "agent_order_mode",
    "final_success", "average_success", "final_return", "status",
]


class AblationGrid(_Strict):
    """A named sweep along one axis.

    ``values`` depends on ``axis``: ``{"ppo_epochs": [...], "clip_eps": [...]}``
    for ``epochs_clip`` (full cross product), a list of entropy weights for
    ``entropy_weight``, a list of order modes for ``agent_order``.
    """

    name: str
    axis: Axis
    values: Any
    seeds: int = Field(5, ge=1)
    seed: int = 0
    base: dict[str, Any]

    @model_validator(mode="after")
    def _shape(self):
        v = self.values
        if self.axis == "epochs_clip":
            if not isinstance(v, dict) or set(v) != {"ppo_epochs", "clip_eps"} or not all(v.values()):
                raise ValueError("epochs_clip values need non-empty 'ppo_epochs' and 'clip_eps' lists")
        elif not isinstance(v, list) or not v:
            raise ValueError(f"{self.axis} values must be a non-empty list")
        return self

    def cells(self) -> list[dict[str, Any]]:
        if self.axis == "epochs_clip":
            return [{"ppo_epochs": e, "loss": {"clip_eps": c}}
                    for e, c in itertools.product(self.values["ppo_epochs"], self.values["clip_eps"])]
        if self.axis == "entropy_weight":
            return [{"loss": {"lambda2": w}} for w in self.values]
        return [{"agent_order_mode": m} for m in self.values]

    def sub_seed(self, cell: int, seed_index: int) -> int:
        # spawn keys make every (cell, seed) stream independent of every other
        ss = np.random.SeedSequence(self.seed, spawn_key=(cell, seed_index))
        return int(ss.generate_state(1)[0])


def cell_label(update: dict[str, Any]) -> str:
    flat = _flatten(update)
    return "_".join(f"{k.split('.')[-1]}={v}" for k, v in flat.items())


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class CellJob:
    cell: int
    seed_index: int
    config: dict[str, Any]
    out_dir: Path


def _run_job(job: CellJob) -> dict[str, Any]:
    from .rollout import run

    summary_path = job.out_dir / "summary.json"
    if summary_path.exists():
        return {**json.loads(summary_path.read_text()), "status": "ok (resumed)"}
    try:
        cfg = RunConfig(**job.config)
        result = run(cfg, job.out_dir)
        return {**result.summary(), "status": "ok"}
    except Exception as exc:  # one bad cell must not sink the grid
        msg = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        job.out_dir.mkdir(parents=True, exist_ok=True)
        (job.out_dir / "FAILED").write_text(msg + "\n")
        return {"status": msg}


def plan(grid: AblationGrid, root: Path) -> list[CellJob]:
    jobs = []
    for c, update in enumerate(grid.cells()):
        label = f"cell{c:02d}_{cell_label(update)}"
        for s in range(grid.seeds):
            seed = grid.sub_seed(c, s)
            config = merge(grid.base, update)
            config.update(seed=seed, run_name=f"{grid.name}-{label}-s{s}")
            jobs.append(CellJob(c, s, config, root / label / f"seed{s}"))
    return jobs


def run_grid(grid: AblationGrid, root: str | Path, workers: int = 1) -> tuple[list[dict], bool]:
    """Run (or resume) every cell; writes ``results.csv`` under ``root``.

    Returns the table rows and whether every run succeeded.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "grid.json").write_text(json.dumps(grid.model_dump(mode="json"), indent=2) + "\n")
    jobs = plan(grid, root)
    # validate every cell before spending compute on any of them
    for job in jobs:
        RunConfig(**job.config)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_run_job, jobs))
    else:
        outcomes = [_run_job(job) for job in jobs]

    rows = []
    for job, outcome in zip(jobs, outcomes):
        cfg = RunConfig(**job.config)
        rows.append({
            "cell": job.cell,
            "seed_index": job.seed_index,
            "seed": cfg.seed,
            "ppo_epochs": cfg.ppo_epochs,
            "clip_eps": cfg.loss.clip_eps,
            "lambda2": cfg.loss.lambda2,
            "agent_order_mode": cfg.agent_order_mode,
            "final_success": outcome.get("final_success"),
            "average_success": outcome.get("average_success"),
            "final_return": outcome.get("final_return"),
            "status": outcome["status"],
        })
    table = rows + medians(rows)
    with (root / "results.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, RESULT_COLUMNS)
        writer.writeheader()
        for row in table:
            writer.writerow({k: "" if row.get(k) is None else row[k] for k in RESULT_COLUMNS})
    ok = all(r["status"].startswith("ok") for r in rows)
    return table, ok


def medians(rows: list[dict]) -> list[dict]:
    out = []
    for cell, group in itertools.groupby(sorted(rows, key=lambda r: r["cell"]), key=lambda r: r["cell"]):
        group = list(group)
        done = [r for r in group if r["status"].startswith("ok")]
        agg = {k: group[0][k] for k in ("cell", "ppo_epochs", "clip_eps", "lambda2", "agent_order_mode")}
        agg.update(seed_index="median", seed="", status=f"{len(done)}/{len(group)} ok")
        for key in ("final_success", "average_success", "final_return"):
            agg[key] = float(np.median([r[key] for r in done])) if done else None
        out.append(agg)
    return out
