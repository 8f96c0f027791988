"""Command-line entry point: ``jointppo {train,eval,ablate,plot,gradcheck}``.

Every failure exits nonzero with one line on stderr of the form
``jointppo: error: <kind>: <detail>``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np
from pydantic import Field, ValidationError

from .config import LossConfig, NetConfig, RunConfig, _Strict, unwrap_snapshot

OUTPUT_ROOT_ENV = "JOINTPPO_OUTPUT_ROOT"
NESTED = ("gae", "loss", "net", "env")

EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 1, 2, 3


class CliError(Exception):
    def __init__(self, kind: str, detail: str, code: int = EXIT_USAGE):
        super().__init__(detail)
        self.kind, self.detail, self.code = kind, detail, code


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


# -- configuration ------------------------------------------------------------


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("config", f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def parse_overrides(tokens: list[str]) -> dict[str, Any]:
    """``--key value`` pairs; values are parsed as JSON when possible."""
    out: dict[str, Any] = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--") or len(tok) == 2:
            raise CliError("usage", f"expected --key value, got {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            try:
                val = next(it)
            except StopIteration:
                raise CliError("usage", f"override --{key} is missing a value") from None
        try:
            value = json.loads(val)
        except json.JSONDecodeError:
            value = val
        out[key.replace("-", "_")] = value
    return out


def apply_overrides(data: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set dotted or flat keys; a bare key naming a unique nested field resolves to it."""
    data = json.loads(json.dumps(data))
    nested_fields = {
        section: set(model.model_fields)
        for section, model in (("gae", RunConfig.model_fields["gae"].annotation),
                               ("loss", RunConfig.model_fields["loss"].annotation),
                               ("net", RunConfig.model_fields["net"].annotation))
    }
    for key, value in overrides.items():
        path = key.split(".")
        if len(path) == 1 and key not in RunConfig.model_fields:
            owners = [s for s, fields in nested_fields.items() if key in fields]
            if len(owners) == 1:
                path = [owners[0], key]
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError("config", f"cannot override {key}: {part} is not a section")
        node[path[-1]] = value
    return data


def load_run_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    data = unwrap_snapshot(read_json(path))
    if not isinstance(data, dict):
        raise CliError("config", f"{path}: top level must be an object")
    data = apply_overrides(data, overrides or {})
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        data["output_dir"] = root
    try:
        return RunConfig(**data)
    except ValidationError as exc:
        raise CliError("invalid-config", f"{path}: {format_validation(exc)}") from None


# -- commands -----------------------------------------------------------------


def cmd_train(args, overrides: dict[str, Any]) -> int:
    from .rollout import run

    cfg = load_run_config(args.config, overrides)
    out = Path(cfg.output_dir) / cfg.run_name
    result = run(cfg, out)
    print(json.dumps({"run_dir": str(out), **result.summary()}))
    return 0


def _check_compat(policy, env, env_name: str) -> None:
    c, s = policy.cfg, env.spec
    if (c.n_agents, c.obs_dim, c.n_actions) != (s.n_agents, s.obs_dim, s.n_actions):
        raise CliError(
            "spec-mismatch",
            f"checkpoint expects n_agents={c.n_agents} obs_dim={c.obs_dim} n_actions={c.n_actions} "
            f"but environment {env_name!r} provides n_agents={s.n_agents} obs_dim={s.obs_dim} "
            f"n_actions={s.n_actions}",
        )


EVAL_COLUMNS = ["checkpoint", "env", "episodes", "seed", "mode", "mean_return", "success_rate"]


def cmd_eval(args) -> int:
    from .envs import make_env
    from .numerics import CheckpointError
    from .rollout import evaluate, load_policy

    if args.episodes < 1:
        raise CliError("usage", f"--episodes must be at least 1, got {args.episodes}")
    try:
        policy, meta = load_policy(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise CliError("checkpoint", str(exc), EXIT_RUNTIME) from None
    env_meta = meta.get("env") or {}
    name = args.env or env_meta.get("name")
    if name is None:
        raise CliError("usage", "checkpoint records no environment; pass --env")
    params = json.loads(args.env_params) if args.env_params else (
        env_meta.get("params", {}) if name == env_meta.get("name") else {})
    try:
        env = make_env(name, params)
    except ValueError as exc:
        raise CliError("env", str(exc)) from None
    _check_compat(policy, env, name)
    order = meta.get("agent_order") or list(range(env.spec.n_agents))
    mode = "sample" if args.sample else "greedy"
    res = evaluate(policy, env, args.episodes, order, np.random.default_rng(args.seed),
                   deterministic=not args.sample)
    print(f"mean_return={res.mean_return:.4f} success_rate={res.success_rate:.4f} "
          f"episodes={res.episodes} mode={mode}")
    csv_path = Path(args.csv) if args.csv else Path(args.checkpoint).parent / "eval.csv"
    fresh = not csv_path.exists()
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(EVAL_COLUMNS)
        writer.writerow([args.checkpoint, name, res.episodes, args.seed, mode,
                         f"{res.mean_return:.4f}", f"{res.success_rate:.4f}"])
    return 0


def cmd_ablate(args) -> int:
    from .ablation import AblationGrid, run_grid

    data = read_json(args.grid)
    try:
        grid = AblationGrid(**data)
    except (ValidationError, TypeError) as exc:
        detail = format_validation(exc) if isinstance(exc, ValidationError) else str(exc)
        raise CliError("invalid-grid", f"{args.grid}: {detail}") from None
    root = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs") / grid.name
    try:
        table, ok = run_grid(grid, root, workers=args.workers)
    except ValidationError as exc:
        raise CliError("invalid-grid", f"{args.grid}: {format_validation(exc)}") from None
    for row in table:
        if row["seed_index"] == "median":
            print(json.dumps(row))
    print(f"results: {root / 'results.csv'}")
    if not ok:
        failed = [r for r in table if r["seed_index"] != "median" and not r["status"].startswith("ok")]
        print(f"jointppo: error: ablation: {len(failed)} run(s) failed, see results.csv", file=sys.stderr)
        return EXIT_FAIL
    return 0


def cmd_plot(args) -> int:
    from .plotting import PlotError, plot_curves

    try:
        out = plot_curves(args.csv, args.out, title=args.title)
    except PlotError as exc:
        raise CliError("plot", str(exc)) from None
    except OSError as exc:
        raise CliError("plot", str(exc)) from None
    print(out)
    return 0


class GradcheckConfig(_Strict):
    n_agents: int = Field(2, ge=1)
    obs_dim: int = Field(4, ge=1)
    n_actions: int = Field(3, ge=1)
    hidden_dim: int = Field(16, ge=1)
    n_heads: int = Field(1, ge=1)
    n_blocks: int = Field(1, ge=1)
    n_hidden_layers: int = Field(1, ge=1)
    steps: int = Field(3, ge=1)
    seed: int = 0
    h: float = Field(1e-5, gt=0.0)
    tolerance: float = Field(1e-4, gt=0.0)
    loss: LossConfig = LossConfig()


def cmd_gradcheck(args, grad_hook: Callable | None = None) -> int:
    from .gradcheck import gradcheck

    data = read_json(args.config) if args.config else {}
    try:
        gc = GradcheckConfig(**data)
        net = NetConfig(**gc.model_dump(include=set(NetConfig.model_fields)))
    except ValidationError as exc:
        raise CliError("invalid-config", f"{args.config}: {format_validation(exc)}") from None
    report = gradcheck(net, gc.loss, steps=gc.steps, seed=gc.seed, h=gc.h, tolerance=gc.tolerance,
                       grad_hook=grad_hook)
    if args.verbose:
        for line in report.lines()[:-1]:
            print(line)
    for group, err in report.group_errors().items():
        flag = "FAIL" if group in report.failed_groups() else "ok"
        print(f"{group:8s} max rel. error {err:.3e}  {flag}")
    print(report.lines()[-1])
    if not report.passed:
        print(f"jointppo: error: gradcheck: groups {report.failed_groups()} exceed tolerance "
              f"{gc.tolerance:g} (worst {report.worst()[0]})", file=sys.stderr)
        return EXIT_FAIL
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointppo", description="Joint-policy PPO for cooperative multi-agent RL.")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on the log stream")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config; extra --key value pairs override it")
    t.add_argument("config")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--env", help="environment name (default: the one recorded in the checkpoint)")
    e.add_argument("--env-params", help="JSON object of environment parameters")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sample", action="store_true", help="sample actions instead of taking the argmax")
    e.add_argument("--csv", help="CSV file to append to (default: eval.csv next to the checkpoint)")

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("grid")
    a.add_argument("--out", help="output directory (default: <output root>/<grid name>)")
    a.add_argument("--workers", type=int, default=1)

    pl = sub.add_parser("plot", help="render learning curves to SVG")
    pl.add_argument("csv", nargs="+", help="metrics CSVs, optionally as label=path to group seeds")
    pl.add_argument("--out", required=True)
    pl.add_argument("--title")

    g = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    g.add_argument("--config", help="JSON with network sizes and loss settings (default: 2 agents, 3 actions)")
    g.add_argument("-v", "--verbose", action="store_true", help="print every parameter")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    from .losses import TrainingDivergence
    from .numerics import CheckpointError
    from .rollout import EnvironmentFault

    try:
        if extra and args.command != "train":
            raise CliError("usage", f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "train":
            return cmd_train(args, parse_overrides(extra))
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "plot":
            return cmd_plot(args)
        return cmd_gradcheck(args)
    except CliError as exc:
        print(f"jointppo: error: {exc.kind}: {_one_line(exc.detail)}", file=sys.stderr)
        return exc.code
    except (TrainingDivergence, EnvironmentFault, CheckpointError) as exc:
        print(f"jointppo: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
