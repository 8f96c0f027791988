from __future__ import annotations

from typing import Any

import numpy as np

from .base import Env, EnvSpec, StepResult
from .gridworld import GridworldSpread, greedy_assignment, gridworld_oracle, manhattan
from .matrix import CoordinationGame, XorGame

ENVS = {"xor": XorGame, "coordination": CoordinationGame, "gridworld": GridworldSpread}


def make_env(name: str, params: dict[str, Any] | None = None) -> Env:
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    try:
        return cls(**(params or {}))
    except TypeError as exc:
        raise ValueError(f"bad parameters for environment {name!r}: {exc}") from None


def scripted_oracle(env: Env, state: dict | None = None) -> np.ndarray:
    """Privileged hand-written policy used as a performance reference."""
    state = env.state if state is None else state
    if isinstance(env, XorGame):
        return np.array([0, 1])
    if isinstance(env, CoordinationGame):
        return np.zeros(env.spec.n_agents, dtype=np.int64)
    if isinstance(env, GridworldSpread):
        return gridworld_oracle(state)
    raise TypeError(f"no scripted oracle for {type(env).__name__}")


def oracle_campaign(env: Env, episodes: int, first_seed: int = 0) -> dict[str, float]:
    """Mean undiscounted return and success rate of the scripted oracle over seeded episodes."""
    returns, successes = [], []
    for k in range(episodes):
        env.reset(first_seed + k)
        total, success = 0.0, False
        while True:
            res = env.step(scripted_oracle(env))
            total += res.reward
            if res.terminal or res.truncated:
                success = bool(res.info.get("success", False))
                break
        returns.append(total)
        successes.append(success)
    return {"mean_return": float(np.mean(returns)), "success_rate": float(np.mean(successes)),
            "episodes": episodes}
