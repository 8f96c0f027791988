from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..numerics import ContractError


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    obs_dim: int
    n_actions: int
    max_episode_len: int
    reward_range: tuple[float, float]


@dataclass
class StepResult:
    obs: np.ndarray  # (n, obs_dim)
    avail: np.ndarray  # (n, n_actions) bool
    reward: float
    terminal: bool
    truncated: bool
    info: dict[str, Any] = field(default_factory=dict)


class Env:
    """Cooperative multi-agent environment with a single team reward.

    All randomness is drawn in :meth:`reset`; :meth:`step` is deterministic.
    """

    spec: EnvSpec
    name: str = "env"

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def step(self, actions) -> StepResult:
        raise NotImplementedError

    @property
    def state(self) -> dict[str, Any]:
        raise NotImplementedError

    def avail(self) -> np.ndarray:
        return np.ones((self.spec.n_agents, self.spec.n_actions), dtype=bool)

    def _validate(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.int64)
        n, k = self.spec.n_agents, self.spec.n_actions
        if actions.shape != (n,):
            raise ContractError(f"expected {n} actions, got shape {actions.shape}")
        if (actions < 0).any() or (actions >= k).any():
            raise ContractError(f"action out of range 0..{k - 1}: {actions.tolist()}")
        mask = self.avail()
        bad = [i for i in range(n) if not mask[i, actions[i]]]
        if bad:
            raise ContractError(f"unavailable action for agents {bad}: {actions.tolist()}")
        return actions


def id_features(n: int) -> np.ndarray:
    return np.eye(n)
