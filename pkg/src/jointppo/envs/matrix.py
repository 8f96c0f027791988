"""Single-step cooperative matrix games."""
from __future__ import annotations

import numpy as np

from .base import Env, EnvSpec, StepResult, id_features


class _MatrixGame(Env):
    def __init__(self, n_agents: int, n_actions: int):
        self.spec = EnvSpec(n_agents, 1 + n_agents, n_actions, 1, (0.0, 1.0))
        self._obs = np.concatenate([np.ones((n_agents, 1)), id_features(n_agents)], axis=1)
        self._done = True

    def reset(self, seed=None):
        self._done = False
        return self._obs.copy(), self.avail()

    @property
    def state(self):
        return {"done": self._done}

    def _reward(self, actions: np.ndarray) -> float:
        raise NotImplementedError

    def step(self, actions) -> StepResult:
        actions = self._validate(actions)
        reward = self._reward(actions)
        self._done = True
        return StepResult(self._obs.copy(), self.avail(), reward, True, False, {"success": reward == 1.0})


class XorGame(_MatrixGame):
    """Two agents, two actions: the team scores 1 when the agents disagree."""

    name = "xor"

    def __init__(self):
        super().__init__(2, 2)

    def _reward(self, actions):
        return float(actions[0] != actions[1])


class CoordinationGame(_MatrixGame):
    """n agents, k actions: the team scores 1 when every agent picks the same action."""

    name = "coordination"

    def __init__(self, n_agents: int = 3, n_actions: int = 4):
        super().__init__(n_agents, n_actions)

    def _reward(self, actions):
        return float((actions == actions[0]).all())
