"""Cooperative landmark-covering gridworld ("spread") on a g x g board."""
from __future__ import annotations

import numpy as np

from .base import Env, EnvSpec, StepResult, id_features

# action index -> (dx, dy)
MOVES = np.array([[0, 1], [0, -1], [-1, 0], [1, 0], [0, 0]], dtype=np.int64)
UP, DOWN, LEFT, RIGHT, STAY = range(5)


def manhattan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Manhattan distances, ``a`` (m, 2) x ``b`` (k, 2) -> (m, k)."""
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


class GridworldSpread(Env):
    """n agents must cover n landmarks.

    Per-step team reward is minus the mean (over landmarks) Manhattan distance
    to the nearest agent, divided by the grid size.  The episode succeeds, and
    terminates, once every landmark is occupied; otherwise it is truncated at
    ``max_episode_len``.

    Each agent observes its own position, the offsets to every landmark, and
    the offsets to other agents that lie within ``sense_radius`` (hidden agents
    read as zeros), plus an agent-id one-hot.
    """

    name = "gridworld"

    def __init__(self, n_agents: int = 3, grid_size: int = 5, max_episode_len: int = 10,
                 sense_radius: int = 2):
        if 2 * n_agents > grid_size * grid_size:
            raise ValueError(f"a {grid_size}x{grid_size} grid cannot hold {n_agents} agents and landmarks")
        self.n = n_agents
        self.g = grid_size
        self.sense_radius = sense_radius
        obs_dim = 2 + 2 * n_agents + 3 * (n_agents - 1) + n_agents
        worst = -2.0 * (grid_size - 1) / grid_size
        self.spec = EnvSpec(n_agents, obs_dim, len(MOVES), max_episode_len, (worst, 0.0))
        self.agents = np.zeros((n_agents, 2), dtype=np.int64)
        self.landmarks = np.zeros((n_agents, 2), dtype=np.int64)
        self.t = 0
        self._ids = id_features(n_agents)

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        cells = rng.choice(self.g * self.g, size=2 * self.n, replace=False)
        xy = np.stack([cells % self.g, cells // self.g], axis=1)
        self.agents = xy[: self.n].copy()
        self.landmarks = xy[self.n:].copy()
        self.t = 0
        return self.observe(), self.avail()

    @property
    def state(self):
        return {"agents": self.agents.copy(), "landmarks": self.landmarks.copy(), "t": self.t,
                "grid_size": self.g}

    def avail(self) -> np.ndarray:
        nxt = self.agents[:, None, :] + MOVES[None, :, :]
        return ((nxt >= 0) & (nxt < self.g)).all(axis=-1)

    def observe(self) -> np.ndarray:
        g = float(self.g)
        obs = np.zeros((self.n, self.spec.obs_dim))
        for i in range(self.n):
            own = self.agents[i]
            row = [own / g, ((self.landmarks - own) / g).ravel()]
            for j in range(self.n):
                if j == i:
                    continue
                offset = self.agents[j] - own
                if np.abs(offset).sum() <= self.sense_radius:
                    row.append(np.array([1.0, offset[0] / g, offset[1] / g]))
                else:
                    row.append(np.zeros(3))
            row.append(self._ids[i])
            obs[i] = np.concatenate(row)
        return obs

    def coverage_distance(self) -> float:
        return float(manhattan(self.landmarks, self.agents).min(axis=1).mean())

    def success(self) -> bool:
        return bool((manhattan(self.landmarks, self.agents).min(axis=1) == 0).all())

    def step(self, actions) -> StepResult:
        actions = self._validate(actions)
        self.agents = self.agents + MOVES[actions]
        self.t += 1
        reward = -self.coverage_distance() / self.g
        success = self.success()
        truncated = (not success) and self.t >= self.spec.max_episode_len
        return StepResult(self.observe(), self.avail(), reward, success, truncated, {"success": success})


def greedy_assignment(agents: np.ndarray, landmarks: np.ndarray) -> np.ndarray:
    """Repeatedly pair the closest unassigned agent/landmark (ties by index)."""
    dist = manhattan(agents, landmarks)
    n = len(agents)
    target = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(len(landmarks), dtype=bool)
    for flat in np.argsort(dist, axis=None, kind="stable"):
        i, j = divmod(int(flat), len(landmarks))
        if target[i] < 0 and not taken[j]:
            target[i] = j
            taken[j] = True
    return target


def gridworld_oracle(state: dict) -> np.ndarray:
    agents, landmarks = state["agents"], state["landmarks"]
    target = greedy_assignment(agents, landmarks)
    actions = np.full(len(agents), STAY, dtype=np.int64)
    for i, j in enumerate(target):
        dx, dy = landmarks[j] - agents[i]
        if dx > 0:
            actions[i] = RIGHT
        elif dx < 0:
            actions[i] = LEFT
        elif dy > 0:
            actions[i] = UP
        elif dy < 0:
            actions[i] = DOWN
    return actions
