from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import GAEConfig
from ..losses import ValueNormalizer, gae_arrays
from ..numerics import ContractError


@dataclass
class TransitionRecord:
    joint_obs: np.ndarray
    avail: np.ndarray
    joint_action: np.ndarray
    per_agent_log_probs: np.ndarray
    joint_log_prob: float
    value_pred: float  # critic output, normalised space
    reward: float
    terminal: bool
    truncated: bool
    bootstrap_value: float = 0.0  # denormalised value of the cut-off state, used when truncated


@dataclass
class Batch:
    """Flat, instance-major view of a closed buffer, ready for training."""

    obs: np.ndarray
    avail: np.ndarray
    actions: np.ndarray
    old_joint_log_prob: np.ndarray
    old_per_agent_log_probs: np.ndarray
    old_values: np.ndarray  # normalised
    advantages: np.ndarray
    value_targets: np.ndarray  # denormalised
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass
class RolloutBuffer:
    """On-policy storage: one ordered stream per environment instance.

    Cleared after every training phase.
    """

    n_streams: int
    capacity: int
    streams: list[list[TransitionRecord]] = field(default_factory=list)
    tail_values: list[float] | None = None  # denormalised bootstrap per stream

    def __post_init__(self):
        if not self.streams:
            self.streams = [[] for _ in range(self.n_streams)]

    def __len__(self) -> int:
        return sum(len(s) for s in self.streams)

    def add(self, stream: int, record: TransitionRecord) -> None:
        if len(self) >= self.capacity:
            raise ContractError(f"buffer full ({self.capacity} transitions)")
        self.streams[stream].append(record)

    def close(self, tail_values) -> None:
        self.tail_values = [float(v) for v in tail_values]

    def clear(self) -> None:
        self.streams = [[] for _ in range(self.n_streams)]
        self.tail_values = None

    def records(self) -> list[TransitionRecord]:
        return [r for s in self.streams for r in s]

    def to_batch(self, gae: GAEConfig, normalizer: ValueNormalizer) -> Batch:
        if self.tail_values is None:
            raise ContractError("advantages need every stream closed with a bootstrap value")
        adv, targets = [], []
        for stream, tail in zip(self.streams, self.tail_values):
            if not stream:
                continue
            values = normalizer.denormalize(np.array([r.value_pred for r in stream]))
            a, v, _ = gae_arrays(
                [r.reward for r in stream],
                values,
                [r.terminal for r in stream],
                tail,
                gae,
                [r.truncated for r in stream],
                [r.bootstrap_value for r in stream],
            )
            adv.append(a)
            targets.append(v)
        recs = self.records()
        return Batch(
            obs=np.stack([r.joint_obs for r in recs]),
            avail=np.stack([r.avail for r in recs]),
            actions=np.stack([r.joint_action for r in recs]),
            old_joint_log_prob=np.array([r.joint_log_prob for r in recs]),
            old_per_agent_log_probs=np.stack([r.per_agent_log_probs for r in recs]),
            old_values=np.array([r.value_pred for r in recs]),
            advantages=np.concatenate(adv),
            value_targets=np.concatenate(targets),
            rewards=np.array([r.reward for r in recs]),
        )
