"""Training objectives: GAE, clipped critic loss, joint-policy PPO surrogate, entropy bonus."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import GAEConfig, LossConfig
from .numerics import ContractError, Tensor

MAX_LOG_RATIO = 20.0


class TrainingDivergence(RuntimeError):
    """Raised when the policy ratio leaves any sane range."""


@dataclass(frozen=True)
class AdvantageRecord:
    advantage: float
    value_target: float
    td_error: float


def compute_gae(rewards, values, terminal_flags, bootstrap_value: float, cfg: GAEConfig,
                truncated_flags=None, truncation_values=None) -> list[AdvantageRecord]:
    """Generalised advantage estimates for one ordered stream of transitions.

    ``values[t]`` is the critic's estimate for step ``t``.  The next-state value
    is 0 after a terminal step, ``truncation_values[t]`` after a time-limit cut,
    ``bootstrap_value`` after the final step of the stream, and ``values[t+1]``
    otherwise.  Accumulation restarts at every episode boundary.
    """
    adv, targets, deltas = gae_arrays(rewards, values, terminal_flags, bootstrap_value, cfg,
                                      truncated_flags, truncation_values)
    return [AdvantageRecord(float(a), float(v), float(d)) for a, v, d in zip(adv, targets, deltas)]


def _next_values(values, terminal, truncated, bootstrap_value, truncation_values):
    T = len(values)
    nxt = np.empty(T)
    nxt[:-1] = values[1:]
    nxt[-1] = bootstrap_value
    nxt = np.where(truncated, truncation_values, nxt)
    return np.where(terminal, 0.0, nxt)


def gae_arrays(rewards, values, terminal_flags, bootstrap_value: float, cfg: GAEConfig,
               truncated_flags=None, truncation_values=None):
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminal = np.asarray(terminal_flags, dtype=bool)
    T = len(rewards)
    truncated = np.zeros(T, bool) if truncated_flags is None else np.asarray(truncated_flags, dtype=bool)
    trunc_v = np.zeros(T) if truncation_values is None else np.asarray(truncation_values, dtype=np.float64)
    if not (len(values) == len(terminal) == len(truncated) == len(trunc_v) == T):
        raise ContractError(
            f"length mismatch: rewards {T}, values {len(values)}, terminals {len(terminal)}, "
            f"truncations {len(truncated)}"
        )
    if T == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    if (terminal & truncated).any():
        raise ContractError("a step cannot be both terminal and truncated")

    nxt = _next_values(values, terminal, truncated, bootstrap_value, trunc_v)
    deltas = rewards + cfg.gamma * nxt - values
    decay = cfg.gamma * cfg.lam
    ends = terminal | truncated
    adv = np.empty(T)
    if cfg.horizon is None:
        running = 0.0
        for t in range(T - 1, -1, -1):
            if ends[t]:
                running = 0.0
            running = deltas[t] + decay * running
            adv[t] = running
    else:
        # truncated sum: A_t = sum_{l=0}^{h} decay^l delta_{t+l}, stopping at the episode end
        for t in range(T):
            total, weight = 0.0, 1.0
            for k in range(t, min(T, t + cfg.horizon + 1)):
                total += weight * deltas[k]
                if ends[k]:
                    break
                weight *= decay
            adv[t] = total
    return adv, adv + values, deltas


def critic_loss(values_new: Tensor, values_old, value_targets, clip_eps: float,
                mode: str = "paper_min") -> Tensor:
    """Clipped squared error between value predictions and targets, batch mean.

    ``paper_min`` takes the smaller of the clipped and unclipped errors;
    ``standard_max`` takes the larger (the usual PPO value clip).
    """
    values_old = np.asarray(values_old, dtype=np.float64)
    targets = np.asarray(value_targets, dtype=np.float64)
    unclipped = nx.square(values_new - targets)
    clipped_pred = nx.clip(values_new - values_old, -clip_eps, clip_eps) + values_old
    clipped = nx.square(clipped_pred - targets)
    if mode == "paper_min":
        per_step = nx.minimum(unclipped, clipped)
    elif mode == "standard_max":
        per_step = nx.maximum(unclipped, clipped)
    else:
        raise ContractError(f"unknown value clip mode {mode!r}")
    return per_step.mean()


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def joint_ppo_loss(joint_log_prob_new: Tensor, joint_log_prob_old, advantages, clip_eps: float) -> Tensor:
    """Negative clipped surrogate on the joint-policy ratio, averaged over the batch."""
    old = np.asarray(joint_log_prob_old, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    log_ratio = joint_log_prob_new - old
    lr_data = log_ratio.data
    if not np.isfinite(lr_data).all() or np.abs(lr_data).max(initial=0.0) > MAX_LOG_RATIO:
        worst = int(np.nanargmax(np.where(np.isfinite(lr_data), np.abs(lr_data), np.inf)))
        raise TrainingDivergence(
            f"policy ratio diverged: max |log ratio| = {np.abs(lr_data[worst])!r} at sample {worst} "
            f"(new log-prob {joint_log_prob_new.data[worst]!r}, old {old[worst]!r}, advantage {adv[worst]!r})"
        )
    ratio = nx.exp(log_ratio)
    surrogate = ratio * adv
    clipped = nx.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return -nx.minimum(surrogate, clipped).mean()


def entropy_bonus(per_agent_entropies: Tensor) -> Tensor:
    """Batch mean of the summed per-agent conditional entropies."""
    return per_agent_entropies.sum(axis=1).mean()


def total_loss(critic: Tensor, policy: Tensor, entropy: Tensor, cfg: LossConfig) -> Tensor:
    # entropy is a bonus: it is subtracted so that minimising the loss raises it
    return critic + cfg.lambda1 * policy - cfg.lambda2 * entropy


class ValueNormalizer:
    """Running mean/variance of value targets (parallel Welford merge).

    With ``enabled=False`` both directions are the identity.
    """

    def __init__(self, enabled: bool = True, var_floor: float = 1e-8):
        self.enabled = enabled
        self.var_floor = var_floor
        self.running_mean = 0.0
        self.running_var = 1.0
        self.count = 0

    @property
    def std(self) -> float:
        return float(np.sqrt(max(self.running_var, self.var_floor)))

    def update(self, targets) -> None:
        if not self.enabled:
            return
        x = np.asarray(targets, dtype=np.float64).ravel()
        if x.size == 0:
            return
        b_mean, b_var, b_n = float(x.mean()), float(x.var()), x.size
        if self.count == 0:
            self.running_mean, self.running_var, self.count = b_mean, b_var, b_n
            return
        total = self.count + b_n
        delta = b_mean - self.running_mean
        m2 = self.running_var * self.count + b_var * b_n + delta * delta * self.count * b_n / total
        self.running_mean += delta * b_n / total
        self.running_var = m2 / total
        self.count = total

    def normalize(self, x):
        if not self.enabled:
            return x
        return (np.asarray(x, dtype=np.float64) - self.running_mean) / self.std

    def denormalize(self, x):
        if not self.enabled:
            return x
        return np.asarray(x, dtype=np.float64) * self.std + self.running_mean

    def state(self) -> dict:
        return {"enabled": self.enabled, "mean": self.running_mean, "var": self.running_var, "count": self.count}

    @classmethod
    def from_state(cls, state: dict) -> "ValueNormalizer":
        vn = cls(enabled=state["enabled"])
        vn.running_mean, vn.running_var, vn.count = state["mean"], state["var"], state["count"]
        return vn


@dataclass
class LossTerms:
    total: Tensor
    critic: Tensor
    policy: Tensor
    entropy: Tensor
    mean_ratio: float
    clip_fraction: float


def jointppo_objective(evaluation, old_joint_log_prob, advantages, old_values, value_targets,
                       cfg: LossConfig) -> LossTerms:
    """Assemble every term of the training loss from a teacher-forced evaluation."""
    adv = normalize_advantages(advantages) if cfg.advantage_norm else np.asarray(advantages, dtype=np.float64)
    crit = critic_loss(evaluation.value, old_values, value_targets, cfg.clip_eps, cfg.value_clip_mode)
    pol = joint_ppo_loss(evaluation.joint_log_prob, old_joint_log_prob, adv, cfg.clip_eps)
    ent = entropy_bonus(evaluation.per_agent_entropies)
    ratio = np.exp(evaluation.joint_log_prob.data - np.asarray(old_joint_log_prob))
    return LossTerms(
        total=total_loss(crit, pol, ent, cfg),
        critic=crit,
        policy=pol,
        entropy=ent,
        mean_ratio=float(ratio.mean()),
        clip_fraction=float((np.abs(ratio - 1.0) > cfg.clip_eps).mean()),
    )
