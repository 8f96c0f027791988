"""Interaction and training phases: collection, PPO epochs, evaluation, full runs."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..config import RunConfig, TrainConfig, snapshot
from ..envs import Env, make_env
from ..losses import ValueNormalizer, jointppo_objective
from ..numerics import Adam, Tape, clip_grad_norm, save_params
from ..policy import JointPolicy
from .buffer import Batch, RolloutBuffer, TransitionRecord
from .schedule import LrSchedule

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "env_steps", "mean_return", "success_rate", "critic_loss", "policy_loss",
    "entropy", "clip_fraction", "mean_ratio", "lr",
]


class EnvironmentFault(RuntimeError):
    pass


@dataclass
class EpisodeStats:
    returns: list[float] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)


class EnvPool:
    """k independent environment instances stepped in lock-step."""

    def __init__(self, envs: list[Env], rng: np.random.Generator):
        self.envs = envs
        self.rng = rng
        spec = envs[0].spec
        k = len(envs)
        self.obs = np.zeros((k, spec.n_agents, spec.obs_dim))
        self.avail = np.ones((k, spec.n_agents, spec.n_actions), dtype=bool)
        self.ep_return = np.zeros(k)
        for i in range(k):
            self.reset(i)

    @property
    def spec(self):
        return self.envs[0].spec

    def reset(self, i: int) -> None:
        obs, avail = self.envs[i].reset(int(self.rng.integers(2**31 - 1)))
        self.obs[i], self.avail[i] = obs, avail
        self.ep_return[i] = 0.0


def agent_order(cfg: TrainConfig, n_agents: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.agent_order_mode == "default":
        return np.arange(n_agents)
    if cfg.agent_order_mode == "inverse":
        return np.arange(n_agents)[::-1].copy()
    if cfg.agent_order_mode == "random_per_run":
        return rng.permutation(n_agents)
    order = np.asarray(cfg.agent_order, dtype=np.int64)
    if len(order) != n_agents:
        raise ValueError(f"agent_order has {len(order)} entries for {n_agents} agents")
    return order


def _values(policy: JointPolicy, obs: np.ndarray) -> np.ndarray:
    return policy.value(policy.encode(obs)).data


def collect(policy: JointPolicy, pool: EnvPool, buffer: RolloutBuffer, T: int, order,
            rng: np.random.Generator, normalizer: ValueNormalizer | None = None) -> EpisodeStats:
    """Run the behaviour policy for ``T`` transitions spread evenly over the pool."""
    normalizer = normalizer or ValueNormalizer(enabled=False)
    if len(buffer):
        raise nx.ContractError("collect needs an empty buffer")
    k = len(pool.envs)
    if T % k:
        raise nx.ContractError(f"T={T} is not a multiple of the pool size {k}")
    stats = EpisodeStats()
    for step in range(T // k):
        out = policy.generate(policy.encode(pool.obs), order, pool.avail, rng)
        cut: list[tuple[int, np.ndarray, TransitionRecord]] = []
        for i, env in enumerate(pool.envs):
            try:
                res = env.step(out.sampled_actions[i])
            except Exception as exc:
                raise EnvironmentFault(f"environment {i} failed at collection step {step}: {exc}") from exc
            rec = TransitionRecord(
                joint_obs=pool.obs[i].copy(),
                avail=pool.avail[i].copy(),
                joint_action=out.sampled_actions[i].copy(),
                per_agent_log_probs=out.per_agent_log_probs[i].copy(),
                joint_log_prob=float(out.joint_log_prob[i]),
                value_pred=float(out.value[i]),
                reward=float(res.reward),
                terminal=bool(res.terminal),
                truncated=bool(res.truncated),
            )
            buffer.add(i, rec)
            pool.ep_return[i] += res.reward
            if res.truncated:
                cut.append((i, res.obs, rec))
            if res.terminal or res.truncated:
                stats.returns.append(float(pool.ep_return[i]))
                stats.successes.append(bool(res.info.get("success", False)))
                pool.reset(i)
            else:
                pool.obs[i], pool.avail[i] = res.obs, res.avail
        if cut:
            vals = normalizer.denormalize(_values(policy, np.stack([c[1] for c in cut])))
            for (_, _, rec), v in zip(cut, np.atleast_1d(vals)):
                rec.bootstrap_value = float(v)
    buffer.close(np.atleast_1d(normalizer.denormalize(_values(policy, pool.obs))))
    return stats


def _minibatches(idx: np.ndarray, count: int) -> list[np.ndarray]:
    # equal chunks of ceil(B / count); only the last one may be smaller
    size = math.ceil(len(idx) / count)
    return [idx[s:s + size] for s in range(0, len(idx), size)]


def train_phase(policy: JointPolicy, optimizer: Adam, buffer: RolloutBuffer, cfg: TrainConfig, order,
                lr: float, rng: np.random.Generator, normalizer: ValueNormalizer) -> list[dict]:
    """PPO epochs over one closed buffer; returns one diagnostics dict per epoch.

    The buffer is cleared on return.
    """
    batch = buffer.to_batch(cfg.gae, normalizer)
    buffer.clear()
    return train_on_batch(policy, optimizer, batch, cfg, order, lr, rng, normalizer)


def train_on_batch(policy: JointPolicy, optimizer: Adam, batch: Batch, cfg: TrainConfig, order,
                   lr: float, rng: np.random.Generator, normalizer: ValueNormalizer) -> list[dict]:
    old_values_raw = normalizer.denormalize(batch.old_values)
    normalizer.update(batch.value_targets)
    old_values = normalizer.normalize(old_values_raw)
    targets = normalizer.normalize(batch.value_targets)

    params = policy.parameters()
    diagnostics = []
    for epoch in range(cfg.ppo_epochs):
        chosen = rng.permutation(len(batch))[: cfg.batch_size]
        sums = dict.fromkeys(("critic_loss", "policy_loss", "entropy", "clip_fraction", "mean_ratio"), 0.0)
        parts = _minibatches(chosen, cfg.minibatch_count)
        first_ratio_error = None
        for mb in parts:
            with Tape() as tape:
                ev = policy.evaluate_actions(policy.encode(batch.obs[mb]), order, batch.actions[mb],
                                             batch.avail[mb])
                terms = jointppo_objective(ev, batch.old_joint_log_prob[mb], batch.advantages[mb],
                                           old_values[mb], targets[mb], cfg.loss)
            tape.backward(terms.total, params)
            if first_ratio_error is None:
                first_ratio_error = float(
                    np.abs(np.exp(ev.joint_log_prob.data - batch.old_joint_log_prob[mb]) - 1.0).max()
                )
            grads = [p.grad for p in params]
            clip_grad_norm(grads, cfg.max_grad_norm)
            nx.adam_step(params, grads, optimizer.state, lr)
            sums["critic_loss"] += terms.critic.item()
            sums["policy_loss"] += terms.policy.item()
            sums["entropy"] += terms.entropy.item()
            sums["clip_fraction"] += terms.clip_fraction
            sums["mean_ratio"] += terms.mean_ratio
        row = {key: val / len(parts) for key, val in sums.items()}
        row["epoch"] = epoch
        row["first_ratio_error"] = first_ratio_error
        diagnostics.append(row)
    return diagnostics


@dataclass
class EvalResult:
    mean_return: float
    success_rate: float
    episodes: int


def evaluate(policy: JointPolicy, env: Env, episodes: int, order, rng: np.random.Generator,
             deterministic: bool = True) -> EvalResult:
    """Play ``episodes`` full episodes in parallel copies of ``env``; nothing is stored."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    envs = [copy.deepcopy(env) for _ in range(episodes)]
    spec = env.spec
    obs = np.zeros((episodes, spec.n_agents, spec.obs_dim))
    avail = np.ones((episodes, spec.n_agents, spec.n_actions), dtype=bool)
    for i, e in enumerate(envs):
        obs[i], avail[i] = e.reset(int(rng.integers(2**31 - 1)))
    returns = np.zeros(episodes)
    success = np.zeros(episodes, dtype=bool)
    live = np.arange(episodes)
    while live.size:
        out = policy.generate(policy.encode(obs[live]), order, avail[live], rng, deterministic=deterministic)
        still = []
        for row, i in enumerate(live):
            res = envs[i].step(out.sampled_actions[row])
            returns[i] += res.reward
            if res.terminal or res.truncated:
                success[i] = bool(res.info.get("success", False))
            else:
                obs[i], avail[i] = res.obs, res.avail
                still.append(i)
        live = np.array(still, dtype=np.int64)
    return EvalResult(float(returns.mean()), float(success.mean()), episodes)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class MetricsLog:
    def __init__(self, path: Path | None = None):
        self.rows: list[dict] = []
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(",".join(METRIC_COLUMNS) + "\n")

    def append(self, **row) -> None:
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(",".join(_fmt(row.get(c)) for c in METRIC_COLUMNS) + "\n")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRIC_COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(row.get(c)) for c in METRIC_COLUMNS) + "\n")
        return buf.getvalue()

    def evaluations(self) -> list[dict]:
        return [r for r in self.rows if r.get("success_rate") is not None]


@dataclass
class RunResult:
    policy: JointPolicy
    metrics: MetricsLog
    order: np.ndarray
    normalizer: ValueNormalizer
    env_steps: int
    train_phases: int
    out_dir: Path | None = None

    @property
    def eval_success(self) -> list[float]:
        return [r["success_rate"] for r in self.metrics.evaluations()]

    @property
    def eval_return(self) -> list[float]:
        return [r["mean_return"] for r in self.metrics.evaluations()]

    @property
    def final_success(self) -> float:
        """Median of the last three evaluations."""
        return float(np.median(self.eval_success[-3:]))

    @property
    def final_return(self) -> float:
        return float(np.median(self.eval_return[-3:]))

    @property
    def average_success(self) -> float:
        return float(np.mean(self.eval_success))

    def summary(self) -> dict:
        return {
            "env_steps": self.env_steps,
            "train_phases": self.train_phases,
            "final_success": self.final_success,
            "final_return": self.final_return,
            "average_success": self.average_success,
            "agent_order": self.order.tolist(),
        }


def checkpoint_meta(cfg: RunConfig, policy: JointPolicy, order, normalizer: ValueNormalizer,
                    env_steps: int) -> dict:
    return {
        "net_config": policy.cfg.model_dump(),
        "factorization": policy.factorization,
        "env": cfg.env.model_dump(),
        "agent_order": [int(i) for i in order],
        "value_normalizer": normalizer.state(),
        "env_steps": env_steps,
        "run_name": cfg.run_name,
    }


def build_policy(cfg: RunConfig, env: Env, rng: np.random.Generator) -> JointPolicy:
    spec = env.spec
    net_cfg = cfg.net.resolve(spec.n_agents, spec.obs_dim, spec.n_actions)
    return JointPolicy(net_cfg, rng, factorization=cfg.loss.factorization)


def run(cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Alternate collection and training until ``total_env_steps`` are consumed.

    Every random draw descends from ``cfg.seed``, so a config fully determines
    the metrics log.  With ``out_dir`` set, writes ``metrics.csv``,
    ``config.resolved.json``, ``summary.json`` and checkpoints there.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(snapshot(cfg), indent=2) + "\n")

    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    init_rng, env_rng, act_rng, shuffle_rng, eval_rng, order_rng = (np.random.default_rng(s) for s in seeds)

    proto = make_env(cfg.env.name, cfg.env.params)
    policy = build_policy(cfg, proto, init_rng)
    order = agent_order(cfg, proto.spec.n_agents, order_rng)
    optimizer = Adam(policy.parameters(), lr=cfg.lr)
    normalizer = ValueNormalizer(enabled=cfg.use_value_norm)
    schedule = LrSchedule(cfg.lr_schedule, cfg.lr, cfg.total_env_steps, cfg.lr_decay_rate)
    pool = EnvPool([make_env(cfg.env.name, cfg.env.params) for _ in range(cfg.n_envs)], env_rng)
    buffer = RolloutBuffer(cfg.n_envs, cfg.steps_per_collection)
    metrics = MetricsLog(out / "metrics.csv" if out else None)

    def do_eval(steps: int, lr: float) -> None:
        res = evaluate(policy, proto, cfg.eval_episodes, order, eval_rng)
        metrics.append(env_steps=steps, mean_return=res.mean_return, success_rate=res.success_rate, lr=lr)
        log.info("%s steps=%d return=%.4f success=%.3f", cfg.run_name, steps, res.mean_return, res.success_rate)
        if out is not None:
            save_params(out / "checkpoints" / "latest.json", policy.state_dict(),
                        checkpoint_meta(cfg, policy, order, normalizer, steps))

    env_steps, phases = 0, 0
    next_eval = cfg.eval_interval
    do_eval(0, schedule(0))
    while env_steps < cfg.total_env_steps:
        T = min(cfg.steps_per_collection, cfg.total_env_steps - env_steps)
        T -= T % cfg.n_envs
        if T == 0:
            break
        lr = schedule(env_steps)
        collect(policy, pool, buffer, T, order, act_rng, normalizer)
        env_steps += T
        phase_cfg = cfg if T >= cfg.batch_size else cfg.model_copy(update={"batch_size": T})
        for diag in train_phase(policy, optimizer, buffer, phase_cfg, order, lr, shuffle_rng, normalizer):
            metrics.append(env_steps=env_steps, lr=lr, **{k: diag[k] for k in METRIC_COLUMNS if k in diag})
        phases += 1
        if env_steps >= next_eval or env_steps >= cfg.total_env_steps:
            do_eval(env_steps, schedule(env_steps))
            while next_eval <= env_steps:
                next_eval += cfg.eval_interval

    result = RunResult(policy, metrics, order, normalizer, env_steps, phases, out)
    if out is not None:
        save_params(out / "checkpoints" / "final.json", policy.state_dict(),
                    checkpoint_meta(cfg, policy, order, normalizer, env_steps))
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n")
    return result


def load_policy(path: str | Path) -> tuple[JointPolicy, dict]:
    from ..config import NetConfig

    params, meta = nx.load_params(path)
    try:
        net_cfg = NetConfig(**meta["net_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise nx.CheckpointError(f"{path}: invalid or missing net_config: {exc}") from exc
    policy = JointPolicy(net_cfg, 0, factorization=meta.get("factorization", "conditional"))
    policy.load_state_dict(params)
    return policy, meta
