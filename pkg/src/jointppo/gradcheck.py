"""Central finite-difference check of the full training loss against backprop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import LossConfig, NetConfig
from .losses import jointppo_objective
from .numerics import Tape
from .policy import JointPolicy

# entries smaller than this are compared on an absolute scale of tolerance * REL_FLOOR
REL_FLOOR = 1e-5


@dataclass
class SyntheticBatch:
    obs: np.ndarray
    avail: np.ndarray
    actions: np.ndarray
    old_log_prob: np.ndarray
    advantages: np.ndarray
    old_values: np.ndarray
    targets: np.ndarray
    order: np.ndarray


def synthetic_batch(policy: JointPolicy, steps: int, rng: np.random.Generator) -> SyntheticBatch:
    cfg = policy.cfg
    obs = rng.normal(size=(steps, cfg.n_agents, cfg.obs_dim))
    avail = rng.random((steps, cfg.n_agents, cfg.n_actions)) < 0.8
    avail[..., 0] |= ~avail.any(axis=-1)
    order = rng.permutation(cfg.n_agents)
    cache = policy.encode(obs)
    out = policy.generate(cache, order, avail, rng)
    return SyntheticBatch(
        obs=obs,
        avail=avail,
        actions=out.sampled_actions,
        old_log_prob=out.joint_log_prob + rng.normal(0.0, 0.05, steps),
        advantages=rng.normal(size=steps),
        old_values=out.value + rng.normal(0.0, 0.05, steps),
        targets=rng.normal(size=steps),
        order=order,
    )


def batch_loss(policy: JointPolicy, batch: SyntheticBatch, loss_cfg: LossConfig):
    ev = policy.evaluate_actions(policy.encode(batch.obs), batch.order, batch.actions, batch.avail)
    return jointppo_objective(ev, batch.old_log_prob, batch.advantages, batch.old_values, batch.targets,
                              loss_cfg).total


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    seconds: float = 0.0
    n_params: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def group_errors(self) -> dict[str, float]:
        """Worst error per parameter group (encoder, critic, decoder)."""
        out: dict[str, float] = {}
        for name, err in self.max_rel_error.items():
            group = name.split(".")[0]
            out[group] = max(out.get(group, 0.0), err)
        return out

    def failed_groups(self) -> list[str]:
        return sorted({n.split(".")[0] for n in self.failures})

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def lines(self) -> list[str]:
        out = [f"{name:45s} {err:.3e}{'  FAIL' if name in self.failures else ''}"
               for name, err in self.max_rel_error.items()]
        name, err = self.worst()
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict} max rel. error {err:.3e} ({name}) tolerance {self.tolerance:g} "
                   f"over {self.n_params} parameters in {self.seconds:.1f}s")
        return out


def gradcheck(net_cfg: NetConfig, loss_cfg: LossConfig | None = None, steps: int = 3, seed: int = 0,
              h: float = 1e-5, tolerance: float = 1e-4,
              grad_hook: Callable[[dict[str, np.ndarray]], None] | None = None) -> GradcheckReport:
    """Compare every analytic parameter gradient of the total loss with central differences.

    ``grad_hook`` may edit the analytic gradients before comparison (used as a
    negative control in tests).
    """
    import time

    start = time.perf_counter()
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(seed)
    policy = JointPolicy(net_cfg, rng, factorization=loss_cfg.factorization)
    batch = synthetic_batch(policy, steps, rng)

    params = policy.parameters()
    with Tape() as tape:
        loss = batch_loss(policy, batch, loss_cfg)
    tape.backward(loss, params)
    analytic = {name: t.grad.copy() for name, t in policy.params.items()}
    if grad_hook is not None:
        grad_hook(analytic)

    errors: dict[str, float] = {}
    for name, t in policy.params.items():
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss(policy, batch, loss_cfg).item()
            flat[i] = orig - h
            down = batch_loss(policy, batch, loss_cfg).item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), REL_FLOOR)
        errors[name] = float((np.abs(a - numeric) / denom).max())

    report = GradcheckReport(errors, tolerance, n_params=sum(t.data.size for t in params))
    report.failures = [n for n, e in errors.items() if not e < tolerance]
    report.seconds = time.perf_counter() - start
    return report
