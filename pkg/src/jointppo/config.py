"""Configuration models shared by the library and the CLI.

Defaults follow the reference hyperparameters (lr 5e-4, batch 3200, gamma 0.99,
entropy coefficient 0.01, hidden width 64, one attention block, one hidden
layer, Adam, linear lr decay, value normalisation on).  Unknown keys are
rejected everywhere.
"""
from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NetConfig(_Strict):
    n_agents: int = Field(ge=1)
    obs_dim: int = Field(ge=1)
    n_actions: int = Field(ge=1)
    hidden_dim: int = Field(64, ge=1)
    n_heads: int = Field(1, ge=1)
    n_blocks: int = Field(1, ge=1)
    n_hidden_layers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        return self


class NetSettings(_Strict):
    """The width/depth part of NetConfig; agent and action counts come from the env."""

    hidden_dim: int = Field(64, ge=1)
    n_heads: int = Field(1, ge=1)
    n_blocks: int = Field(1, ge=1)
    n_hidden_layers: int = Field(1, ge=1)

    def resolve(self, n_agents: int, obs_dim: int, n_actions: int) -> NetConfig:
        return NetConfig(n_agents=n_agents, obs_dim=obs_dim, n_actions=n_actions, **self.model_dump())


class GAEConfig(_Strict):
    gamma: float = Field(0.99, ge=0.0, lt=1.0)
    lam: float = Field(0.95, ge=0.0, le=1.0)
    horizon: int | None = Field(None, ge=0)


class LossConfig(_Strict):
    clip_eps: float = Field(0.1, gt=0.0)
    lambda1: float = Field(5.0, ge=0.0)
    lambda2: float = Field(0.01, ge=0.0)
    value_clip_mode: Literal["paper_min", "standard_max"] = "paper_min"
    advantage_norm: bool = True
    factorization: Literal["conditional", "independent"] = "conditional"


class EnvConfig(_Strict):
    name: Literal["xor", "coordination", "gridworld"]
    params: dict[str, Any] = Field(default_factory=dict)


class TrainConfig(_Strict):
    total_env_steps: int = Field(50_000, ge=1)
    steps_per_collection: int = Field(3200, ge=1)
    n_envs: int = Field(8, ge=1)
    batch_size: int = Field(3200, ge=1)
    ppo_epochs: int = Field(15, ge=0)
    minibatch_count: int = Field(1, ge=1)
    lr: float = Field(5e-4, gt=0.0)
    lr_schedule: Literal["constant", "linear", "exponential"] = "linear"
    lr_decay_rate: float = Field(0.99, gt=0.0, le=1.0)
    max_grad_norm: float = Field(10.0, ge=0.0)
    use_value_norm: bool = True
    gae: GAEConfig = GAEConfig()
    loss: LossConfig = LossConfig()
    net: NetSettings = NetSettings()
    agent_order_mode: Literal["default", "inverse", "random_per_run", "fixed"] = "default"
    agent_order: list[int] | None = None
    seed: int = 0
    eval_interval: int = Field(3200, ge=1)
    eval_episodes: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _consistency(self):
        errors = []
        if self.batch_size > self.steps_per_collection:
            errors.append(
                f"batch_size ({self.batch_size}) exceeds steps_per_collection ({self.steps_per_collection})"
            )
        if self.steps_per_collection % self.n_envs:
            errors.append(
                f"steps_per_collection ({self.steps_per_collection}) must be a multiple of n_envs ({self.n_envs})"
            )
        if self.minibatch_count > self.batch_size:
            errors.append(f"minibatch_count ({self.minibatch_count}) exceeds batch_size ({self.batch_size})")
        if self.agent_order_mode == "fixed" and self.agent_order is None:
            errors.append("agent_order_mode 'fixed' requires agent_order")
        if self.agent_order is not None and sorted(self.agent_order) != list(range(len(self.agent_order))):
            errors.append(f"agent_order {self.agent_order} is not a permutation of 0..n-1")
        if errors:
            raise ValueError("; ".join(errors))
        return self


class RunConfig(TrainConfig):
    run_name: str
    env: EnvConfig
    output_dir: str = "runs"

    @field_validator("run_name")
    @classmethod
    def _name_ok(cls, v: str) -> str:
        if not v or "/" in v or v in (".", ".."):
            raise ValueError("run_name must be a non-empty file-name-safe string")
        return v

    def train_config(self) -> TrainConfig:
        data = self.model_dump(exclude={"run_name", "env", "output_dir"})
        return TrainConfig(**data)


SNAPSHOT_FORMAT = "jointppo-run-config"


def deviations(cfg: TrainConfig) -> dict[str, dict[str, Any]]:
    """Settings that differ from the reference defaults, as dotted keys."""
    ref = _flat(TrainConfig().model_dump(mode="json"))
    mine = _flat(cfg.train_config().model_dump(mode="json") if isinstance(cfg, RunConfig)
                 else cfg.model_dump(mode="json"))
    return {k: {"value": v, "reference": ref.get(k)} for k, v in mine.items() if ref.get(k) != v}


def snapshot(cfg: RunConfig) -> dict[str, Any]:
    return {"format": SNAPSHOT_FORMAT, "config": cfg.model_dump(mode="json"),
            "deviations_from_reference": deviations(cfg)}


def unwrap_snapshot(data: dict[str, Any]) -> dict[str, Any]:
    """Accept either a plain config document or a resolved snapshot."""
    if isinstance(data, dict) and data.get("format") == SNAPSHOT_FORMAT:
        return data["config"]
    return data


def _flat(d: dict, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        if isinstance(v, dict) and v:
            out.update(_flat(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out
