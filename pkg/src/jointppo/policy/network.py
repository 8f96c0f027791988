"""Transformer joint policy: encoder, centralised critic, autoregressive decoder.

Shapes are batched throughout: observations ``(B, n, obs_dim)``, availability
masks ``(B, n, n_actions)``, joint actions ``(B, n)``.  Everything returned to
callers is in agent order; the generation order only affects how the decoder
walks the agents.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .. import numerics as nx
from ..config import NetConfig
from ..numerics import ContractError, DimensionError, Tensor
from ..numerics.init import glorot_uniform, ones, zeros

Factorization = Literal["conditional", "independent"]

HEAD_GAIN = 0.01


@dataclass
class ForwardCache:
    encoded_obs: Tensor  # (B, n, hidden)
    attention: list[np.ndarray] = field(default_factory=list)


@dataclass
class PolicyOutput:
    per_agent_logits: np.ndarray  # (B, n, A), masked entries hold the raw logit
    per_agent_log_probs: np.ndarray  # (B, n)
    joint_log_prob: np.ndarray  # (B,)
    sampled_actions: np.ndarray  # (B, n) int
    value: np.ndarray  # (B,)
    probs: np.ndarray  # (B, n, A)
    entropies: np.ndarray  # (B, n)


@dataclass
class ActionEvaluation:
    joint_log_prob: Tensor  # (B,)
    per_agent_log_probs: Tensor  # (B, n), agent order
    per_agent_entropies: Tensor  # (B, n), agent order
    value: Tensor  # (B,)
    logits: Tensor  # (B, n, A), generation order


def _layer_norm_params(params, prefix, dim):
    params[f"{prefix}.gain"] = ones(dim, name=f"{prefix}.gain")
    params[f"{prefix}.bias"] = zeros(dim, name=f"{prefix}.bias")


def _linear_params(params, prefix, rng, fan_in, fan_out, bias=True, gain=1.0):
    params[f"{prefix}.w"] = glorot_uniform(rng, fan_in, fan_out, gain, name=f"{prefix}.w")
    if bias:
        params[f"{prefix}.b"] = zeros(fan_out, name=f"{prefix}.b")


def _attention_params(params, prefix, rng, d):
    for proj in ("q", "k", "v", "o"):
        _linear_params(params, f"{prefix}.{proj}", rng, d, d)


def _mlp_params(params, prefix, rng, d, depth):
    for j in range(depth + 1):
        _linear_params(params, f"{prefix}.l{j}", rng, d, d)


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Build the parameter set; the names and shapes depend only on ``cfg``."""
    d = cfg.hidden_dim
    p: dict[str, Tensor] = {}
    _linear_params(p, "encoder.embed", rng, cfg.obs_dim, d)
    _layer_norm_params(p, "encoder.embed_ln", d)
    for b in range(cfg.n_blocks):
        pre = f"encoder.block{b}"
        _attention_params(p, f"{pre}.attn", rng, d)
        _layer_norm_params(p, f"{pre}.ln1", d)
        _mlp_params(p, f"{pre}.mlp", rng, d, cfg.n_hidden_layers)
        _layer_norm_params(p, f"{pre}.ln2", d)

    _linear_params(p, "critic.l0", rng, d, d)
    _layer_norm_params(p, "critic.ln", d)
    _linear_params(p, "critic.out", rng, d, 1)

    bound = np.sqrt(6.0 / (1 + d))
    p["decoder.start"] = Tensor(rng.uniform(-bound, bound, size=d), requires_grad=True, name="decoder.start")
    _linear_params(p, "decoder.action_embed", rng, cfg.n_actions, d, bias=False)
    _layer_norm_params(p, "decoder.token_ln", d)
    for b in range(cfg.n_blocks):
        pre = f"decoder.block{b}"
        _attention_params(p, f"{pre}.self_attn", rng, d)
        _layer_norm_params(p, f"{pre}.ln1", d)
        _attention_params(p, f"{pre}.cross_attn", rng, d)
        _layer_norm_params(p, f"{pre}.ln2", d)
        _mlp_params(p, f"{pre}.mlp", rng, d, cfg.n_hidden_layers)
        _layer_norm_params(p, f"{pre}.ln3", d)
    _linear_params(p, "decoder.head.l0", rng, d, d)
    _layer_norm_params(p, "decoder.head.ln", d)
    _linear_params(p, "decoder.head.out", rng, d, cfg.n_actions, gain=HEAD_GAIN)
    return p


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def check_order(order, n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or sorted(order.tolist()) != list(range(n)):
        raise ContractError(f"order {order.tolist()} is not a permutation of 0..{n - 1}")
    return order


class JointPolicy:
    """Encoder (phi), critic (psi) and decoder (theta) over one parameter dict."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator | int = 0,
                 factorization: Factorization = "conditional"):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.factorization = factorization
        self.params = init_params(cfg, rng)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self, group: str | None = None) -> list[Tensor]:
        if group is None:
            return list(self.params.values())
        return [t for name, t in self.params.items() if name.startswith(group + ".")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ContractError(f"{name}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()

    def copy(self) -> "JointPolicy":
        clone = JointPolicy.__new__(JointPolicy)
        clone.cfg = self.cfg
        clone.factorization = self.factorization
        clone.params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        return clone

    # -- building blocks ------------------------------------------------------

    def _linear(self, x, prefix):
        out = x @ self.params[f"{prefix}.w"]
        b = self.params.get(f"{prefix}.b")
        return out + b if b is not None else out

    def _ln(self, x, prefix):
        return nx.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def _mlp(self, x, prefix):
        for j in range(self.cfg.n_hidden_layers):
            x = nx.gelu(self._linear(x, f"{prefix}.l{j}"))
        return self._linear(x, f"{prefix}.l{self.cfg.n_hidden_layers}")

    def _attention(self, q_in, kv_in, prefix, mask, record):
        B, L, d = q_in.shape
        Lk = kv_in.shape[1]
        h = self.cfg.n_heads
        dh = d // h

        def heads(x, length):
            return x.reshape(B, length, h, dh).transpose(0, 2, 1, 3)

        q = heads(self._linear(q_in, f"{prefix}.q"), L)
        k = heads(self._linear(kv_in, f"{prefix}.k"), Lk)
        v = heads(self._linear(kv_in, f"{prefix}.v"), Lk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        att = nx.softmax(scores, mask)
        if record is not None:
            record.append(att.data)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return self._linear(out, f"{prefix}.o")

    # -- public operations ----------------------------------------------------

    def encode(self, obs) -> ForwardCache:
        obs = nx.tensor.as_tensor(obs)
        cfg = self.cfg
        if obs.ndim != 3 or obs.shape[1:] != (cfg.n_agents, cfg.obs_dim):
            raise DimensionError(
                f"observations must be (B, {cfg.n_agents}, {cfg.obs_dim}), got {obs.shape}"
            )
        attention: list[np.ndarray] = []
        x = self._ln(nx.gelu(self._linear(obs, "encoder.embed")), "encoder.embed_ln")
        for b in range(cfg.n_blocks):
            pre = f"encoder.block{b}"
            x = self._ln(x + self._attention(x, x, f"{pre}.attn", None, attention), f"{pre}.ln1")
            x = self._ln(x + self._mlp(x, f"{pre}.mlp"), f"{pre}.ln2")
        return ForwardCache(encoded_obs=x, attention=attention)

    def value(self, cache: ForwardCache) -> Tensor:
        pooled = cache.encoded_obs.mean(axis=1)
        h = self._ln(nx.gelu(self._linear(pooled, "critic.l0")), "critic.ln")
        return self._linear(h, "critic.out").reshape(-1)

    def _tokens(self, actions_gen: np.ndarray, enc_gen: Tensor) -> Tensor:
        """Decoder input: start token then the embedded one-hot of each preceding action.

        Position i also receives the encoding of the agent it acts for; nothing
        else in the action stream says which agent that is.
        """
        B, n = actions_gen.shape
        d = self.cfg.hidden_dim
        start = self.params["decoder.start"].reshape(1, 1, d) * np.ones((B, 1, 1))
        if n == 1:
            return self._ln(start + enc_gen, "decoder.token_ln")
        onehot = np.zeros((B, n - 1, self.cfg.n_actions))
        if self.factorization == "conditional":
            np.put_along_axis(onehot, actions_gen[:, :-1, None], 1.0, axis=2)
        prev = nx.gelu(onehot @ self.params["decoder.action_embed.w"])
        return self._ln(nx.concat([start, prev], axis=1) + enc_gen, "decoder.token_ln")

    def _decode_logits(self, enc_gen: Tensor, actions_gen: np.ndarray, record=None) -> Tensor:
        n = self.cfg.n_agents
        mask = _causal_mask(n)
        y = self._tokens(actions_gen, enc_gen)
        for b in range(self.cfg.n_blocks):
            pre = f"decoder.block{b}"
            y = self._ln(y + self._attention(y, y, f"{pre}.self_attn", mask, record), f"{pre}.ln1")
            y = self._ln(y + self._attention(y, enc_gen, f"{pre}.cross_attn", mask, record), f"{pre}.ln2")
            y = self._ln(y + self._mlp(y, f"{pre}.mlp"), f"{pre}.ln3")
        h = self._ln(nx.gelu(self._linear(y, "decoder.head.l0")), "decoder.head.ln")
        return self._linear(h, "decoder.head.out")

    def _check_masks(self, avail, batch: int) -> np.ndarray:
        shape = (batch, self.cfg.n_agents, self.cfg.n_actions)
        if avail is None:
            return np.ones(shape, dtype=bool)
        avail = np.asarray(avail, dtype=bool)
        if avail.shape != shape:
            raise DimensionError(f"availability mask must be {shape}, got {avail.shape}")
        if not avail.any(axis=-1).all():
            raise nx.InvalidMaskError("an agent has no available action")
        return avail

    def generate(self, cache: ForwardCache, order, avail=None, rng: np.random.Generator | None = None,
                 deterministic: bool = False) -> PolicyOutput:
        """Sample a joint action agent by agent along ``order``.

        Each step reruns the causal decoder with the actions chosen so far; later
        slots hold placeholders that the mask hides from earlier positions.
        """
        n, A = self.cfg.n_agents, self.cfg.n_actions
        order = check_order(order, n)
        enc = cache.encoded_obs
        B = enc.shape[0]
        avail = self._check_masks(avail, B)
        if rng is None and not deterministic:
            raise ContractError("stochastic generation needs an rng")
        enc_gen = enc[:, order]
        avail_gen = avail[:, order]
        actions_gen = np.zeros((B, n), dtype=np.int64)
        logits_gen = np.zeros((B, n, A))
        logp_gen = np.zeros((B, n, A))
        for i in range(n):
            logits = self._decode_logits(enc_gen, actions_gen).data[:, i]
            logp = nx.log_softmax(logits, avail_gen[:, i]).data
            probs = np.where(avail_gen[:, i], np.exp(logp), 0.0)
            if deterministic:
                choice = np.argmax(np.where(avail_gen[:, i], logits, -np.inf), axis=1)
            else:
                cdf = np.cumsum(probs, axis=1)
                u = rng.random(B) * cdf[:, -1]
                choice = (cdf <= u[:, None]).sum(axis=1)
                choice = np.minimum(choice, A - 1)
                # guard against landing on a zero-probability tail after rounding
                bad = ~avail_gen[np.arange(B), i, choice]
                if bad.any():
                    last_live = A - 1 - np.argmax(avail_gen[:, i, ::-1], axis=1)
                    choice = np.where(bad, last_live, choice)
            actions_gen[:, i] = choice
            logits_gen[:, i] = logits
            logp_gen[:, i] = logp

        inv = np.argsort(order)
        logp_all = logp_gen[:, inv]
        actions = actions_gen[:, inv]
        probs_all = np.where(avail, np.exp(logp_all), 0.0)
        per_agent = np.take_along_axis(logp_all, actions[:, :, None], axis=2)[:, :, 0]
        entropies = -(probs_all * logp_all).sum(axis=2)
        return PolicyOutput(
            per_agent_logits=logits_gen[:, inv],
            per_agent_log_probs=per_agent,
            joint_log_prob=per_agent.sum(axis=1),
            sampled_actions=actions,
            value=self.value(cache).data.copy(),
            probs=probs_all,
            entropies=entropies,
        )

    def evaluate_actions(self, cache: ForwardCache, order, actions, avail=None) -> ActionEvaluation:
        """Teacher-forced log-probabilities, entropies and value for stored joint actions."""
        n = self.cfg.n_agents
        order = check_order(order, n)
        actions = np.asarray(actions, dtype=np.int64)
        enc = cache.encoded_obs
        B = enc.shape[0]
        if actions.shape != (B, n):
            raise DimensionError(f"actions must be ({B}, {n}), got {actions.shape}")
        avail = self._check_masks(avail, B)
        if (actions < 0).any() or (actions >= self.cfg.n_actions).any():
            raise ContractError("action index out of range")
        if not np.take_along_axis(avail, actions[:, :, None], axis=2).all():
            raise ContractError("an action is unavailable under its mask")

        logits = self._decode_logits(enc[:, order], actions[:, order])
        logp = nx.log_softmax(logits, avail[:, order])
        probs = nx.softmax(logits, avail[:, order])
        entropy_gen = -(probs * logp).sum(axis=2)
        chosen_gen = nx.take(logp, actions[:, order][:, :, None], axis=2).reshape(B, n)
        inv = np.argsort(order)
        per_agent = chosen_gen[:, inv]
        return ActionEvaluation(
            joint_log_prob=chosen_gen.sum(axis=1),
            per_agent_log_probs=per_agent,
            per_agent_entropies=entropy_gen[:, inv],
            value=self.value(cache),
            logits=logits,
        )

    def decoder_logits(self, cache: ForwardCache, order, actions) -> np.ndarray:
        """Raw per-position logits (generation order) for a teacher-forced sequence."""
        order = check_order(order, self.cfg.n_agents)
        actions = np.asarray(actions, dtype=np.int64)
        return self._decode_logits(cache.encoded_obs[:, order], actions[:, order]).data


def parameter_count(cfg: NetConfig) -> int:
    return sum(t.data.size for t in init_params(cfg, np.random.default_rng(0)).values())
