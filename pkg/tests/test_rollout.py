import json

import numpy as np
import pytest

from jointppo import numerics as nx
from jointppo.config import GAEConfig, NetConfig, RunConfig, TrainConfig
from jointppo.envs import GridworldSpread, XorGame, make_env
from jointppo.losses import ValueNormalizer
from jointppo.numerics import Adam
from jointppo.policy import JointPolicy, PolicyOutput
from jointppo.rollout import (
    Batch,
    EnvironmentFault,
    EnvPool,
    LrSchedule,
    RolloutBuffer,
    agent_order,
    collect,
    evaluate,
    load_policy,
    run,
    train_on_batch,
    train_phase,
)
from jointppo.rollout.engine import _minibatches


def policy_for(env, hidden=16, seed=0):
    s = getattr(env, "spec", env)
    cfg = NetConfig(n_agents=s.n_agents, obs_dim=s.obs_dim, n_actions=s.n_actions, hidden_dim=hidden)
    return JointPolicy(cfg, np.random.default_rng(seed))


def pool_of(name, k, seed=0, **params):
    return EnvPool([make_env(name, params) for _ in range(k)], np.random.default_rng(seed))


def small_run(**kw):
    base = dict(run_name="t", env={"name": "xor"}, total_env_steps=64, steps_per_collection=32,
                batch_size=32, n_envs=8, ppo_epochs=2, eval_interval=32, eval_episodes=8,
                net={"hidden_dim": 8})
    base.update(kw)
    return RunConfig(**base)


# ------------------------------------------------------------------ collection


def test_single_transition_has_every_field():
    pool = pool_of("gridworld", 1)
    policy = policy_for(pool.spec)
    buf = RolloutBuffer(1, 1)
    collect(policy, pool, buf, 1, np.arange(3), np.random.default_rng(0))
    (rec,) = buf.records()
    assert rec.joint_obs.shape == (3, pool.spec.obs_dim)
    assert rec.avail.shape == (3, 5) and rec.joint_action.shape == (3,)
    assert rec.joint_log_prob == pytest.approx(rec.per_agent_log_probs.sum(), abs=1e-12)
    assert np.isfinite(rec.reward) and np.isfinite(rec.value_pred)
    assert buf.tail_values is not None and len(buf.tail_values) == 1


def test_always_terminal_env_never_uses_bootstrap():
    pool = pool_of("xor", 4)
    policy = policy_for(pool.spec)
    buf = RolloutBuffer(4, 16)
    stats = collect(policy, pool, buf, 16, [0, 1], np.random.default_rng(0))
    assert all(r.terminal and not r.truncated for r in buf.records())
    assert len(stats.returns) == 16
    a = buf.to_batch(GAEConfig(), ValueNormalizer(enabled=False))
    buf.tail_values = [123.0] * 4
    b = buf.to_batch(GAEConfig(), ValueNormalizer(enabled=False))
    assert a.advantages.tobytes() == b.advantages.tobytes()


def test_truncated_steps_store_the_cut_off_value():
    pool = pool_of("gridworld", 2, max_episode_len=2)
    policy = policy_for(pool.spec)
    buf = RolloutBuffer(2, 8)
    collect(policy, pool, buf, 8, np.arange(3), np.random.default_rng(1))
    cut = [r for r in buf.records() if r.truncated]
    assert cut and all(r.bootstrap_value != 0.0 for r in cut)
    live = [r for r in buf.records() if not r.truncated]
    assert all(r.bootstrap_value == 0.0 for r in live)


def test_stored_log_probs_match_teacher_forced_evaluation():
    pool = pool_of("gridworld", 4)
    policy = policy_for(pool.spec, seed=3)
    buf = RolloutBuffer(4, 40)
    order = np.array([2, 0, 1])
    collect(policy, pool, buf, 40, order, np.random.default_rng(2))
    recs = buf.records()
    obs = np.stack([r.joint_obs for r in recs])
    ev = policy.evaluate_actions(policy.encode(obs), order, np.stack([r.joint_action for r in recs]),
                                 np.stack([r.avail for r in recs]))
    stored = np.array([r.joint_log_prob for r in recs])
    assert np.abs(ev.joint_log_prob.data - stored).max() < 1e-10


def test_collect_contracts():
    pool = pool_of("xor", 4)
    policy = policy_for(pool.spec)
    buf = RolloutBuffer(4, 8)
    with pytest.raises(nx.ContractError):
        collect(policy, pool, buf, 6, [0, 1], np.random.default_rng(0))
    collect(policy, pool, buf, 8, [0, 1], np.random.default_rng(0))
    with pytest.raises(nx.ContractError):
        collect(policy, pool, buf, 8, [0, 1], np.random.default_rng(0))


def test_environment_fault_names_the_step():
    class Broken(XorGame):
        calls = 0

        def step(self, actions):
            Broken.calls += 1
            if Broken.calls > 3:
                raise RuntimeError("simulator crashed")
            return super().step(actions)

    pool = EnvPool([Broken()], np.random.default_rng(0))
    with pytest.raises(EnvironmentFault, match="collection step 3"):
        collect(policy_for(pool.spec), pool, RolloutBuffer(1, 10), 10, [0, 1], np.random.default_rng(0))


# ------------------------------------------------------------------ training


def collected_batch(seed=0):
    pool = pool_of("coordination", 8, seed)
    policy = policy_for(pool.spec, seed=seed)
    buf = RolloutBuffer(8, 64)
    collect(policy, pool, buf, 64, [0, 1, 2], np.random.default_rng(seed))
    return policy, buf


def test_zero_epochs_leave_parameters_untouched():
    policy, buf = collected_batch()
    before = policy.state_dict()
    cfg = TrainConfig(ppo_epochs=0, steps_per_collection=64, batch_size=64, n_envs=8)
    assert train_phase(policy, Adam(policy.parameters()), buf, cfg, [0, 1, 2], 5e-4,
                       np.random.default_rng(0), ValueNormalizer()) == []
    after = policy.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert len(buf) == 0


def test_positive_advantage_raises_that_joint_action_probability():
    _, buf = collected_batch(1)
    full = buf.to_batch(GAEConfig(), ValueNormalizer(enabled=False))
    order = [0, 1, 2]
    cfg = TrainConfig(ppo_epochs=1, minibatch_count=1, loss={"advantage_norm": False, "lambda2": 0.0})
    for i in range(5):
        policy = collected_batch(1)[0]
        batch = full.take(np.array([i]))
        batch.advantages = np.array([1.0])
        train_on_batch(policy, Adam(policy.parameters()), batch, cfg, order, 1e-3,
                       np.random.default_rng(0), ValueNormalizer(enabled=False))
        ev = policy.evaluate_actions(policy.encode(batch.obs), order, batch.actions, batch.avail)
        assert ev.joint_log_prob.data[0] > batch.old_joint_log_prob[0]


def test_first_minibatch_ratio_is_one():
    policy, buf = collected_batch(2)
    cfg = TrainConfig(ppo_epochs=3, steps_per_collection=64, batch_size=64, n_envs=8, minibatch_count=4)
    diags = train_phase(policy, Adam(policy.parameters()), buf, cfg, [0, 1, 2], 5e-4,
                        np.random.default_rng(0), ValueNormalizer())
    assert len(diags) == 3
    assert diags[0]["first_ratio_error"] < 1e-8


def test_minibatch_split_sizes():
    sizes = [len(m) for m in _minibatches(np.arange(10), 3)]
    assert sizes == [4, 4, 2]
    assert [len(m) for m in _minibatches(np.arange(12), 4)] == [3, 3, 3, 3]


def test_batch_take_keeps_alignment():
    _, buf = collected_batch()
    batch = buf.to_batch(GAEConfig(), ValueNormalizer(enabled=False))
    sub = batch.take(np.array([3, 1]))
    assert isinstance(sub, Batch) and len(sub) == 2
    assert sub.actions[0].tobytes() == batch.actions[3].tobytes()
    assert sub.rewards[1] == batch.rewards[1]


# ------------------------------------------------------------------ schedules and orders


def test_linear_schedule_examples():
    s = LrSchedule("linear", 5e-4, 1000)
    assert s(0) == 5e-4
    assert s(500) == pytest.approx(2.5e-4, abs=1e-18)
    assert s(1000) == 0.0
    assert all(s(t) >= s(t + 10) for t in range(0, 1000, 10))


def test_exponential_and_constant_schedules():
    e = LrSchedule("exponential", 1e-3, 10_000, decay_rate=0.9)
    assert e(0) == 1e-3
    assert e(2000) == pytest.approx(1e-3 * 0.9 ** 20)
    assert all(e(t) >= e(t + 100) for t in range(0, 10_000, 100))
    assert LrSchedule("constant", 1e-3, 10)(7) == 1e-3
    with pytest.raises(ValueError):
        LrSchedule("cosine", 1e-3, 10)


def test_agent_order_modes():
    rng = np.random.default_rng(0)
    assert agent_order(TrainConfig(), 3, rng).tolist() == [0, 1, 2]
    assert agent_order(TrainConfig(agent_order_mode="inverse"), 3, rng).tolist() == [2, 1, 0]
    fixed = TrainConfig(agent_order_mode="fixed", agent_order=[1, 2, 0])
    assert agent_order(fixed, 3, rng).tolist() == [1, 2, 0]
    assert sorted(agent_order(TrainConfig(agent_order_mode="random_per_run"), 5, rng).tolist()) == list(range(5))
    with pytest.raises(ValueError):
        agent_order(fixed, 4, rng)


# ------------------------------------------------------------------ evaluation


class ScriptedXor:
    def encode(self, obs):
        return obs

    def generate(self, obs, order, avail, rng, deterministic=True):
        B = len(obs)
        acts = np.tile([0, 1], (B, 1))
        zeros = np.zeros(B)
        return PolicyOutput(np.zeros((B, 2, 2)), np.zeros((B, 2)), zeros, acts, zeros,
                            np.zeros((B, 2, 2)), np.zeros((B, 2)))


def test_scripted_policy_solves_xor():
    res = evaluate(ScriptedXor(), XorGame(), 10, [0, 1], np.random.default_rng(0))
    assert res.success_rate == 1.0 and res.mean_return == 1.0


def test_uniform_sampling_policy_on_xor_scores_half():
    policy = policy_for(XorGame())
    policy.params["decoder.head.out.w"].data[:] = 0.0
    res = evaluate(policy, XorGame(), 4000, [0, 1], np.random.default_rng(0), deterministic=False)
    assert abs(res.success_rate - 0.5) < 0.03


def test_evaluate_rejects_zero_episodes():
    with pytest.raises(ValueError):
        evaluate(policy_for(XorGame()), XorGame(), 0, [0, 1], np.random.default_rng(0))


def test_evaluate_plays_whole_gridworld_episodes():
    env = GridworldSpread(max_episode_len=4)
    res = evaluate(policy_for(env), env, 6, np.arange(3), np.random.default_rng(0))
    assert res.episodes == 6 and 0.0 <= res.success_rate <= 1.0


# ------------------------------------------------------------------ full runs


def test_one_collection_means_one_training_phase():
    result = run(small_run(total_env_steps=32))
    assert result.train_phases == 1 and result.env_steps == 32
    assert len(result.eval_success) == 2  # before training and at the end


def test_same_seed_gives_byte_identical_metrics(tmp_path):
    run(small_run(seed=4), tmp_path / "a")
    run(small_run(seed=4), tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    run(small_run(seed=5), tmp_path / "c")
    assert a != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_run_artifacts_and_checkpoint_round_trip(tmp_path):
    result = run(small_run(seed=1), tmp_path)
    snap = json.loads((tmp_path / "config.resolved.json").read_text())
    assert snap["config"]["seed"] == 1
    assert snap["deviations_from_reference"]["batch_size"] == {"value": 32, "reference": 3200}
    assert RunConfig(**snap["config"]) == small_run(seed=1)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_success"] == result.final_success
    policy, meta = load_policy(tmp_path / "checkpoints" / "final.json")
    assert meta["env"]["name"] == "xor" and meta["agent_order"] == [0, 1]
    for name, arr in result.policy.state_dict().items():
        assert policy.params[name].data.tobytes() == arr.tobytes()


def test_order_mode_changes_only_the_permutation(tmp_path):
    heads = {}
    for mode in ("default", "inverse", "random_per_run"):
        out = tmp_path / mode
        run(small_run(agent_order_mode=mode), out)
        heads[mode] = (out / "metrics.csv").read_text().splitlines()[0]
        snap = json.loads((out / "config.resolved.json").read_text())["config"]
        assert {k: v for k, v in snap.items() if k != "agent_order_mode"} == \
            {k: v for k, v in small_run().model_dump(mode="json").items() if k != "agent_order_mode"}
    assert len(set(heads.values())) == 1


def test_config_errors_are_listed_together():
    with pytest.raises(ValueError) as info:
        TrainConfig(batch_size=100, steps_per_collection=50, n_envs=7)
    text = str(info.value)
    assert "batch_size" in text and "multiple of n_envs" in text
