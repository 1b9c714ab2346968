from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeadapt.envs import (
    EnvState,
    FrozenLakeEnv,
    GridLayout,
    SafetyDataset,
    SafetyEntry,
    build_safety_dataset,
    make_env,
)
from safeadapt.policy_net import MlpSpec, ParamVector, forward, orthogonal_init
from safeadapt.ppo import (
    FinetuneConfig,
    PpoConfig,
    PpoLearner,
    RolloutBuffer,
    critical_state_rate,
    gae,
    init_actor_critic,
    ppo_loss_and_grads,
    ppo_update,
    safety_finetune,
    train_source,
)
from safeadapt.rashomon import delta_star, search_inverse_temperature


def reference_loss(actor, critic, obs, actions, old_lp, adv, returns, cfg):
    """Straightforward per-sample loop over the clipped PPO objective."""
    total_pg, total_v, total_ent = 0.0, 0.0, 0.0
    for x, a, olp, A, R in zip(obs, actions, old_lp, adv, returns):
        z = forward(actor, actor.spec, x)
        p = np.exp(z - z.max())
        p /= p.sum()
        r = p[a] / np.exp(olp)
        total_pg += -min(r * A, np.clip(r, 1 - cfg.clip_range, 1 + cfg.clip_range) * A)
        total_ent += -np.sum(p * np.log(p))
        total_v += (R - forward(critic, critic.spec, x)[0]) ** 2
    n = len(obs)
    return total_pg / n + cfg.vf_coef * total_v / n - cfg.ent_coef * total_ent / n


def synthetic_batch(rng, n=32, d=6):
    obs = rng.standard_normal((n, d))
    actions = rng.integers(0, 4, n)
    old_lp = np.log(rng.uniform(0.1, 0.5, n))
    adv = rng.standard_normal(n)
    returns = rng.standard_normal(n)
    return obs, actions, old_lp, adv, returns


def nets(rng, d=6, hidden=(8,)):
    spec = MlpSpec(d, hidden, 4)
    actor = ParamVector(spec, 0.5 * rng.standard_normal(spec.n_params))
    cspec = MlpSpec(d, hidden, 1)
    critic = ParamVector(cspec, 0.5 * rng.standard_normal(cspec.n_params))
    return actor, critic


class TestGae:
    def test_gamma_zero(self):
        r, v = np.array([1.0, 0.5, -1.0]), np.array([0.2, 0.3, 0.4])
        adv, ret = gae(r, v, [False, False, False], 9.0, 0.0, 0.95)
        np.testing.assert_allclose(adv, r - v)
        np.testing.assert_allclose(ret, r)

    def test_single_transition(self):
        adv, _ = gae([1.0], [0.5], [False], 1.0, 0.99, 0.95)
        assert adv[0] == pytest.approx(1.49, abs=1e-12)

    def test_done_cuts_bootstrap(self):
        adv, _ = gae([1.0, 2.0], [0.5, 0.7], [True, False], 3.0, 0.99, 0.95)
        assert adv[0] == pytest.approx(0.5, abs=1e-12)
        assert adv[1] == pytest.approx(2.0 + 0.99 * 3.0 - 0.7, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gae([1.0, 2.0], [0.0], [False, False], 0.0, 0.9, 0.9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.booleans()), min_size=1, max_size=30))
    def test_reward_to_go(self, steps):
        r = np.array([s[0] for s in steps])
        dones = np.array([s[1] for s in steps])
        dones[-1] = True
        adv, _ = gae(r, np.zeros_like(r), dones, 0.0, 1.0, 1.0)
        expected = np.zeros_like(r)
        acc = 0.0
        for t in range(len(r) - 1, -1, -1):
            acc = r[t] + (0.0 if dones[t] else acc)
            expected[t] = acc
        np.testing.assert_allclose(adv, expected, atol=1e-9)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(gamma=1.0), dict(gamma=-0.1), dict(gae_lambda=1.5),
                                     dict(clip_range=0.0), dict(minibatch_size=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            PpoConfig(**bad)

    def test_buffer_lengths(self):
        with pytest.raises(ValueError):
            RolloutBuffer(np.zeros((3, 2)), np.zeros(2), np.zeros(3), np.zeros(3),
                          np.zeros(3), np.zeros(3))


class TestLossAndGradients:
    def test_loss_matches_reference(self, rng):
        actor, critic = nets(rng)
        cfg = PpoConfig(ent_coef=0.05)
        batch = synthetic_batch(rng)
        stats, _, _ = ppo_loss_and_grads(actor, critic, *batch, cfg)
        assert stats["loss"] == pytest.approx(reference_loss(actor, critic, *batch, cfg),
                                              abs=1e-10)

    def test_gradients_match_finite_differences(self, rng):
        actor, critic = nets(rng)
        cfg = PpoConfig(ent_coef=0.05)
        batch = synthetic_batch(rng, 16)
        _, g_a, g_c = ppo_loss_and_grads(actor, critic, *batch, cfg)
        h = 1e-6
        for params, g in ((actor, g_a), (critic, g_c)):
            for i in rng.choice(params.values.size, 25, replace=False):
                orig = params.values[i]
                params.values[i] = orig + h
                fp = reference_loss(actor, critic, *batch, cfg)
                params.values[i] = orig - h
                fm = reference_loss(actor, critic, *batch, cfg)
                params.values[i] = orig
                assert g[i] == pytest.approx((fp - fm) / (2 * h), abs=1e-6)

    def test_clipped_sample_has_no_gradient(self, rng):
        actor, critic = nets(rng)
        cfg = PpoConfig(ent_coef=0.0, vf_coef=0.0)
        obs, actions = rng.standard_normal((1, 6)), np.array([2])
        lp = np.log(np.exp(forward(actor, actor.spec, obs[0]))[2]
                    / np.exp(forward(actor, actor.spec, obs[0])).sum())
        # old prob much smaller: ratio far above 1 + clip, positive advantage
        _, g_a, _ = ppo_loss_and_grads(actor, critic, obs, actions, np.array([lp - 1.0]),
                                       np.array([1.0]), np.array([0.0]), cfg)
        assert not g_a.any()

    def test_zero_advantage_keeps_actor(self, rng):
        actor, critic = nets(rng)
        before = actor.values.copy()
        obs, actions, old_lp, _, returns = synthetic_batch(rng, 64)
        buf = RolloutBuffer(obs, actions, np.zeros(64), np.zeros(64, bool), old_lp, np.zeros(64),
                            np.zeros(64), returns)
        critic_before = critic.values.copy()
        ppo_update(actor, critic, buf, PpoConfig(ent_coef=0.0), rng)
        assert actor.values.tobytes() == before.tobytes()
        assert not np.array_equal(critic.values, critic_before)

    def test_fuzz_finite(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            actor, critic = nets(rng)
            obs, actions, old_lp, adv, returns = synthetic_batch(rng, 64)
            adv *= 10 ** rng.uniform(-3, 3)
            buf = RolloutBuffer(obs, actions, np.zeros(64), np.zeros(64, bool), old_lp,
                                np.zeros(64), adv, returns * 10)
            ppo_update(actor, critic, buf, PpoConfig(n_epochs=2), rng)
            assert np.all(np.isfinite(actor.values)) and np.all(np.isfinite(critic.values))


class TestTraining:
    def test_trivial_env_stops_early(self):
        env = FrozenLakeEnv(GridLayout.from_text("tiny", "SG\n"), 1)
        cfg = PpoConfig(max_timesteps=20_000, rollout_steps=128, n_epochs=4, learning_rate=3e-3)
        _, _, rows = train_source(env, (8,), cfg, np.random.default_rng(0))
        assert rows[-1]["greedy_eval_reward"] >= 1.0 and rows[-1]["step"] < 20_000

    def test_deterministic_log(self):
        env = make_env("standard_4x4", 1)
        cfg = PpoConfig(max_timesteps=1024, early_stop=False)
        a1, c1, r1 = train_source(env, (16, 16), cfg, np.random.default_rng(3))
        a2, c2, r2 = train_source(env, (16, 16), cfg, np.random.default_rng(3))
        assert a1.values.tobytes() == a2.values.tobytes()
        assert c1.values.tobytes() == c2.values.tobytes()
        assert str(r1) == str(r2)

    def test_collect_bookkeeping(self):
        env = make_env("standard_4x4", 1)
        rng = np.random.default_rng(0)
        actor, critic = init_actor_critic(MlpSpec(18, (8,), 4), rng)
        learner = PpoLearner(actor, critic, env, PpoConfig(), rng)
        buf = learner.collect(300)
        assert len(buf) == 300 and learner.timesteps == 300
        assert buf.dones.sum() == len(learner.finished_returns)
        np.testing.assert_allclose(buf.returns, buf.advantages + buf.values)


@pytest.fixture(scope="module")
def fl_data():
    env = make_env("standard_4x4", 1)
    return env, build_safety_dataset(env)


class TestSafetyFinetune:
    def test_already_safe_converges_immediately(self, fl_data):
        env, ds = fl_data
        spec = MlpSpec(18, (), 4)
        values = np.zeros(spec.n_params)
        W = values[:72].reshape(4, 18)
        for e in ds.entries:
            W[:, e.state_key.cell] = np.where(e.safe_mask, 20.0, -20.0)
        actor, rows, ok = safety_finetune(ParamVector(spec, values), ds,
                                          FinetuneConfig(include_trajectory=False),
                                          np.random.default_rng(0))
        assert ok and len(rows) == 1

    def test_single_state_single_action(self, fl_data):
        env, ds = fl_data
        mask = np.array([False, False, True, False])
        one = SafetyDataset((SafetyEntry(env.encode(EnvState(6)), mask, EnvState(6)),), "x", 1)
        rng = np.random.default_rng(1)
        actor = orthogonal_init(MlpSpec(18, (16,), 4), rng)
        out, _, ok = safety_finetune(actor, one, FinetuneConfig(max_epochs=500,
                                                                include_trajectory=False), rng)
        assert ok and int(np.argmax(forward(out, out.spec, one.states[0]))) == 2

    @pytest.mark.parametrize("mode,lr", [("allowed", 1e-2), ("multilabel", 2e-3)])
    def test_postcondition_and_monotone_loss(self, fl_data, mode, lr):
        env, ds = fl_data
        rng = np.random.default_rng(2)
        actor = orthogonal_init(MlpSpec(18, (32, 32), 4), rng, output_gain=1.0)
        cfg = FinetuneConfig(mode=mode, learning_rate=lr, max_epochs=3000)
        out, rows, ok = safety_finetune(actor, ds, cfg, rng, env)
        assert ok and critical_state_rate(out, ds) == 1.0
        search_inverse_temperature(out, ds, delta_star(ds))
        losses = [r["loss"] for r in rows]
        for t in range(len(losses) - 50):
            assert losses[t + 50] <= losses[t] + 1e-6

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            safety_finetune(orthogonal_init(MlpSpec(4, (4,), 4), np.random.default_rng(0)),
                            SafetyDataset((), "x", 1), FinetuneConfig(), np.random.default_rng(0))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            FinetuneConfig(mode="dagger")
