import numpy as np
import pytest

from brac import data as dt
from brac import envs
from brac.checks import sac_equivalence_gap
from brac.critics import TargetCombiner, td_target
from brac.errors import ConfigError
from brac.harness import EvalProtocol
from brac.policies import CloneConfig, TanhGaussianPolicy, clone_behavior
from brac.trainer import (AdaptiveAlpha, BcqConfig, Trainer, TrainerConfig,
                          adaptive_alpha_update, bcq_select, config_for_algo,
                          train_offline)

TINY = dict(policy_hidden=(12, 12), q_hidden=(12, 12), disc_hidden=(12, 12),
            batch_size=16, n_div_samples=4)


@pytest.fixture(scope="module")
def setup():
    env = envs.PointMass2D()
    probe = TanhGaussianPolicy(4, env.action_low, env.action_high,
                               hidden=(8,), rng=np.random.default_rng(0))
    ds = dt.collect(env, probe, dt.NoiseConfig("gauss", 0.3), 2500,
                    np.random.default_rng(1))
    behavior, _ = clone_behavior(
        ds, CloneConfig(steps=200, batch_size=64, learning_rate=3e-3),
        np.random.default_rng(2), hidden=(12, 12))
    return env, ds, behavior


class TestAdaptiveAlpha:
    def test_at_threshold_unchanged(self):
        a = AdaptiveAlpha(dual_lr=0.01, epsilon=0.3)
        before = a.alpha
        adaptive_alpha_update(a, 0.3)
        assert a.alpha == before

    def test_above_threshold_increases(self):
        a = AdaptiveAlpha(dual_lr=0.01, epsilon=0.3)
        before = a.alpha
        adaptive_alpha_update(a, 0.5)
        assert a.alpha > before

    def test_below_threshold_decreases_stays_positive(self):
        a = AdaptiveAlpha(dual_lr=0.01, epsilon=0.3)
        before = a.alpha
        adaptive_alpha_update(a, 0.1)
        assert 0.0 < a.alpha < before

    def test_positive_over_long_synthetic_run(self):
        a = AdaptiveAlpha(dual_lr=0.05, epsilon=0.1)
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            adaptive_alpha_update(a, rng.uniform(-1.0, 1.0))
            assert a.alpha > 0.0


class TestModeContract:
    def test_pr_targets_bitwise_equal_vp_alpha0(self, setup):
        env, ds, behavior = setup
        records = {}
        for mode, alpha in (("policy_regularization", 5.0),
                            ("value_penalty", 0.0)):
            cfg = TrainerConfig(mode=mode, divergence="mmd", alpha=alpha,
                                seed=11, total_steps=0, **TINY)
            tr = Trainer(cfg, ds, behavior, env)
            batch = dt.sample_batch(ds, 16, np.random.default_rng(33))
            records[mode] = tr.critic_targets(batch)
        np.testing.assert_array_equal(records["policy_regularization"],
                                      records["value_penalty"])

    def test_full_step_stream_identical(self, setup):
        # after one full critic+actor step the critics agree bitwise because
        # the alpha_eff = 0 path skips the penalty rng in both modes
        env, ds, behavior = setup
        flats = {}
        for mode, alpha in (("policy_regularization", 2.0),
                            ("value_penalty", 0.0)):
            cfg = TrainerConfig(mode=mode, divergence="mmd", alpha=alpha,
                                seed=7, total_steps=0, **TINY)
            tr = Trainer(cfg, ds, behavior, env)
            batch = dt.sample_batch(ds, 16, np.random.default_rng(5))
            tr.critic_update(batch, 1)
            flats[mode] = np.concatenate([m.flat.copy() for m in tr.ens.sources])
        np.testing.assert_array_equal(flats["policy_regularization"],
                                      flats["value_penalty"])


class TestCriticUpdate:
    def test_all_terminal_batch_targets_are_rewards(self, setup):
        env, ds, behavior = setup
        cfg = TrainerConfig(divergence="mmd", alpha=3.0, seed=3,
                            total_steps=0, **TINY)
        tr = Trainer(cfg, ds, behavior, env)
        batch = dt.sample_batch(ds, 16, np.random.default_rng(1))
        batch.dones[:] = 1.0
        acts, _ = tr.policy.sample_np(batch.next_states, 1, tr.rng)
        pen = tr.estimator.estimate_np(batch.next_states, tr.policy, tr.rng)
        target = td_target(tr.ens, cfg.combiner, batch, acts[:, 0, :], pen,
                           cfg.alpha, cfg.gamma)
        np.testing.assert_array_equal(target, batch.rewards)

    def test_regression_converges_on_single_transition(self, setup):
        env, ds, behavior = setup
        one = dt.OfflineDataset(ds.env_name, ds.noise_tag, ds.states[:1],
                                ds.actions[:1], ds.rewards[:1],
                                ds.next_states[:1], np.array([1], np.uint8))
        cfg = TrainerConfig(divergence="none", alpha=0.0, k=1, seed=5,
                            q_lr=1e-2, total_steps=0, **{**TINY,
                                                         "batch_size": 1})
        tr = Trainer(cfg, one, behavior, env)
        batch = dt.sample_batch(one, 1, np.random.default_rng(0))
        losses = [tr.critic_update(batch, s)[0] for s in range(1, 400)]
        assert losses[-1] < 1e-3 and losses[-1] < losses[0]


class TestActorUpdate:
    def test_alpha_zero_equals_unregularized_step(self, setup):
        env, ds, behavior = setup
        flats = {}
        for div in ("none", "mmd"):
            cfg = TrainerConfig(divergence=div, alpha=0.0, seed=9,
                                total_steps=0, **TINY)
            tr = Trainer(cfg, ds, behavior, env)
            batch = dt.sample_batch(ds, 16, np.random.default_rng(2))
            tr.actor_update(batch, 1)
            flats[div] = tr.policy.trunk.flat.copy()
        np.testing.assert_array_equal(flats["none"], flats["mmd"])

    def test_large_alpha_shrinks_divergence(self, setup):
        env, ds, behavior = setup
        cfg = TrainerConfig(divergence="kl_primal", alpha=1e6, seed=13,
                            policy_lr=3e-4, total_steps=0, **TINY)
        tr = Trainer(cfg, ds, behavior, env)
        rng = np.random.default_rng(3)
        states = ds.states[:64].astype(np.float64)
        before = float(np.mean(tr.estimator.estimate_np(
            states, tr.policy, np.random.default_rng(77))))
        for step in range(1, 501):
            batch = dt.sample_batch(ds, 16, rng)
            tr.actor_update(batch, step)
        after = float(np.mean(tr.estimator.estimate_np(
            states, tr.policy, np.random.default_rng(77))))
        assert after < before

    def test_sac_equivalence_exact(self):
        for seed in (0, 1, 2):
            assert sac_equivalence_gap(seed=seed) <= 1e-10

    def test_sac_equivalence_actually_trains(self, setup):
        env, ds, behavior = setup
        cfg = TrainerConfig(divergence="entropy_single_sample", alpha=0.2,
                            seed=21, total_steps=0, **TINY)
        tr = Trainer(cfg, ds, None, env)
        p0 = tr.policy.trunk.flat.copy()
        q0 = tr.ens.sources[0].flat.copy()
        batch = dt.sample_batch(ds, 16, np.random.default_rng(4))
        tr.critic_update(batch, 1)
        tr.actor_update(batch, 1)
        assert np.any(tr.policy.trunk.flat != p0)
        assert np.any(tr.ens.sources[0].flat != q0)


class TestBcq:
    def _trainer(self, setup, phi, n):
        env, ds, behavior = setup
        cfg = config_for_algo("bcq", bcq=BcqConfig(phi=phi, n_candidates=n,
                                                   hidden=(12, 12)),
                              seed=15, total_steps=0, **TINY)
        return Trainer(cfg, ds, behavior, env)

    def test_phi_zero_n1_returns_behavior_sample(self, setup):
        env, ds, behavior = setup
        tr = self._trainer(setup, phi=0.0, n=1)
        states = ds.states[:8].astype(np.float64)
        expected, _ = behavior.sample_np(states, 1, np.random.default_rng(50))
        got = bcq_select(tr.cfg.bcq, tr.xi, tr.ens, behavior, states,
                         np.random.default_rng(50))
        np.testing.assert_array_equal(got, expected[:, 0, :])

    def test_argmax_invariant_to_positive_scaling(self, setup):
        env, ds, behavior = setup
        tr = self._trainer(setup, phi=0.05, n=6)
        states = ds.states[:8].astype(np.float64)
        a1 = bcq_select(tr.cfg.bcq, tr.xi, tr.ens, behavior, states,
                        np.random.default_rng(60))
        for m in tr.ens.sources:  # scale every member's output layer by 3
            m.weights[-1].data *= 3.0
            m.biases[-1].data *= 3.0
        a2 = bcq_select(tr.cfg.bcq, tr.xi, tr.ens, behavior, states,
                        np.random.default_rng(60))
        np.testing.assert_array_equal(a1, a2)

    def test_constructed_q_prefers_better_candidate(self, setup):
        env, ds, behavior = setup

        class TwoCandidates:
            action_low = env.action_low
            action_high = env.action_high

            def sample_np(self, states, n, rng):
                a = np.zeros((states.shape[0], n, 2))
                a[:, 1, :] = 0.5  # candidate 2
                return a, np.zeros((states.shape[0], n))

        class SumQ:
            def q_values_np(self, s, a, which="source"):
                return a.sum(axis=1, keepdims=True)  # favors larger actions

        got = bcq_select(BcqConfig(phi=0.0, n_candidates=2), None, SumQ(),
                         TwoCandidates(), np.zeros((4, 4)),
                         np.random.default_rng(0))
        np.testing.assert_array_equal(got, np.full((4, 2), 0.5))

    def test_phi_zero_actions_within_candidate_support(self, setup):
        env, ds, behavior = setup
        tr = self._trainer(setup, phi=0.0, n=5)
        states = ds.states[:16].astype(np.float64)
        rng = np.random.default_rng(70)
        cand, _ = behavior.sample_np(states, 5, np.random.default_rng(70))
        got = bcq_select(tr.cfg.bcq, tr.xi, tr.ens, behavior, states, rng)
        # every selected action is one of the sampled candidates
        match = np.isclose(cand, got[:, None, :]).all(axis=2).any(axis=1)
        assert match.all()

    def test_perturbation_bounded_by_phi(self, setup):
        env, ds, behavior = setup
        tr = self._trainer(setup, phi=0.03, n=4)
        tr.xi.init_params(np.random.default_rng(8))
        tr.xi.flat[:] *= 50.0  # saturate tanh
        states = ds.states[:32].astype(np.float64)
        rng = np.random.default_rng(80)
        cand, _ = behavior.sample_np(states, 4, np.random.default_rng(80))
        got = bcq_select(tr.cfg.bcq, tr.xi, tr.ens, behavior, states, rng)
        dist = np.abs(got[:, None, :] - cand).min(axis=1)
        assert np.all(dist <= 0.03 + 1e-12)


class TestTrainOffline:
    def test_zero_steps_initial_eval_only(self, setup):
        env, ds, behavior = setup
        cfg = config_for_algo("kl_vp", alpha=0.3, seed=1, total_steps=0, **TINY)
        rec = train_offline(cfg, ds, behavior, env,
                            EvalProtocol(episodes_per_eval=3, tail_points=2))
        assert rec.eval_steps == [0] and len(rec.eval_returns) == 1
        assert not rec.failed

    def test_bitwise_deterministic(self, setup):
        env, ds, behavior = setup
        cfg = config_for_algo("mmd_pr", alpha=10.0, seed=23, total_steps=24,
                              eval_interval=8, **TINY)
        proto = EvalProtocol(episodes_per_eval=3, tail_points=2)
        r1 = train_offline(cfg, ds, behavior, env, proto)
        r2 = train_offline(cfg, ds, behavior, env, proto)
        assert r1.to_json() == r2.to_json()

    def test_divergence_failure_recorded_as_score_zero(self, setup):
        env, ds, behavior = setup
        # absurd learning rate forces the critic into float overflow
        cfg = config_for_algo("sac", alpha=0.0, seed=2, total_steps=200,
                              eval_interval=50, q_lr=1e200, policy_lr=1e200,
                              **TINY)
        rec = train_offline(cfg, ds, behavior, env,
                            EvalProtocol(episodes_per_eval=2, tail_points=2))
        assert rec.failed and rec.final_score == 0.0
        assert rec.failure

    def test_monotone_steps_and_aligned_traces(self, setup):
        env, ds, behavior = setup
        cfg = config_for_algo("w_vp", alpha=1.0, seed=3, total_steps=20,
                              eval_interval=5, **TINY)
        rec = train_offline(cfg, ds, behavior, env,
                            EvalProtocol(episodes_per_eval=2, tail_points=2))
        assert rec.eval_steps == [0, 5, 10, 15, 20]
        assert len(rec.q_trace) == len(rec.eval_steps) == len(rec.eval_returns)
        assert all(b > a for a, b in zip(rec.eval_steps, rec.eval_steps[1:]))

    def test_record_round_trip(self, setup, tmp_path):
        env, ds, behavior = setup
        cfg = config_for_algo("kldual_pr", alpha=0.3, seed=4, total_steps=6,
                              eval_interval=3, disc_steps=1, **TINY)
        rec = train_offline(cfg, ds, behavior, env,
                            EvalProtocol(episodes_per_eval=2, tail_points=2))
        path = tmp_path / "run.json"
        rec.save(path)
        back = type(rec).load(path)
        assert back.to_json() == rec.to_json()


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainerConfig(mode="both")
        with pytest.raises(ConfigError):
            TrainerConfig(divergence="tv")
        with pytest.raises(ConfigError):
            TrainerConfig(alpha=-1.0)
        with pytest.raises(ConfigError):
            TrainerConfig(epsilon=0.0)
        with pytest.raises(ConfigError):
            TrainerConfig(gamma=1.0)

    def test_round_trip_dict(self):
        cfg = config_for_algo("bear", epsilon=0.15, total_steps=10)
        back = TrainerConfig.from_dict(cfg.to_dict())
        assert back == cfg

    def test_round_trip_bcq(self):
        cfg = config_for_algo("bcq", bcq=BcqConfig(phi=0.1), total_steps=10)
        back = TrainerConfig.from_dict(cfg.to_dict())
        assert back == cfg

    def test_presets(self):
        assert config_for_algo("bear").alpha_mode == "adaptive"
        assert config_for_algo("bear").k == 4
        assert config_for_algo("bear").combiner == TargetCombiner("weighted", 0.75)
        assert config_for_algo("kl_vp").divergence == "kl_primal"
        assert config_for_algo("kl_vp").mode == "value_penalty"
        assert config_for_algo("w_pr").mode == "policy_regularization"
        assert config_for_algo("sac").divergence == "entropy_single_sample"
        assert config_for_algo("bcq").bcq is not None
        with pytest.raises(ConfigError):
            config_for_algo("bc")
        with pytest.raises(ConfigError):
            config_for_algo("dqn")
