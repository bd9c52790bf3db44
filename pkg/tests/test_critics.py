import numpy as np
import pytest

from brac import autodiff as ad
from brac.critics import QEnsemble, TargetCombiner, combine, td_target
from brac.data import Batch
from brac.errors import ConfigError


def make_batch(rewards, dones, state_dim=3, action_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    n = len(rewards)
    return Batch(
        states=rng.normal(size=(n, state_dim)),
        actions=rng.uniform(-1, 1, size=(n, action_dim)),
        rewards=np.asarray(rewards, dtype=np.float64),
        next_states=rng.normal(size=(n, state_dim)),
        dones=np.asarray(dones, dtype=np.float64),
    )


class TestQValues:
    def test_zero_weight_members_output_zero(self):
        ens = QEnsemble(3, 2, k=2, hidden=(8,))
        q = ad.value(ens.q_values(np.ones((4, 3)), np.ones((4, 2))))
        np.testing.assert_array_equal(q, np.zeros((4, 2)))

    def test_targets_equal_sources_after_construction(self):
        ens = QEnsemble(3, 2, k=3, hidden=(16, 16), rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        s, a = rng.normal(size=(5, 3)), rng.uniform(-1, 1, (5, 2))
        np.testing.assert_array_equal(ens.q_values_np(s, a, "source"),
                                      ens.q_values_np(s, a, "target"))

    def test_matches_matrix_oracle(self):
        ens = QEnsemble(2, 1, k=2, hidden=(7, 5), rng=np.random.default_rng(2))
        rng = np.random.default_rng(3)
        s, a = rng.normal(size=(6, 2)), rng.uniform(-1, 1, (6, 1))
        x = np.concatenate([s, a], axis=1)
        expected = []
        for net in ens.sources:
            h = x
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                h = h @ w.data + b.data
                if i < len(net.weights) - 1:
                    h = np.maximum(h, 0.0)
            expected.append(h)
        expected = np.concatenate(expected, axis=1)
        np.testing.assert_allclose(ens.q_values_np(s, a), expected, atol=1e-12)

    def test_soft_update_moves_targets(self):
        ens = QEnsemble(2, 1, k=1, hidden=(4,), rng=np.random.default_rng(4))
        ens.sources[0].flat += 1.0
        before = ens.targets[0].flat.copy()
        ens.soft_update_targets()
        np.testing.assert_allclose(ens.targets[0].flat,
                                   before + ens.tau * 1.0, rtol=1e-12)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            QEnsemble(2, 1, k=0)
        with pytest.raises(ConfigError):
            QEnsemble(2, 1, k=1, tau=0.0)


class TestCombine:
    def test_weighted_example(self):
        v = np.array([[1.0, 3.0]])
        assert combine(v, TargetCombiner("weighted", 0.75))[0] == 1.5

    def test_min_example(self):
        assert combine(np.array([[1.0, 3.0]]), TargetCombiner("min"))[0] == 1.0

    def test_k1_identity_both_modes(self):
        v = np.array([[4.2], [-1.0]])
        np.testing.assert_array_equal(combine(v, TargetCombiner("min")), v[:, 0])
        np.testing.assert_array_equal(
            combine(v, TargetCombiner("weighted", 0.3)), v[:, 0])

    def test_weighted_lambda_one_equals_min(self):
        rng = np.random.default_rng(5)
        v = rng.normal(size=(20, 4))
        np.testing.assert_array_equal(combine(v, TargetCombiner("weighted", 1.0)),
                                      combine(v, TargetCombiner("min")))

    def test_permutation_invariance_and_monotonicity(self):
        rng = np.random.default_rng(6)
        v = rng.normal(size=(10, 3))
        for c in (TargetCombiner("min"), TargetCombiner("weighted", 0.75)):
            base = combine(v, c)
            perm = v[:, rng.permutation(3)]
            np.testing.assert_array_equal(combine(perm, c), base)
            bumped = v.copy()
            bumped[:, 1] += 0.5
            assert np.all(combine(bumped, c) >= base)

    def test_tape_path_matches_array_path(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=(8, 3))
        for c in (TargetCombiner("min"), TargetCombiner("weighted", 0.75)):
            t = ad.Tensor(v, requires_grad=True)
            with ad.Tape():
                out = combine(t, c)
            np.testing.assert_allclose(ad.value(out), combine(v, c), rtol=1e-15)

    def test_bad_combiner(self):
        with pytest.raises(ConfigError):
            TargetCombiner("median")
        with pytest.raises(ConfigError):
            TargetCombiner("weighted", 1.5)


class TestTdTarget:
    def _fixed_q_ensemble(self, value):
        ens = QEnsemble(3, 2, k=1, hidden=(4,))
        ens.targets[0].biases[-1].data[:] = value  # constant-output target
        return ens

    def test_terminal_gets_reward_exactly(self):
        ens = self._fixed_q_ensemble(123.0)
        batch = make_batch([0.7], [1.0])
        out = td_target(ens, TargetCombiner("min"), batch,
                        batch.actions, penalty=np.array([55.0]),
                        alpha=3.0, gamma=0.99)
        assert out[0] == 0.7

    def test_alpha_zero_arithmetic(self):
        ens = self._fixed_q_ensemble(10.0)
        batch = make_batch([1.0], [0.0])
        out = td_target(ens, TargetCombiner("min"), batch, batch.actions,
                        penalty=np.zeros(1), alpha=0.0, gamma=0.99)
        np.testing.assert_allclose(out[0], 10.9, rtol=1e-12)

    def test_penalty_arithmetic(self):
        ens = self._fixed_q_ensemble(5.0)
        batch = make_batch([0.0], [0.0])
        out = td_target(ens, TargetCombiner("min"), batch, batch.actions,
                        penalty=np.array([2.0]), alpha=1.0, gamma=0.99)
        np.testing.assert_allclose(out[0], 2.97, rtol=1e-12)

    def test_alpha0_k1_is_plain_bellman(self):
        ens = QEnsemble(3, 2, k=1, hidden=(8,), rng=np.random.default_rng(8))
        batch = make_batch([0.3, -0.2, 1.1], [0.0, 1.0, 0.0], seed=9)
        acts = np.random.default_rng(10).uniform(-1, 1, (3, 2))
        out = td_target(ens, TargetCombiner("min"), batch, acts,
                        penalty=np.zeros(3), alpha=0.0, gamma=0.95)
        q = ens.q_values_np(batch.next_states, acts, "target")[:, 0]
        expected = batch.rewards + 0.95 * (1.0 - batch.dones) * q
        np.testing.assert_array_equal(out, expected)
