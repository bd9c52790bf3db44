import numpy as np
import pytest

from brac.checkpoints import (load_ensemble, load_policy, save_ensemble,
                              save_policy)
from brac.critics import QEnsemble
from brac.errors import FormatError
from brac.policies import TanhGaussianPolicy


def make_policy(seed=0):
    return TanhGaussianPolicy(3, np.array([-2.0, -1.0]), np.array([2.0, 3.0]),
                              hidden=(9, 7), rng=np.random.default_rng(seed),
                              log_std_bounds=(-4.0, 1.5))


class TestPolicyCheckpoint:
    def test_round_trip(self, tmp_path):
        pol = make_policy(1)
        path = tmp_path / "p.ckpt"
        save_policy(pol, path)
        back = load_policy(path)
        np.testing.assert_array_equal(back.trunk.flat, pol.trunk.flat)
        np.testing.assert_array_equal(back.action_low, pol.action_low)
        np.testing.assert_array_equal(back.action_high, pol.action_high)
        assert back.log_std_bounds == pol.log_std_bounds
        assert back.trunk.layer_sizes == pol.trunk.layer_sizes
        # behavioral equality: identical samples from identical rng
        states = np.random.default_rng(2).normal(size=(5, 3))
        a1, l1 = pol.sample_np(states, 3, np.random.default_rng(3))
        a2, l2 = back.sample_np(states, 3, np.random.default_rng(3))
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(l1, l2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.ckpt"
        save_policy(make_policy(), path)
        blob = bytearray(path.read_bytes())
        blob[3] ^= 0x10
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_policy(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "p.ckpt"
        save_policy(make_policy(), path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FormatError):
            load_policy(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "p.ckpt"
        save_policy(make_policy(), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            load_policy(path)


class TestEnsembleCheckpoint:
    def test_round_trip(self, tmp_path):
        ens = QEnsemble(3, 2, k=3, hidden=(6, 5), tau=0.01,
                        rng=np.random.default_rng(4))
        ens.sources[1].flat += 0.25  # make targets differ from sources
        path = tmp_path / "q.ckpt"
        save_ensemble(ens, path)
        back = load_ensemble(path)
        assert back.k == 3 and back.tau == 0.01
        for a, b in zip(ens.sources, back.sources):
            np.testing.assert_array_equal(a.flat, b.flat)
        for a, b in zip(ens.targets, back.targets):
            np.testing.assert_array_equal(a.flat, b.flat)
        rng = np.random.default_rng(5)
        s, a = rng.normal(size=(4, 3)), rng.uniform(-1, 1, (4, 2))
        np.testing.assert_array_equal(ens.q_values_np(s, a),
                                      back.q_values_np(s, a))

    def test_bad_magic(self, tmp_path):
        ens = QEnsemble(2, 1, k=1, hidden=(4,))
        path = tmp_path / "q.ckpt"
        save_ensemble(ens, path)
        blob = bytearray(path.read_bytes())
        blob[0] = 0
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_ensemble(path)
