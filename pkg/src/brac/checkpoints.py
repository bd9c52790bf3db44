"""Binary checkpoints for policies and Q-ensembles.

Policy layout:  magic "BRACPI1\\0"; u64 layer count + u64 layer sizes;
u64 action_dim; action_low, action_high, log-std clamp (little-endian f64);
then the flat trunk parameters as little-endian f64.

Ensemble layout: magic "BRACQE1\\0"; u64 state_dim, action_dim, k; f64 tau;
u64 layer count + sizes; then k source flats followed by k target flats.
"""

import struct

import numpy as np

from .critics import QEnsemble
from .errors import FormatError
from .policies import TanhGaussianPolicy

POLICY_MAGIC = b"BRACPI1\x00"
ENSEMBLE_MAGIC = b"BRACQE1\x00"


def _write_u64s(f, values):
    f.write(struct.pack(f"<{len(values)}Q", *values))


def _write_f64s(f, arr):
    f.write(np.asarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, path, magic):
        with open(path, "rb") as f:
            self.blob = f.read()
        self.path = path
        if self.blob[:8] != magic:
            raise FormatError(f"{path}: bad magic")
        self.off = 8

    def u64s(self, n):
        need = 8 * n
        if self.off + need > len(self.blob):
            raise FormatError(f"{self.path}: truncated")
        vals = struct.unpack_from(f"<{n}Q", self.blob, self.off)
        self.off += need
        return vals

    def f64s(self, n):
        need = 8 * n
        if self.off + need > len(self.blob):
            raise FormatError(f"{self.path}: truncated")
        arr = np.frombuffer(self.blob, dtype="<f8", count=n, offset=self.off)
        self.off += need
        return arr.astype(np.float64)

    def done(self):
        if self.off != len(self.blob):
            raise FormatError(f"{self.path}: {len(self.blob) - self.off} "
                              "trailing bytes")


def save_policy(policy, path):
    with open(path, "wb") as f:
        f.write(POLICY_MAGIC)
        sizes = policy.trunk.layer_sizes
        _write_u64s(f, [len(sizes), *sizes, policy.action_dim])
        _write_f64s(f, policy.action_low)
        _write_f64s(f, policy.action_high)
        _write_f64s(f, policy.log_std_bounds)
        _write_f64s(f, policy.trunk.flat)


def load_policy(path):
    r = _Reader(path, POLICY_MAGIC)
    (n_layers,) = r.u64s(1)
    sizes = list(r.u64s(n_layers))
    (action_dim,) = r.u64s(1)
    low = r.f64s(action_dim)
    high = r.f64s(action_dim)
    clamp = tuple(r.f64s(2))
    if sizes[-1] != 2 * action_dim:
        raise FormatError(f"{path}: head width {sizes[-1]} does not match "
                          f"action_dim {action_dim}")
    policy = TanhGaussianPolicy(sizes[0], low, high, hidden=tuple(sizes[1:-1]),
                                log_std_bounds=clamp)
    policy.trunk.flat[:] = r.f64s(policy.trunk.flat.size)
    r.done()
    return policy


def save_ensemble(ens, path):
    with open(path, "wb") as f:
        f.write(ENSEMBLE_MAGIC)
        _write_u64s(f, [ens.state_dim, ens.action_dim, ens.k])
        _write_f64s(f, [ens.tau])
        sizes = ens.sources[0].layer_sizes
        _write_u64s(f, [len(sizes), *sizes])
        for net in ens.sources:
            _write_f64s(f, net.flat)
        for net in ens.targets:
            _write_f64s(f, net.flat)


def load_ensemble(path):
    r = _Reader(path, ENSEMBLE_MAGIC)
    state_dim, action_dim, k = r.u64s(3)
    tau = float(r.f64s(1)[0])
    (n_layers,) = r.u64s(1)
    sizes = list(r.u64s(n_layers))
    ens = QEnsemble(state_dim, action_dim, k, hidden=tuple(sizes[1:-1]), tau=tau)
    for net in ens.sources:
        net.flat[:] = r.f64s(net.flat.size)
    for net in ens.targets:
        net.flat[:] = r.f64s(net.flat.size)
    r.done()
    return ens
