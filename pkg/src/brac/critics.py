"""Q-value ensembles with soft-updated target copies and target combining.

The bootstrap target for a transition is

    r + gamma * ( Qbar(s', a') - alpha * penalty(s') )        if not done
    r                                                          if done

where Qbar reduces the k target-network values per state, either by the
row-wise minimum or by the weighted mixture lam * min + (1 - lam) * max.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp
from .errors import ConfigError


@dataclass
class TargetCombiner:
    """Reduction of k target Q-values to one."""

    mode: str = "min"
    lam: float = 0.75

    def __post_init__(self):
        if self.mode not in ("min", "weighted"):
            raise ConfigError(f"unknown combiner mode '{self.mode}'")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must be in [0, 1]")


def combine(values, combiner):
    """Apply a TargetCombiner row-wise over (batch, k) member values.

    Accepts either a Tensor (stays on the tape) or a plain array.
    """
    if isinstance(values, ad.Tensor) and values.requires_grad:
        if combiner.mode == "min":
            return ad.reduce_min(values, axis=1)
        lo = ad.reduce_min(values, axis=1)
        hi = ad.reduce_max(values, axis=1)
        return ad.add(ad.mul(lo, combiner.lam), ad.mul(hi, 1.0 - combiner.lam))
    v = ad.value(values)
    if v.ndim != 2:
        v = np.atleast_2d(v)
    if combiner.mode == "min":
        return v.min(axis=1)
    return combiner.lam * v.min(axis=1) + (1.0 - combiner.lam) * v.max(axis=1)


class QEnsemble:
    """k source Q-networks plus soft-updated target copies.

    Input is concat(state, action); output one scalar per member. Targets
    start as exact copies of the sources.
    """

    def __init__(self, state_dim, action_dim, k, hidden=(300, 300),
                 tau=0.005, rng=None):
        if k < 1:
            raise ConfigError("ensemble size k must be >= 1")
        if not 0.0 < tau <= 1.0:
            raise ConfigError("tau must be in (0, 1]")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.k = k
        self.tau = tau
        sizes = [state_dim + action_dim, *hidden, 1]
        self.sources = [Mlp(sizes, rng=rng) for _ in range(k)]
        self.targets = [m.clone(requires_grad=False) for m in self.sources]

    def q_values(self, states, actions, which="source"):
        """Per-member Q for each (s, a); Tensor of shape (batch, k).

        The source path records on the tape; the target path never does.
        """
        nets = self._nets(which)
        if which == "target":
            return ad.Tensor(self.q_values_np(ad.value(states),
                                              ad.value(actions), which))
        if isinstance(actions, ad.Tensor) and actions.requires_grad:
            x = ad.concat([ad.as_tensor(states), actions], axis=1)
        else:
            x = ad.as_tensor(np.concatenate([ad.value(states),
                                             ad.value(actions)], axis=1))
        return ad.concat([net.forward(x) for net in nets], axis=1)

    def q_values_np(self, states, actions, which="source"):
        nets = self._nets(which)
        x = np.concatenate([states, actions], axis=1)
        return np.concatenate([net.forward_np(x) for net in nets], axis=1)

    def min_q_np(self, states, actions):
        return self.q_values_np(states, actions).min(axis=1)

    def _nets(self, which):
        if which == "source":
            return self.sources
        if which == "target":
            return self.targets
        raise ConfigError(f"which must be source or target, got '{which}'")

    def soft_update_targets(self):
        for src, tgt in zip(self.sources, self.targets):
            ad.soft_update(tgt.flat, src.flat, self.tau)

    def n_params(self):
        return sum(m.flat.size for m in self.sources)


def td_target(ens, combiner, batch, next_actions, penalty, alpha, gamma):
    """Bootstrap regression targets for a minibatch; plain (B,) array.

    penalty is the per-next-state divergence estimate (zeros when the run
    regularizes the policy only). Terminal transitions get exactly r: the
    bootstrap term is multiplied by (1 - done) with done in {0, 1}.
    """
    tq = ens.q_values_np(batch.next_states, np.asarray(next_actions),
                         which="target")
    qbar = combine(tq, combiner)
    pen = np.asarray(penalty, dtype=np.float64)
    return batch.rewards + gamma * (1.0 - batch.dones) * (qbar - alpha * pen)
