"""Tanh-squashed Gaussian policies with reparameterized sampling, exact
log-densities, and maximum-likelihood behavior cloning.

The density of an action a = scale * tanh(u) + shift with u ~ N(mu, sigma)
is the Gaussian density at u divided by the Jacobian of the squashing map:

    log pi(a|s) = log N(u; mu, sigma) - sum_d [ log scale_d + log(1 - tanh(u_d)^2) ]

Sampling evaluates this at the drawn u (cheap, numerically exact); scoring a
given action inverts the squashing with atanh after clipping the action
inward by 1e-6 of the range. The sampling head is implemented as a handful of
fused tape ops so a policy draw costs few graph nodes.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, Tensor, _acc, _make
from .errors import ConfigError, ContractError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class CloneConfig:
    """Settings for maximum-likelihood behavior cloning."""

    steps: int = 10_000
    batch_size: int = 256
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigError("CloneConfig fields must all be positive")


# ---------------------------------------------------------------------------
# fused tape ops for the squashed-Gaussian head


def _heads(out, action_dim, lo, hi):
    """Split a trunk output (B, 2A) into mean and clipped log-std."""
    mu = ad.slice_axis(out, 1, 0, action_dim)
    log_std = ad.clip(ad.slice_axis(out, 1, action_dim, 2 * action_dim), lo, hi)
    return mu, log_std


def _gauss_reparam(mu, log_std, z):
    """u = mu + exp(log_std) * z with z of shape (B, n, A); one tape node."""
    sigma = np.exp(log_std.data)
    u = mu.data[:, None, :] + sigma[:, None, :] * z

    def backward(g):
        if mu.requires_grad:
            _acc(mu, g.sum(axis=1))
        if log_std.requires_grad:
            _acc(log_std, (g * z).sum(axis=1) * sigma)

    return _make(u, backward, (mu, log_std))


def _tanh_squash(u, scale, shift):
    """Squash pre-tanh draws; returns (actions, squash_logdet).

    squash_logdet is sum_d [log scale_d + log(1 - tanh(u_d)^2)], the
    change-of-variables term subtracted from the Gaussian log-density.
    """
    # keep actions strictly inside the bounds even when tanh saturates to 1.0
    t = np.clip(np.tanh(u.data), -1.0 + 1e-12, 1.0 - 1e-12)
    actions_data = t * scale + shift

    def backward_actions(g):
        _acc(u, g * (1.0 - t * t) * scale)

    actions = _make(actions_data, backward_actions, (u,))

    # log(1 - tanh(x)^2) = 2 (log 2 - x - softplus(-2x)), stable for large |x|
    x = u.data
    log1mt2 = 2.0 * (np.log(2.0) - x - (np.maximum(-2.0 * x, 0.0)
                                        + np.log1p(np.exp(-np.abs(2.0 * x)))))
    logdet_data = log1mt2.sum(axis=-1) + np.sum(np.log(scale))

    def backward_logdet(g):
        _acc(u, g[..., None] * (-2.0 * t))

    logdet = _make(logdet_data, backward_logdet, (u,))
    return actions, logdet


def _gauss_logpdf_sampled(log_std, z):
    """log N(u; mu, sigma) evaluated at u = mu + sigma z for fixed noise z.

    Only the -log sigma term carries gradient; the quadratic term is
    -0.5 z^2 with z held constant, which is the reparameterized convention.
    """
    lp = (-0.5 * (z * z) - log_std.data[:, None, :]).sum(axis=-1) \
        - z.shape[-1] * _HALF_LOG_2PI

    def backward(g):
        _acc(log_std, np.broadcast_to(-g.sum(axis=1)[:, None],
                                      log_std.data.shape).copy())

    return _make(lp, backward, (log_std,))


def _gauss_logpdf_at(mu, log_std, u):
    """log N(u; mu, sigma) for a given u (u may itself be on the tape).

    mu/log_std have shape (B, A); u has shape (B, A) or (B, n, A), in which
    case the per-sample axis is summed out in the parameter gradients.
    """
    expanded = u.data.ndim == mu.data.ndim + 1
    mu_b = mu.data[:, None, :] if expanded else mu.data
    ls_b = log_std.data[:, None, :] if expanded else log_std.data
    inv_sigma = np.exp(-ls_b)
    z = (u.data - mu_b) * inv_sigma
    lp = (-0.5 * (z * z) - ls_b).sum(axis=-1) - u.data.shape[-1] * _HALF_LOG_2PI

    def backward(g):
        ge = g[..., None]
        if mu.requires_grad:
            gm = ge * z * inv_sigma
            _acc(mu, gm.sum(axis=1) if expanded else gm)
        if log_std.requires_grad:
            gl = ge * (z * z - 1.0)
            _acc(log_std, gl.sum(axis=1) if expanded else gl)
        if u.requires_grad:
            _acc(u, ge * (-z * inv_sigma))

    return _make(lp, backward, (mu, log_std, u))


class TanhGaussianPolicy:
    """Squashed-Gaussian actor over a box action space.

    The trunk maps states to (mean, log_std) per action dimension; log_std is
    clamped to [-5, 2]. Sampled actions always lie strictly inside the bounds.
    """

    def __init__(self, state_dim, action_low, action_high, hidden=(200, 200),
                 rng=None, log_std_bounds=(LOG_STD_MIN, LOG_STD_MAX)):
        action_low = np.asarray(action_low, dtype=np.float64)
        action_high = np.asarray(action_high, dtype=np.float64)
        if action_low.shape != action_high.shape or np.any(action_low >= action_high):
            raise ConfigError("bad action bounds")
        self.state_dim = int(state_dim)
        self.action_dim = action_low.size
        self.action_low = action_low
        self.action_high = action_high
        self.scale = (action_high - action_low) / 2.0
        self.shift = (action_high + action_low) / 2.0
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        self.trunk = Mlp([self.state_dim, *hidden, 2 * self.action_dim], rng=rng)

    # -- sampling ----------------------------------------------------------

    def sample(self, states, n, rng):
        """Draw n reparameterized actions per state.

        Returns (actions, log_probs) with shapes (B, n, A) and (B, n);
        gradients flow into the trunk through both outputs.
        """
        if n < 1:
            raise ContractError("n must be >= 1")
        mu, log_std = self.tape_heads(states)
        z = rng.standard_normal((mu.data.shape[0], n, self.action_dim))
        u = _gauss_reparam(mu, log_std, z)
        actions, logdet = _tanh_squash(u, self.scale, self.shift)
        log_probs = ad.sub(_gauss_logpdf_sampled(log_std, z), logdet)
        return actions, log_probs

    def sample_np(self, states, n, rng):
        """Gradient-free mirror of sample(); identical draws for the same rng."""
        out = self.trunk.forward_np(states)
        mu = out[:, : self.action_dim]
        log_std = np.clip(out[:, self.action_dim:], *self.log_std_bounds)
        z = rng.standard_normal((out.shape[0], n, self.action_dim))
        u = mu[:, None, :] + np.exp(log_std)[:, None, :] * z
        t = np.clip(np.tanh(u), -1.0 + 1e-12, 1.0 - 1e-12)
        actions = t * self.scale + self.shift
        log1mt2 = 2.0 * (np.log(2.0) - u - (np.maximum(-2.0 * u, 0.0)
                                            + np.log1p(np.exp(-np.abs(2.0 * u)))))
        log_probs = (-0.5 * z * z - log_std[:, None, :]).sum(axis=-1) \
            - self.action_dim * _HALF_LOG_2PI \
            - log1mt2.sum(axis=-1) - np.sum(np.log(self.scale))
        return actions, log_probs

    def mean_action_np(self, states):
        out = self.trunk.forward_np(states)
        return np.tanh(out[:, : self.action_dim]) * self.scale + self.shift

    # -- densities ----------------------------------------------------------

    def clip_inward(self, actions):
        """Clip actions strictly inside the bounds by 1e-6 of the range."""
        eps = 1e-6 * (self.action_high - self.action_low)
        return np.clip(ad.value(actions), self.action_low + eps,
                       self.action_high - eps)

    def tape_heads(self, states):
        """(mean, clipped log-std) nodes; frozen trunks skip tape wrappers."""
        if not self.trunk.weights[0].requires_grad:
            out = self.trunk.forward_np(ad.value(states))
            mu = Tensor(out[:, : self.action_dim])
            log_std = Tensor(np.clip(out[:, self.action_dim:],
                                     *self.log_std_bounds))
            return mu, log_std
        out = self.trunk.forward(ad.as_tensor(states))
        return _heads(out, self.action_dim, *self.log_std_bounds)

    def np_heads(self, states):
        out = self.trunk.forward_np(states)
        return (out[:, : self.action_dim],
                np.clip(out[:, self.action_dim:], *self.log_std_bounds))

    def log_prob(self, states, actions, heads=None):
        """Exact log-density of given in-bounds actions; shape (B,) for
        (B, A) actions, (B, n) for (B, n, A) actions.

        Actions must be strictly inside the bounds (clip_inward first when
        they may touch the boundary). Accepts a Tensor for `actions` so
        gradients can flow through the scored actions as well. `heads` may
        pass precomputed tape_heads(states) to avoid a second trunk pass.
        """
        a = ad.value(actions)
        if np.any(a <= self.action_low) or np.any(a >= self.action_high):
            raise ContractError("action on or outside the bounds; clip inward first")
        mu, log_std = heads if heads is not None else self.tape_heads(states)
        if isinstance(actions, Tensor) and actions.requires_grad:
            t = ad.mul(ad.sub(actions, self.shift), 1.0 / self.scale)
            u = ad.atanh(t)
            lp = _gauss_logpdf_at(mu, log_std, u)
            corr = ad.sum_(ad.log(ad.mul(ad.sub(1.0, ad.square(t)), self.scale)),
                           axis=-1)
            return ad.sub(lp, corr)
        t_data = (a - self.shift) / self.scale
        u = ad.Tensor(np.arctanh(t_data))
        lp = _gauss_logpdf_at(mu, log_std, u)
        logdet = np.log(self.scale * (1.0 - t_data * t_data)).sum(axis=-1)
        return ad.sub(lp, logdet)

    def log_prob_np(self, states, actions, heads=None):
        """Gradient-free log-density (same math as log_prob)."""
        a = np.asarray(actions, dtype=np.float64)
        if np.any(a <= self.action_low) or np.any(a >= self.action_high):
            raise ContractError("action on or outside the bounds; clip inward first")
        mu, log_std = heads if heads is not None else self.np_heads(states)
        if a.ndim == 3:
            mu, log_std = mu[:, None, :], log_std[:, None, :]
        t = (a - self.shift) / self.scale
        u = np.arctanh(t)
        z = (u - mu) * np.exp(-log_std)
        lp = (-0.5 * z * z - log_std).sum(axis=-1) - a.shape[-1] * _HALF_LOG_2PI
        return lp - np.log(self.scale * (1.0 - t * t)).sum(axis=-1)

    # -- plumbing ------------------------------------------------------------

    def params_flat(self):
        return self.trunk.flat

    def clone_structure(self, rng=None, requires_grad=True):
        p = TanhGaussianPolicy(
            self.state_dim, self.action_low, self.action_high,
            hidden=tuple(self.trunk.layer_sizes[1:-1]), rng=rng,
            log_std_bounds=self.log_std_bounds)
        if rng is None:
            p.trunk.copy_from(self.trunk)
        if not requires_grad:
            for t in p.trunk.params():
                t.requires_grad = False
        return p


def clone_behavior(dataset, cfg, rng, action_low=None, action_high=None,
                   hidden=(200, 200)):
    """Fit a cloned policy to the dataset by maximizing mean log-likelihood.

    Action bounds default to the source environment's (looked up by the
    dataset's env name). Returns (policy, final mean log-likelihood).
    """
    if dataset.count == 0:
        raise ContractError("cannot clone from an empty dataset")
    if action_low is None or action_high is None:
        from .envs import make_env

        env = make_env(dataset.env_name)
        action_low, action_high = env.action_low, env.action_high
    policy = TanhGaussianPolicy(dataset.state_dim, action_low, action_high,
                                hidden=hidden, rng=rng)
    opt = ad.AdamState(policy.trunk.flat.size, cfg.learning_rate)
    states = dataset.states.astype(np.float64)
    actions = policy.clip_inward(dataset.actions.astype(np.float64))
    for step in range(cfg.steps):
        idx = rng.integers(0, dataset.count, size=cfg.batch_size)
        with ad.Tape() as tape:
            lp = policy.log_prob(states[idx], actions[idx])
            loss = ad.mean(ad.mul(lp, -1.0))
            tape.gradient(loss)
        opt.step(policy.trunk.flat, policy.trunk.grad_vector(),
                 site="clone_behavior", step_index=step)
    n_eval = min(dataset.count, 10_000)
    final_ll = float(np.mean(policy.log_prob_np(states[:n_eval], actions[:n_eval])))
    return policy, final_ll
