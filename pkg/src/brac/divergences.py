"""Sample-based estimators of the action-distribution regularizers.

Four estimators share one protocol: given a batch of states, produce one
divergence value per state between the learned policy's action distribution
and the behavior distribution at that state.

  * kernel MMD^2 with a Laplacian kernel, plain V-statistic (expectations
    include self-pairs, so identical sample sets give exactly zero);
  * primal KL, the Monte-Carlo average of log pi(a|s) - log pi_b(a|s) over
    reparameterized draws a ~ pi;
  * the f-divergence dual of reverse-KL-form f(x) = -log x with Fenchel dual
    f*(t) = -log(-t) - 1, estimated with a learned discriminator whose raw
    output u is mapped to t = -exp(u) so it always lies in dom(f*);
  * the Wasserstein dual E_b[g] - E_pi[g] with the same discriminator
    machinery.

Both dual forms train their discriminator by a few Adam ascent steps per
trainer iteration with a one-sided gradient penalty on interpolated actions.
The penalty differentiates the discriminator's input gradient, which for a
ReLU network is replayed exactly (almost everywhere) by reusing the forward
activation masks as constants.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, _acc, _make
from .errors import ConfigError, ContractError


# ---------------------------------------------------------------------------
# kernel MMD


def laplacian_kernel(x, y, sigma):
    """K(x, y) = exp(-|x - y|_1 / sigma) for sample matrices (n, d), (m, d)."""
    d1 = np.abs(x[:, None, :] - y[None, :, :]).sum(axis=-1)
    return np.exp(-d1 / sigma)


def mmd_squared(x, y, sigma):
    """Biased (V-statistic) squared MMD between two sample sets.

    All pair expectations include self-pairs, so mmd_squared(x, x) is exactly
    zero: the three kernel means coincide elementwise and a - 2a + a == 0 in
    floating point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if sigma <= 0:
        raise ConfigError("kernel bandwidth must be positive")
    kxx = laplacian_kernel(x, x, sigma).mean()
    kxy = laplacian_kernel(x, y, sigma).mean()
    kyy = laplacian_kernel(y, y, sigma).mean()
    return float(kxx - 2.0 * kxy + kyy)


def _batched_kernel_means(x, y, sigma):
    """Per-state kernel matrices for batched sample sets (B,n,d), (B,m,d)."""
    d1 = np.abs(x[:, :, None, :] - y[:, None, :, :]).sum(axis=-1)
    return np.exp(-d1 / sigma)


def _laplacian_cross_mean(x, y, sigma):
    """Tape op: mean_{i,j} K(x_i, y_j) per state; x (B,n,d) on tape, y const."""
    k = _batched_kernel_means(x.data, y, sigma)
    n, m = x.data.shape[1], y.shape[1]

    def backward(g):
        # dK/dx = K * (-sign(x - y) / sigma), summed over the y index
        s = np.sign(x.data[:, :, None, :] - y[:, None, :, :])
        gx = (k[..., None] * s).sum(axis=2) * (-1.0 / sigma)
        _acc(x, gx * (g[:, None, None] / (n * m)))

    return _make(k.mean(axis=(1, 2)), backward, (x,))


def _laplacian_self_mean(x, sigma):
    """Tape op: mean_{i,i'} K(x_i, x_{i'}) per state for x (B,n,d) on tape."""
    k = _batched_kernel_means(x.data, x.data, sigma)
    n = x.data.shape[1]

    def backward(g):
        s = np.sign(x.data[:, :, None, :] - x.data[:, None, :, :])
        # each unordered pair appears twice; the two contributions are equal
        gx = 2.0 * (k[..., None] * s).sum(axis=2) * (-1.0 / sigma)
        _acc(x, gx * (g[:, None, None] / (n * n)))

    return _make(k.mean(axis=(1, 2)), backward, (x,))


class MmdEstimator:
    """Per-state squared MMD between policy and cloned-behavior samples."""

    def __init__(self, behavior_policy, sigma=20.0, n_samples=10):
        if sigma <= 0:
            raise ConfigError("sigma must be positive")
        if n_samples < 2:
            raise ConfigError("MMD needs n_samples >= 2")
        self.behavior = behavior_policy
        self.sigma = sigma
        self.n_samples = n_samples

    def prepare(self, states, policy, behavior_actions, rng):
        return None

    def estimate_tape(self, states, policy, rng):
        xs, _ = policy.sample(states, self.n_samples, rng)
        ys, _ = self.behavior.sample_np(states, self.n_samples, rng)
        kxx = _laplacian_self_mean(xs, self.sigma)
        kxy = _laplacian_cross_mean(xs, ys, self.sigma)
        kyy = _batched_kernel_means(ys, ys, self.sigma).mean(axis=(1, 2))
        return ad.add(ad.sub(kxx, ad.mul(kxy, 2.0)), kyy)

    def estimate_np(self, states, policy, rng):
        xs, _ = policy.sample_np(states, self.n_samples, rng)
        ys, _ = self.behavior.sample_np(states, self.n_samples, rng)
        kxx = _batched_kernel_means(xs, xs, self.sigma).mean(axis=(1, 2))
        kxy = _batched_kernel_means(xs, ys, self.sigma).mean(axis=(1, 2))
        kyy = _batched_kernel_means(ys, ys, self.sigma).mean(axis=(1, 2))
        return kxx - 2.0 * kxy + kyy


# ---------------------------------------------------------------------------
# primal KL


def _gauss_logpdf_np(mu, log_std, u):
    z = (u - mu[:, None, :]) * np.exp(-log_std)[:, None, :]
    return (-0.5 * z * z - log_std[:, None, :]).sum(axis=-1) \
        - u.shape[-1] * 0.5 * np.log(2.0 * np.pi)


class KlPrimalEstimator:
    """Monte-Carlo KL(pi || pi_b) using the cloned policy's exact density.

    Both policies squash through the same bijection onto the same bounds, so
    the change-of-variables terms of the two log-densities cancel and the
    per-sample term log pi(a|s) - log pi_b(a|s) equals the pre-tanh Gaussian
    log-ratio at the shared draw u. Evaluating both densities at the same u
    makes identical policies cancel exactly, per sample, not merely closely.
    """

    def __init__(self, behavior_policy, n_samples=10):
        if n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        self.behavior = behavior_policy
        self.n_samples = n_samples

    def prepare(self, states, policy, behavior_actions, rng):
        return None

    def estimate_tape(self, states, policy, rng):
        from .policies import _gauss_logpdf_at, _gauss_reparam

        if not np.array_equal(policy.action_low, self.behavior.action_low) \
                or not np.array_equal(policy.action_high,
                                      self.behavior.action_high):
            raise ContractError("policy and cloned-policy bounds differ")
        mu, log_std = policy.tape_heads(states)
        z = rng.standard_normal((mu.data.shape[0], self.n_samples,
                                 policy.action_dim))
        u = _gauss_reparam(mu, log_std, z)
        mu_b, ls_b = self.behavior.tape_heads(states)
        lp_pi = _gauss_logpdf_at(mu, log_std, u)
        lp_b = _gauss_logpdf_at(mu_b, ls_b, u)
        return ad.mean(ad.sub(lp_pi, lp_b), axis=1)

    def estimate_np(self, states, policy, rng):
        mu, log_std = policy.np_heads(states)
        z = rng.standard_normal((mu.shape[0], self.n_samples,
                                 policy.action_dim))
        u = mu[:, None, :] + np.exp(log_std)[:, None, :] * z
        mu_b, ls_b = self.behavior.np_heads(states)
        lp_pi = _gauss_logpdf_np(mu, log_std, u)
        lp_b = _gauss_logpdf_np(mu_b, ls_b, u)
        return (lp_pi - lp_b).mean(axis=1)


# ---------------------------------------------------------------------------
# dual forms


def _input_gradient(net, x, masks):
    """Discriminator input gradient as a differentiable expression.

    Replays the backward pass of a scalar-output ReLU network using the
    recorded activation masks as constants (exact a.e.; the masks' own
    derivative vanishes almost everywhere).
    """
    ones = np.ones((x.shape[0], 1))
    d = ad.matmul(ad.Tensor(ones), ad.transpose(net.weights[-1]))
    for w, mask in zip(reversed(net.weights[:-1]), reversed(masks)):
        d = ad.matmul(ad.mul(d, mask), ad.transpose(w))
    return d


def _forward_with_masks(net, x):
    """Forward pass returning (output, hidden-layer activation masks)."""
    h = ad.as_tensor(x)
    masks = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = ad.affine(h, w, b)
        if i < last:
            masks.append((h.data > 0.0).astype(np.float64))
            h = ad.relu(h)
    return h, masks


class DualEstimator:
    """Variationally estimated divergence with a learned discriminator.

    form "kl_dual" estimates KL(pi || pi_b) via the f-divergence dual with
    f(x) = -log x; form "wasserstein" estimates the Wasserstein-1 dual.
    """

    def __init__(self, state_dim, action_dim, behavior_policy=None,
                 form="kl_dual", hidden=(300, 300), learning_rate=1e-4,
                 inner_steps=3, grad_penalty=5.0, n_samples=10, rng=None):
        if form not in ("kl_dual", "wasserstein"):
            raise ConfigError(f"unknown dual form '{form}'")
        if grad_penalty < 0:
            raise ConfigError("gradient penalty coefficient must be >= 0")
        self.form = form
        self.behavior = behavior_policy
        self.n_samples = n_samples
        self.inner_steps = inner_steps
        self.grad_penalty = grad_penalty
        self.net = Mlp([state_dim + action_dim, *hidden, 1], rng=rng)
        self.frozen = self.net.frozen_view()
        self.opt = ad.AdamState(self.net.flat.size, learning_rate)
        self.action_dim = action_dim

    # -- discriminator training ------------------------------------------

    def discriminator_step(self, states, policy_actions, behavior_actions, rng):
        """One Adam ascent step on the dual objective; returns the dual
        objective value (before the gradient-penalty term)."""
        a_p = ad.value(policy_actions)
        a_b = np.asarray(behavior_actions, dtype=np.float64)
        with ad.Tape() as tape:
            u_b, _ = _forward_with_masks(self.net, np.concatenate([states, a_b], axis=1))
            u_p, _ = _forward_with_masks(self.net, np.concatenate([states, a_p], axis=1))
            if self.form == "kl_dual":
                # g = -exp(u); f*(g) = -u - 1
                objective = ad.add(ad.mean(ad.neg(ad.exp(u_b))),
                                   ad.add(ad.mean(u_p), 1.0))
            else:
                objective = ad.sub(ad.mean(u_b), ad.mean(u_p))
            eps = rng.uniform(size=(states.shape[0], 1))
            a_int = eps * a_b + (1.0 - eps) * a_p
            x_int = np.concatenate([states, a_int], axis=1)
            _, masks = _forward_with_masks(self.net, x_int)
            dx = _input_gradient(self.net, x_int, masks)
            da = ad.slice_axis(dx, 1, states.shape[1],
                               states.shape[1] + self.action_dim)
            norm = ad.sqrt(ad.add(ad.sum_(ad.square(da), axis=1), 1e-12))
            penalty = ad.mul(ad.mean(ad.square(ad.relu(ad.sub(norm, 1.0)))),
                             self.grad_penalty)
            loss = ad.add(ad.neg(objective), penalty)
            tape.gradient(loss)
        self.opt.step(self.net.flat, self.net.grad_vector(),
                      site=f"{self.form}_discriminator")
        return float(ad.value(objective))

    def prepare(self, states, policy, behavior_actions, rng):
        """Run the configured number of inner discriminator steps."""
        value = None
        for _ in range(self.inner_steps):
            a_p, _ = policy.sample_np(states, 1, rng)
            value = self.discriminator_step(states, a_p[:, 0, :],
                                            behavior_actions, rng)
        return value

    # -- estimation --------------------------------------------------------

    def _behavior_samples(self, states, rng):
        if self.behavior is None:
            raise ContractError("dual estimator has no behavior sampler bound")
        ys, _ = self.behavior.sample_np(states, self.n_samples, rng)
        return ys

    def _behavior_side(self, states, actions):
        """Constant per-state behavior term; actions (B, A) or (B, m, A)."""
        if actions.ndim == 2:
            actions = actions[:, None, :]
        b, m, adim = actions.shape
        x = np.concatenate([np.repeat(states, m, axis=0),
                            actions.reshape(b * m, adim)], axis=1)
        u = self.net.forward_np(x).reshape(b, m)
        if self.form == "kl_dual":
            return (-np.exp(u)).mean(axis=1)
        return u.mean(axis=1)

    def estimate(self, states, policy_samples, behavior_actions):
        """Per-state dual value; differentiable through policy_samples.

        behavior_actions may be dataset actions (B, A) or sampled actions
        (B, m, A); they are treated as constants.
        """
        policy_samples = ad.as_tensor(policy_samples)
        bval = self._behavior_side(states, np.asarray(ad.value(behavior_actions)))
        b, n, adim = policy_samples.data.shape
        xp = ad.concat([ad.Tensor(np.repeat(states, n, axis=0)),
                        ad.reshape(policy_samples, (b * n, adim))], axis=1)
        u_p = ad.reshape(self.frozen.forward(xp), (b, n))
        if self.form == "kl_dual":
            # E_b[-exp(u)] - E_p[f*(-exp(u))] with f*(-exp(u)) = -u - 1
            return ad.add(ad.add(ad.mean(u_p, axis=1), 1.0), bval)
        return ad.sub(ad.as_tensor(bval), ad.mean(u_p, axis=1))

    def estimate_tape(self, states, policy, rng):
        samples, _ = policy.sample(states, self.n_samples, rng)
        return self.estimate(states, samples, self._behavior_samples(states, rng))

    def estimate_np(self, states, policy, rng):
        xs, _ = policy.sample_np(states, self.n_samples, rng)
        ys = self._behavior_samples(states, rng)
        bval = self._behavior_side(states, ys)
        b, n, adim = xs.shape
        u_p = self.net.forward_np(
            np.concatenate([np.repeat(states, n, axis=0),
                            xs.reshape(b * n, adim)], axis=1)).reshape(b, n)
        if self.form == "kl_dual":
            return bval + u_p.mean(axis=1) + 1.0
        return bval - u_p.mean(axis=1)

    def mapped_outputs(self, states, actions):
        """Discriminator outputs after the dom(f*) mapping (kl_dual only)."""
        x = np.concatenate([states, actions], axis=1)
        u = self.net.forward_np(x)
        return -np.exp(u)
