"""Self-contained oracle implementations and runnable check suites.

The oracles here are deliberately naive (double loops, brute force) and
independent of the vectorized production code paths they verify. The `check`
CLI subcommand runs them; the test suite asserts the same comparisons.
"""

import numpy as np

from . import autodiff as ad


def mmd_squared_oracle(x, y, sigma):
    """O(n^2) double-loop reference for the biased Laplacian-kernel MMD^2."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))

    def k(a, b):
        return np.exp(-np.sum(np.abs(a - b)) / sigma)

    xx = sum(k(a, b) for a in x for b in x) / (len(x) * len(x))
    xy = sum(k(a, b) for a in x for b in y) / (len(x) * len(y))
    yy = sum(k(a, b) for a in y for b in y) / (len(y) * len(y))
    return xx - 2.0 * xy + yy


def run_grad_suite(trials=100, rng=None, max_hidden=300, report=print):
    """Autodiff vs central finite differences on random MLPs."""
    from .autodiff import Mlp, Tape

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for trial in range(trials):
        sizes = [int(rng.integers(2, 9)),
                 int(rng.integers(2, max_hidden + 1)),
                 int(rng.integers(2, max_hidden + 1)),
                 int(rng.integers(1, 4))]
        mlp = Mlp(sizes, rng=rng)
        x = rng.normal(size=(int(rng.integers(1, 6)), sizes[0]))
        y = rng.normal(size=(x.shape[0], sizes[-1]))

        def loss_np():
            d = mlp.forward_np(x) - y
            return float(np.mean(d * d))

        with Tape() as tape:
            out = mlp.forward(x)
            loss = ad.mean(ad.square(ad.sub(out, ad.Tensor(y))))
            tape.gradient(loss)
        analytic = mlp.grad_vector()

        # probe a random subset of coordinates; full FD on (300,300) nets
        # costs ~180k forward passes per trial
        n_probe = min(mlp.flat.size, 40)
        coords = rng.choice(mlp.flat.size, size=n_probe, replace=False)
        h = 1e-5
        for c in coords:
            orig = mlp.flat[c]
            mlp.flat[c] = orig + h
            hi = loss_np()
            mlp.flat[c] = orig - h
            lo = loss_np()
            mlp.flat[c] = orig
            numeric = (hi - lo) / (2 * h)
            denom = max(abs(numeric), 1e-6)
            worst = max(worst, abs(analytic[c] - numeric) / denom)
    ok = worst < 1e-4
    report(f"grad suite: {trials} random MLPs, max relative error "
           f"{worst:.3e} {'PASS' if ok else 'FAIL'}")
    return ok


def run_divergence_suite(instances=1000, rng=None, report=print):
    """Vectorized MMD^2 vs the double-loop oracle, plus exact self-distance."""
    from .divergences import mmd_squared

    rng = rng or np.random.default_rng(1)
    worst = 0.0
    for _ in range(instances):
        n, m, d = rng.integers(1, 33), rng.integers(1, 33), rng.integers(1, 9)
        sigma = float(rng.uniform(0.5, 30.0))
        x = rng.normal(size=(n, d))
        y = rng.normal(size=(m, d))
        worst = max(worst, abs(mmd_squared(x, y, sigma)
                               - mmd_squared_oracle(x, y, sigma)))
    self_zero = all(
        mmd_squared(z, z.copy(), float(rng.uniform(1, 10))) == 0.0
        for z in (rng.normal(size=(int(rng.integers(1, 16)), 3)) for _ in range(50)))
    ok = worst < 1e-12 and self_zero
    report(f"divergence suite: {instances} instances, max |vectorized - oracle| "
           f"= {worst:.3e}, self-distance exactly zero: {self_zero} "
           f"{'PASS' if ok else 'FAIL'}")
    return ok


def run_combiner_suite(report=print):
    """Exact combiner arithmetic on the documented examples."""
    from .critics import TargetCombiner, combine

    v = np.array([[1.0, 3.0]])
    checks = [
        combine(v, TargetCombiner("weighted", 0.75))[0] == 1.5,
        combine(v, TargetCombiner("min"))[0] == 1.0,
        combine(np.array([[7.0]]), TargetCombiner("min"))[0] == 7.0,
        combine(np.array([[7.0]]), TargetCombiner("weighted", 0.75))[0] == 7.0,
    ]
    ok = all(checks)
    report(f"combiner suite: {sum(checks)}/4 exact {'PASS' if ok else 'FAIL'}")
    return ok


def reference_sac_step(policy, q_nets, q_targets, batch, alpha, gamma, tau,
                       policy_opt, q_opts, rng):
    """An independently assembled soft actor-critic step (in place).

    Standard twin-Q SAC: targets r + gamma (min Q'(s',a') - alpha log pi(a'|s'))
    with a' resampled from the current policy, squared-error critic
    regression, then policy ascent on E[min Q(s, a'') - alpha log pi(a''|s)].
    """
    from .autodiff import Tape, soft_update

    a2, lp2 = policy.sample_np(batch.next_states, 1, rng)
    x2 = np.concatenate([batch.next_states, a2[:, 0, :]], axis=1)
    tq = np.stack([t.forward_np(x2)[:, 0] for t in q_targets], axis=1)
    target = batch.rewards + gamma * (1.0 - batch.dones) * (
        tq.min(axis=1) - alpha * lp2[:, 0])

    x = np.concatenate([batch.states, batch.actions], axis=1)
    for net, opt in zip(q_nets, q_opts):
        with Tape() as tape:
            pred = ad.reshape(net.forward(x), (len(target),))
            loss = ad.mean(ad.square(ad.sub(pred, ad.Tensor(target))))
            tape.gradient(loss)
        opt.step(net.flat, net.grad_vector())
    for net, tgt in zip(q_nets, q_targets):
        soft_update(tgt.flat, net.flat, tau)

    with Tape() as tape:
        acts, lps = policy.sample(batch.states, 1, rng)
        a_new = ad.reshape(acts, (len(target), policy.action_dim))
        x_new = ad.concat([ad.Tensor(batch.states), a_new], axis=1)
        qs = ad.concat([net.forward(x_new) for net in q_nets], axis=1)
        q_min = ad.reduce_min(qs, axis=1)
        ent = ad.reshape(lps, (len(target),))
        loss = ad.mean(ad.sub(ad.mul(ent, alpha), q_min))
        tape.gradient(loss)
    policy_opt.step(policy.trunk.flat, policy.trunk.grad_vector())


def sac_equivalence_gap(seed=0, alpha=0.2, batch_size=16):
    """Max parameter gap between one value-penalty single-sample-entropy
    trainer step and the reference soft-actor step on a frozen batch."""
    from .autodiff import AdamState
    from .critics import TargetCombiner
    from .data import NoiseConfig, collect, sample_batch
    from .envs import PointMass2D
    from .policies import TanhGaussianPolicy
    from .trainer import Trainer, TrainerConfig

    env = PointMass2D()
    probe = TanhGaussianPolicy(4, env.action_low, env.action_high,
                               hidden=(8,), rng=np.random.default_rng(seed))
    ds = collect(env, probe, NoiseConfig("none"), 400,
                 np.random.default_rng(seed + 1))
    cfg = TrainerConfig(mode="value_penalty", divergence="entropy_single_sample",
                        alpha=alpha, k=2, combiner=TargetCombiner("min"),
                        policy_hidden=(12, 12), q_hidden=(12, 12),
                        batch_size=batch_size, total_steps=1, seed=seed,
                        policy_lr=3e-4, q_lr=1e-3)
    trainer = Trainer(cfg, ds, None, env)

    # frozen copies and an identical rng stream for the reference
    ref_policy = trainer.policy.clone_structure()
    ref_qs = [m.clone() for m in trainer.ens.sources]
    ref_ts = [m.clone(requires_grad=False) for m in trainer.ens.targets]
    ref_policy_opt = AdamState(ref_policy.trunk.flat.size, cfg.policy_lr)
    ref_q_opts = [AdamState(m.flat.size, cfg.q_lr) for m in ref_qs]
    rng_state = trainer.rng.bit_generator.state

    batch = sample_batch(ds, batch_size, np.random.default_rng(seed + 2))
    trainer.critic_update(batch, 1)
    trainer.actor_update(batch, 1)

    ref_rng = np.random.default_rng()
    ref_rng.bit_generator.state = rng_state
    reference_sac_step(ref_policy, ref_qs, ref_ts, batch, alpha, cfg.gamma,
                       cfg.tau, ref_policy_opt, ref_q_opts, ref_rng)

    gap = np.max(np.abs(trainer.policy.trunk.flat - ref_policy.trunk.flat))
    for a, b in zip(trainer.ens.sources, ref_qs):
        gap = max(gap, np.max(np.abs(a.flat - b.flat)))
    for a, b in zip(trainer.ens.targets, ref_ts):
        gap = max(gap, np.max(np.abs(a.flat - b.flat)))
    return float(gap)


def run_sac_equiv_suite(report=print):
    """Single-sample-entropy value penalty vs a reference soft-actor step."""
    gap = sac_equivalence_gap(seed=0)
    ok = gap <= 1e-10
    report(f"sac-equiv suite: max parameter gap {gap:.3e} "
           f"{'PASS' if ok else 'FAIL'}")
    return ok


SUITES = {
    "grad": run_grad_suite,
    "divergence": run_divergence_suite,
    "combiner": run_combiner_suite,
    "sac-equiv": run_sac_equiv_suite,
}
