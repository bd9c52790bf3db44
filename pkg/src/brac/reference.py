"""Producing the medium-quality reference policies that collect datasets.

A reference policy is trained online with the soft actor-critic special case
of the trainer (single-sample entropy, value penalty) and frozen the first
time its evaluation return enters a band between the random baseline and the
hand-coded controller:

    target(f) = random_return + f * (controller_return - random_return)

with f in [stop_low, stop_high] (0.4 .. 0.6 by default, i.e. roughly half as
good as the controller). Everything is seeded, so a given (env, seed) always
yields the same checkpoint.
"""

from dataclasses import dataclass

import numpy as np

from . import envs as envs_mod
from .data import Batch
from .envs import make_env
from .errors import ContractError
from .harness import EvalProtocol, evaluate
from .seeding import mix_seed
from .trainer import Trainer, TrainerConfig

_CONTROLLERS = {
    "pointmass2d": envs_mod.pointmass_controller,
    "pendulum": envs_mod.pendulum_controller,
}


class _RingBuffer:
    def __init__(self, capacity, state_dim, action_dim):
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.d = np.zeros(capacity)
        self.capacity = capacity
        self.size = 0
        self.ptr = 0

    def add(self, s, a, r, s2, d):
        i = self.ptr
        self.s[i], self.a[i], self.r[i] = s, a, r
        self.s2[i], self.d[i] = s2, float(d)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx],
                     self.s2[idx], self.d[idx])


@dataclass
class ReferenceResult:
    policy: object
    stop_step: int
    score: float
    target_band: tuple
    controller_return: float
    random_return: float


def baseline_returns(env, seed, episodes=20):
    """(controller mean return, uniform-random mean return)."""
    controller = _CONTROLLERS[env.name]
    ctrl_sel = envs_mod.controller_selector(controller)

    def rand_sel(policy, state, rng):
        return rng.uniform(env.action_low, env.action_high)

    ctrl = np.mean([envs_mod.episode_return(
        env, None, np.random.default_rng(mix_seed(seed, 1, i)), ctrl_sel)
        for i in range(episodes)])
    rand = np.mean([envs_mod.episode_return(
        env, None, np.random.default_rng(mix_seed(seed, 2, i)), rand_sel)
        for i in range(episodes)])
    return float(ctrl), float(rand)


def train_reference_policy(env_name, seed=1, stop_low=0.4, stop_high=0.6,
                           max_steps=60_000, eval_every=125, alpha=0.2,
                           hidden=(32, 32), q_hidden=(32, 32), batch_size=64,
                           policy_lr=1e-4, start_steps=1000, verbose=False):
    """Online soft actor-critic, stopped partway to the controller's return.

    Returns a ReferenceResult whose policy scored inside the stop band (or,
    if the band was stepped over between evaluations, the checkpoint closest
    to its midpoint).
    """
    env = make_env(env_name)
    ctrl, rand = baseline_returns(env, seed)
    lo = rand + stop_low * (ctrl - rand)
    hi = rand + stop_high * (ctrl - rand)
    mid = 0.5 * (lo + hi)

    cfg = TrainerConfig(mode="value_penalty", divergence="entropy_single_sample",
                        alpha=alpha, k=2, policy_hidden=hidden,
                        q_hidden=q_hidden, batch_size=batch_size,
                        policy_lr=policy_lr, total_steps=max_steps, seed=seed)
    trainer = Trainer(cfg, None, None, env)
    buffer = _RingBuffer(max_steps, env.state_dim, env.action_dim)
    rng = np.random.default_rng(mix_seed(seed, 0x0511CE))
    proto = EvalProtocol(episodes_per_eval=10, tail_points=1)

    best = None  # (distance to band midpoint, step, score, params)
    state = env.reset(int(rng.integers(2 ** 62)))
    for step in range(1, max_steps + 1):
        if step <= start_steps:
            action = rng.uniform(env.action_low, env.action_high)
        else:
            action, _ = trainer.policy.sample_np(state[None], 1, rng)
            action = action[0, 0]
        nxt, reward, done = env.step(state, action)
        buffer.add(state, action, reward, nxt, done)
        state = env.reset(int(rng.integers(2 ** 62))) if done else nxt

        if step > start_steps:
            batch = buffer.sample(batch_size, rng)
            trainer.critic_update(batch, step)
            trainer.actor_update(batch, step)

        if step > start_steps and step % eval_every == 0:
            eval_rng = np.random.default_rng(mix_seed(seed, 0xEA7, step))
            score = evaluate(trainer.policy, None, env, proto, eval_rng)
            if verbose:
                print(f"  reference {env_name} step {step}: {score:.1f} "
                      f"(band [{lo:.1f}, {hi:.1f}])")
            dist = abs(score - mid)
            if best is None or dist < best[0]:
                best = (dist, step, score, trainer.policy.trunk.flat.copy())
            if lo <= score <= hi:
                break
            if score > hi:
                break  # stepped over the band; keep the closest checkpoint

    if best is None:
        raise ContractError("reference training never reached an evaluation")
    _, stop_step, score, params = best
    trainer.policy.trunk.flat[:] = params
    return ReferenceResult(policy=trainer.policy, stop_step=stop_step,
                           score=score, target_band=(lo, hi),
                           controller_return=ctrl, random_return=rand)
