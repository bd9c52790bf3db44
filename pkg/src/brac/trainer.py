"""The behavior-regularized actor-critic training loop.

Each training step alternates one critic update and one actor update on a
uniform minibatch:

  critic   regress every ensemble member to
           r + gamma (Qbar(s', a') - alpha_eff * D(s'))   [r exactly at done]
           with a' ~ pi(.|s'), then soft-update the targets. alpha_eff is the
           configured alpha under a value penalty and 0 under policy
           regularization.

  actor    ascend  E[ min_j Q_j(s, a'') ] - alpha * D(s),  a'' ~ pi(.|s),
           with one reparameterized action sample per state. Dual-form
           divergences run their inner discriminator steps first.

The single-sample entropy divergence (D = log pi(a|s) evaluated at the drawn
sample) turns the value-penalty variant into a soft actor-critic step; alpha
may also be trained as a Lagrange multiplier against a divergence threshold.
A candidate-perturbation actor in the style of batch-constrained Q-learning
is available instead of the divergence machinery.

Any non-finite value raises internally and is converted into a completed
RunRecord with failed=True and final score 0, never a crash.
"""

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Mlp, Tape
from .critics import QEnsemble, TargetCombiner, td_target
from .data import sample_batch
from .divergences import DualEstimator, KlPrimalEstimator, MmdEstimator
from .errors import ConfigError, TrainingError
from .policies import TanhGaussianPolicy
from .seeding import mix_seed

DIVERGENCES = ("mmd", "kl_primal", "kl_dual", "wasserstein",
               "entropy_single_sample", "none")


@dataclass
class BcqConfig:
    """Candidate-perturbation actor settings."""

    phi: float = 0.05
    n_candidates: int = 10
    hidden: tuple = (300, 300)

    def __post_init__(self):
        if self.phi < 0 or self.n_candidates < 1:
            raise ConfigError("phi must be >= 0 and n_candidates >= 1")


@dataclass
class TrainerConfig:
    mode: str = "value_penalty"  # or "policy_regularization"
    divergence: str = "mmd"
    alpha_mode: str = "fixed"  # or "adaptive"
    alpha: float = 1.0
    epsilon: float = 0.05  # adaptive-alpha divergence threshold
    dual_lr: float = 0.01  # adaptive-alpha ascent rate
    k: int = 2
    combiner: TargetCombiner = field(default_factory=TargetCombiner)
    gamma: float = 0.99
    policy_lr: float = 1e-4
    q_lr: float = 1e-3
    batch_size: int = 256
    total_steps: int = 100_000
    tau: float = 0.005
    seed: int = 0
    n_div_samples: int = 10
    mmd_sigma: float = 20.0
    policy_hidden: tuple = (200, 200)
    q_hidden: tuple = (300, 300)
    disc_hidden: tuple = (300, 300)
    disc_lr: float = 1e-4
    disc_steps: int = 3
    grad_penalty: float = 5.0
    eval_interval: int = 0  # 0 means total_steps // 100
    bcq: BcqConfig = None

    def __post_init__(self):
        if self.mode not in ("value_penalty", "policy_regularization"):
            raise ConfigError(f"unknown mode '{self.mode}'")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"unknown divergence '{self.divergence}'")
        if self.alpha_mode not in ("fixed", "adaptive"):
            raise ConfigError(f"unknown alpha_mode '{self.alpha_mode}'")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must be in (0, 1)")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")

    def to_dict(self):
        d = dict(self.__dict__)
        d["combiner"] = {"mode": self.combiner.mode, "lam": self.combiner.lam}
        d["policy_hidden"] = list(self.policy_hidden)
        d["q_hidden"] = list(self.q_hidden)
        d["disc_hidden"] = list(self.disc_hidden)
        if self.bcq is not None:
            d["bcq"] = {"phi": self.bcq.phi,
                        "n_candidates": self.bcq.n_candidates,
                        "hidden": list(self.bcq.hidden)}
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if isinstance(d.get("combiner"), dict):
            d["combiner"] = TargetCombiner(**d["combiner"])
        if isinstance(d.get("bcq"), dict):
            b = dict(d["bcq"])
            b["hidden"] = tuple(b.get("hidden", (300, 300)))
            d["bcq"] = BcqConfig(**b)
        for key in ("policy_hidden", "q_hidden", "disc_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return TrainerConfig(**d)


@dataclass
class AdaptiveAlpha:
    """Lagrange-multiplier regularization weight, optimized in log space so
    alpha stays strictly positive."""

    log_alpha: float = 0.0
    dual_lr: float = 0.01
    epsilon: float = 0.05

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha))

    def update(self, mean_divergence):
        """Raise alpha when the divergence exceeds the threshold, lower it
        when below; returns the new alpha."""
        if not np.isfinite(mean_divergence):
            raise TrainingError("adaptive_alpha")
        self.log_alpha += self.dual_lr * (float(mean_divergence) - self.epsilon)
        return self.alpha


def adaptive_alpha_update(state, mean_divergence):
    return state.update(mean_divergence)


@dataclass
class RunRecord:
    """Per-run metric trace: the unit the experiment harness consumes."""

    config: dict
    eval_steps: list
    eval_returns: list
    q_trace: list
    final_score: float
    failed: bool
    failure: str = None

    def to_json(self):
        return json.dumps({
            "config": self.config,
            "eval_steps": self.eval_steps,
            "eval_returns": self.eval_returns,
            "q_trace": self.q_trace,
            "final_score": self.final_score,
            "failed": self.failed,
            "failure": self.failure,
        }, sort_keys=True)

    @staticmethod
    def from_json(text):
        return RunRecord(**json.loads(text))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @staticmethod
    def load(path):
        with open(path) as f:
            return RunRecord.from_json(f.read())


def bcq_select(bcq, xi, ens, behavior, states, rng, nets="source"):
    """Pick, per state, the behavior candidate (perturbed within +-phi and
    clipped to bounds) that maximizes the minimum ensemble Q."""
    n = bcq.n_candidates
    cand, _ = behavior.sample_np(states, n, rng)
    b, adim = states.shape[0], cand.shape[2]
    rep = np.repeat(states, n, axis=0)
    flat = cand.reshape(b * n, adim)
    if bcq.phi > 0.0:
        raw = xi.forward_np(np.concatenate([rep, flat], axis=1))
        flat = np.clip(flat + bcq.phi * np.tanh(raw),
                       behavior.action_low, behavior.action_high)
    q = ens.q_values_np(rep, flat, nets).min(axis=1).reshape(b, n)
    best = np.argmax(q, axis=1)  # ties break at the first index
    return flat.reshape(b, n, adim)[np.arange(b), best]


class Trainer:
    """Owns the policy, critic ensemble, divergence estimator and optimizer
    state for one offline run."""

    def __init__(self, cfg, dataset, behavior_policy, env):
        self.cfg = cfg
        self.dataset = dataset
        self.behavior = behavior_policy
        self.env = env
        self.rng = np.random.default_rng(cfg.seed)
        sdim, adim = env.state_dim, env.action_dim

        self.policy = TanhGaussianPolicy(sdim, env.action_low, env.action_high,
                                         hidden=cfg.policy_hidden, rng=self.rng)
        self.ens = QEnsemble(sdim, adim, cfg.k, hidden=cfg.q_hidden,
                             tau=cfg.tau, rng=self.rng)
        self.policy_opt = AdamState(self.policy.trunk.flat.size, cfg.policy_lr)
        self.q_opts = [AdamState(m.flat.size, cfg.q_lr) for m in self.ens.sources]

        self.estimator = self._build_estimator(sdim, adim)
        self.adaptive = None
        if cfg.alpha_mode == "adaptive":
            self.adaptive = AdaptiveAlpha(dual_lr=cfg.dual_lr,
                                          epsilon=cfg.epsilon)

        self.xi = None
        self.xi_opt = None
        if cfg.bcq is not None:
            self.xi = Mlp([sdim + adim, *cfg.bcq.hidden, adim], rng=self.rng)
            self.xi_opt = AdamState(self.xi.flat.size, cfg.policy_lr)

    def _build_estimator(self, sdim, adim):
        cfg = self.cfg
        if cfg.divergence == "mmd":
            return MmdEstimator(self.behavior, sigma=cfg.mmd_sigma,
                                n_samples=cfg.n_div_samples)
        if cfg.divergence == "kl_primal":
            return KlPrimalEstimator(self.behavior, n_samples=cfg.n_div_samples)
        if cfg.divergence in ("kl_dual", "wasserstein"):
            return DualEstimator(sdim, adim, behavior_policy=self.behavior,
                                 form=cfg.divergence, hidden=cfg.disc_hidden,
                                 learning_rate=cfg.disc_lr,
                                 inner_steps=cfg.disc_steps,
                                 grad_penalty=cfg.grad_penalty,
                                 n_samples=cfg.n_div_samples, rng=self.rng)
        return None  # entropy_single_sample and none need no estimator

    @property
    def alpha(self):
        return self.adaptive.alpha if self.adaptive is not None else self.cfg.alpha

    # -- updates -------------------------------------------------------------

    def critic_targets(self, batch, step=0):
        """Penalized bootstrap targets for a minibatch (stop-gradient).

        Under policy regularization the effective alpha is zero and the
        penalty (with its rng draws) is skipped entirely, which is what makes
        these targets bit-identical to a value-penalty run with alpha = 0
        under a shared rng stream.
        """
        cfg = self.cfg
        alpha_eff = self.alpha if cfg.mode == "value_penalty" else 0.0
        if self.cfg.bcq is not None:
            next_actions = bcq_select(cfg.bcq, self.xi, self.ens, self.behavior,
                                      batch.next_states, self.rng)
            penalty = 0.0
        else:
            acts, lps = self.policy.sample_np(batch.next_states, 1, self.rng)
            next_actions = acts[:, 0, :]
            if alpha_eff == 0.0:
                penalty = 0.0
            elif cfg.divergence == "entropy_single_sample":
                penalty = lps[:, 0]
            else:
                penalty = self.estimator.estimate_np(batch.next_states,
                                                     self.policy, self.rng)
        target = td_target(self.ens, cfg.combiner, batch, next_actions,
                           penalty, alpha_eff, cfg.gamma)
        ad.check_finite("td_target", target, step=step)
        return target

    def critic_update(self, batch, step):
        """One regression step of every ensemble member toward the penalized
        bootstrap target; returns (td_loss, batch-mean source Q)."""
        # overflow here is a recorded run outcome, not a console warning
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._critic_update(batch, step)

    def _critic_update(self, batch, step):
        cfg = self.cfg
        target = self.critic_targets(batch, step)

        x = np.concatenate([batch.states, batch.actions], axis=1)
        losses = []
        q_sum = 0.0
        with Tape() as tape:
            total = None
            for member in self.ens.sources:
                pred = member.forward(x)
                q_sum += float(pred.data.sum())
                loss = ad.mse(ad.reshape(pred, (len(target),)), target)
                losses.append(float(loss.data))
                total = loss if total is None else ad.add(total, loss)
            tape.gradient(total)
        for member, opt in zip(self.ens.sources, self.q_opts):
            opt.step(member.flat, member.grad_vector(), site="critic_adam",
                     step_index=step)
        self.ens.soft_update_targets()
        td_loss = float(np.mean(losses))
        if not np.isfinite(td_loss):
            raise TrainingError("critic_loss", step)
        mean_q = q_sum / (len(target) * cfg.k)
        return td_loss, mean_q

    def actor_update(self, batch, step):
        """One ascent step on the regularized policy objective; returns
        (actor_loss, batch-mean divergence)."""
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._actor_update(batch, step)

    def _actor_update(self, batch, step):
        cfg = self.cfg
        if self.cfg.bcq is not None:
            return self._bcq_actor_update(batch, step), 0.0
        alpha = self.alpha
        need_div = cfg.divergence != "none" and (alpha != 0.0
                                                 or self.adaptive is not None)
        if need_div and isinstance(self.estimator, DualEstimator):
            self.estimator.prepare(batch.states, self.policy, batch.actions,
                                   self.rng)
        mean_div = np.nan
        with Tape() as tape:
            acts, lps = self.policy.sample(batch.states, 1, self.rng)
            a_new = ad.reshape(acts, (len(batch.states), self.env.action_dim))
            q = self.ens.q_values(batch.states, a_new, "source")
            q_min = ad.reduce_min(q, axis=1)
            loss = ad.mean(ad.mul(q_min, -1.0))
            if need_div:
                if cfg.divergence == "entropy_single_sample":
                    div = ad.reshape(lps, (len(batch.states),))
                elif isinstance(self.estimator, DualEstimator):
                    # dual forms score the dataset action at s directly; no
                    # cloned behavior policy enters the actor objective
                    samples, _ = self.policy.sample(batch.states,
                                                    cfg.n_div_samples, self.rng)
                    div = self.estimator.estimate(batch.states, samples,
                                                  batch.actions)
                else:
                    div = self.estimator.estimate_tape(batch.states,
                                                       self.policy, self.rng)
                mean_div = float(np.mean(div.data))
                if alpha != 0.0:
                    loss = ad.add(loss, ad.mul(ad.mean(div), alpha))
            tape.gradient(loss)
        actor_loss = float(loss.data)
        if not np.isfinite(actor_loss):
            raise TrainingError("actor_loss", step)
        self.policy_opt.step(self.policy.trunk.flat,
                             self.policy.trunk.grad_vector(),
                             site="actor_adam", step_index=step)
        return actor_loss, mean_div

    def _bcq_actor_update(self, batch, step):
        """Train the perturbation net to push one candidate per state uphill
        on the minimum ensemble Q (gradient flows through xi only)."""
        bcq = self.cfg.bcq
        cand, _ = self.behavior.sample_np(batch.states, 1, self.rng)
        cand = cand[:, 0, :]
        if bcq.phi == 0.0:
            return 0.0
        x_in = np.concatenate([batch.states, cand], axis=1)
        with Tape() as tape:
            raw = self.xi.forward(x_in)
            pert = ad.clip(ad.add(ad.mul(ad.tanh(raw), bcq.phi), cand),
                           self.env.action_low, self.env.action_high)
            q = self.ens.q_values(batch.states, pert, "source")
            loss = ad.mean(ad.mul(ad.reduce_min(q, axis=1), -1.0))
            tape.gradient(loss)
        actor_loss = float(loss.data)
        if not np.isfinite(actor_loss):
            raise TrainingError("bcq_actor_loss", step)
        self.xi_opt.step(self.xi.flat, self.xi.grad_vector(),
                         site="bcq_adam", step_index=step)
        return actor_loss

    # -- evaluation hooks ------------------------------------------------

    def eval_actor(self):
        """The object the evaluator should roll out."""
        if self.cfg.bcq is not None:
            return BcqActor(self.cfg.bcq, self.xi, self.ens, self.behavior)
        return self.policy

    # -- main loop ------------------------------------------------------------

    def run(self, protocol):
        from .harness import evaluate  # local import: harness builds on trainer

        cfg = self.cfg
        interval = cfg.eval_interval or max(1, cfg.total_steps // 100)
        q_window = deque(maxlen=500)
        eval_steps, eval_returns, q_trace = [], [], []
        failed, failure = False, None

        def eval_point(step):
            eval_rng = np.random.default_rng(mix_seed(cfg.seed, 0xE7A1, step))
            score = evaluate(self.eval_actor(), self.ens, self.env, protocol,
                             eval_rng)
            eval_steps.append(step)
            eval_returns.append(score)
            q_trace.append(float(np.mean(q_window)) if q_window else 0.0)

        eval_point(0)
        try:
            for step in range(1, cfg.total_steps + 1):
                batch = sample_batch(self.dataset, cfg.batch_size, self.rng)
                td_loss, mean_q = self.critic_update(batch, step)
                actor_loss, mean_div = self.actor_update(batch, step)
                if self.adaptive is not None and np.isfinite(mean_div):
                    self.adaptive.update(mean_div)
                q_window.append(mean_q)
                if step % interval == 0:
                    eval_point(step)
        except TrainingError as err:
            failed = True
            failure = str(err)

        if failed:
            final_score = 0.0
        else:
            tail = eval_returns[-protocol.tail_points:]
            final_score = float(np.mean(tail))
        return RunRecord(
            config=cfg.to_dict(),
            eval_steps=eval_steps,
            eval_returns=[float(v) for v in eval_returns],
            q_trace=q_trace,
            final_score=final_score,
            failed=failed,
            failure=failure,
        )


class BcqActor:
    """Rollout-time candidate-selection policy."""

    def __init__(self, bcq, xi, ens, behavior):
        self.bcq = bcq
        self.xi = xi
        self.ens = ens
        self.behavior = behavior

    def act_batch(self, states, rng):
        return bcq_select(self.bcq, self.xi, self.ens, self.behavior,
                          states, rng)


def train_offline(cfg, dataset, behavior_policy, env, protocol):
    """Run one full offline training job and return its RunRecord."""
    trainer = Trainer(cfg, dataset, behavior_policy, env)
    return trainer.run(protocol)


# ---------------------------------------------------------------------------
# algorithm presets


ALGORITHMS = ("mmd_vp", "mmd_pr", "kl_vp", "kl_pr", "kldual_vp", "kldual_pr",
              "w_vp", "w_pr", "bear", "bcq", "sac", "bc")

_DIV_BY_PREFIX = {"mmd": "mmd", "kl": "kl_primal", "kldual": "kl_dual",
                  "w": "wasserstein"}


def config_for_algo(algo, **overrides):
    """TrainerConfig preset for a named algorithm variant.

    Regularized variants default to k=2 with a min combiner; the adaptive
    variant uses k=4 with the 0.75 min/max mixture; the candidate-perturbation
    variant uses k=2 with the mixture and no divergence.
    """
    if algo not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm '{algo}' (have {ALGORITHMS})")
    if algo == "bc":
        raise ConfigError("behavior cloning has no trainer config")
    base = dict(k=2, combiner=TargetCombiner("min"))
    if algo in ("bear",):
        base.update(divergence="mmd", mode="policy_regularization",
                    alpha_mode="adaptive", k=4,
                    combiner=TargetCombiner("weighted", 0.75))
    elif algo == "bcq":
        base.update(divergence="none", alpha=0.0,
                    combiner=TargetCombiner("weighted", 0.75),
                    bcq=overrides.pop("bcq", BcqConfig()))
    elif algo == "sac":
        base.update(divergence="entropy_single_sample", mode="value_penalty")
    else:
        prefix, suffix = algo.rsplit("_", 1)
        base.update(divergence=_DIV_BY_PREFIX[prefix],
                    mode="value_penalty" if suffix == "vp"
                    else "policy_regularization")
    base.update(overrides)
    return TrainerConfig(**base)
