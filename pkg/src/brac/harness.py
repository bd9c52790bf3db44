"""Experiment harness: evaluation protocol, hyperparameter grids with
resumable execution, best-cell selection, aggregation, and reports.

A grid is the product (policy learning rate) x (regularization strength) x
(dataset) x (seed). Each cell trains independently with a seed derived from
the cell's indices, so execution order and parallelism never change any
record. Records are persisted one file per cell as they finish; rerunning a
grid skips the cells whose record files already exist.
"""

import csv
import json
import multiprocessing
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import checkpoints, data
from .envs import make_env
from .errors import ConfigError, ContractError
from .policies import CloneConfig, clone_behavior
from .seeding import mix_seed
from .trainer import RunRecord, config_for_algo, train_offline


@dataclass
class EvalProtocol:
    """How policies are scored during and after training.

    At each environment step the actor draws n_action_samples actions and
    plays the one with the highest learned Q (ties go to the first index);
    actors without a critic fall back to their mean action. A final score is
    the mean over the last tail_points evaluation points; negative scores are
    clamped to zero in reports only, never in raw traces.
    """

    episodes_per_eval: int = 20
    tail_points: int = 10
    n_action_samples: int = 10

    def __post_init__(self):
        if self.episodes_per_eval < 1 or self.tail_points < 1:
            raise ConfigError("episodes_per_eval and tail_points must be >= 1")


def clamp_score(score):
    """Reporting rule: negative performance is reported as 0."""
    return max(float(score), 0.0)


def select_actions_batch(policy, ens, states, protocol, rng):
    """Vectorized action choice for a batch of concurrent episodes."""
    if hasattr(policy, "act_batch"):
        return policy.act_batch(states, rng)
    if ens is None:
        return policy.mean_action_np(states)
    n = protocol.n_action_samples
    samples, _ = policy.sample_np(states, n, rng)
    b, _, adim = samples.shape
    flat = samples.reshape(b * n, adim)
    q = ens.min_q_np(np.repeat(states, n, axis=0), flat).reshape(b, n)
    best = np.argmax(q, axis=1)  # first index wins ties
    return samples[np.arange(b), best]


def bc_record(behavior, env, protocol, seed):
    """A RunRecord for the behavior-cloning baseline: no training, just
    tail_points evaluations of the cloned policy's mean action."""
    returns = []
    for i in range(protocol.tail_points):
        rng = np.random.default_rng(mix_seed(seed, 0xBC, i))
        returns.append(evaluate(behavior, None, env, protocol, rng))
    return RunRecord(
        config={"algorithm": "bc", "seed": seed, "env": env.name},
        eval_steps=list(range(protocol.tail_points)),
        eval_returns=[float(v) for v in returns],
        q_trace=[0.0] * protocol.tail_points,
        final_score=float(np.mean(returns)),
        failed=False,
        failure=None,
    )


def evaluate(policy, ens, env, protocol, rng):
    """Mean return over protocol.episodes_per_eval episodes.

    Episodes run in lockstep (both built-in tasks are fixed-horizon), which
    keeps evaluation cheap without changing any single-episode semantics.
    """
    seeds = [int(rng.integers(2 ** 62)) for _ in range(protocol.episodes_per_eval)]
    states = env.reset_batch(seeds)
    returns = np.zeros(len(seeds))
    for _ in range(env.horizon):
        actions = select_actions_batch(policy, ens, states, protocol, rng)
        actions = np.clip(actions, env.action_low, env.action_high)
        states, rewards = env.dynamics_batch(states, actions)
        returns += rewards
    return float(np.mean(returns))


# ---------------------------------------------------------------------------
# grids


DEFAULT_POLICY_LRS = (3e-6, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3)

DEFAULT_STRENGTHS = {
    "mmd": (3.0, 10.0, 30.0, 100.0, 300.0),
    "kl_primal": (0.1, 0.3, 1.0, 3.0, 10.0),
    "kl_dual": (0.1, 0.3, 1.0, 3.0, 10.0),
    "wasserstein": (0.3, 1.0, 3.0, 10.0, 30.0),
    "bear_epsilon": (0.015, 0.05, 0.15, 0.5, 1.5),
    "bcq_phi": (0.005, 0.015, 0.05, 0.15, 0.5),
}


def strengths_for_algo(algo):
    if algo == "bear":
        return DEFAULT_STRENGTHS["bear_epsilon"]
    if algo == "bcq":
        return DEFAULT_STRENGTHS["bcq_phi"]
    if algo == "sac":
        return (0.01, 0.03, 0.1, 0.3, 1.0)  # entropy weight
    cfg = config_for_algo(algo, total_steps=0)
    return DEFAULT_STRENGTHS[cfg.divergence]


@dataclass
class GridSpec:
    """Search space: learning rates x strengths x datasets x seeds."""

    policy_lrs: tuple = DEFAULT_POLICY_LRS
    strengths: tuple = DEFAULT_STRENGTHS["mmd"]
    n_seeds: int = 5

    def __post_init__(self):
        if not self.policy_lrs or not self.strengths:
            raise ConfigError("grid value lists must be nonempty")
        if any(v <= 0 for v in self.policy_lrs) \
                or any(v <= 0 for v in self.strengths) or self.n_seeds < 1:
            raise ConfigError("grid values must be positive")

    @staticmethod
    def for_algo(algo, **overrides):
        overrides.setdefault("strengths", strengths_for_algo(algo))
        return GridSpec(**overrides)

    def cells(self, n_datasets):
        """Every (lr_index, strength_index, dataset_index, seed_index)."""
        return [(il, ist, ids, isd)
                for il in range(len(self.policy_lrs))
                for ist in range(len(self.strengths))
                for ids in range(n_datasets)
                for isd in range(self.n_seeds)]


def apply_strength(algo, cfg, strength):
    """Set the algorithm's regularization knob to the grid value."""
    if algo == "bear":
        return replace(cfg, epsilon=float(strength))
    if algo == "bcq":
        return replace(cfg, bcq=replace(cfg.bcq, phi=float(strength)))
    return replace(cfg, alpha=float(strength))


def record_name(algo, il, ist, ids, isd):
    return f"{algo}_lr{il}_st{ist}_ds{ids}_seed{isd}.json"


def ensure_behavior(dataset_path, out_dir, base_seed, clone_cfg=None,
                    hidden=(200, 200)):
    """Clone (or load the cached clone of) a dataset's behavior policy."""
    stem = os.path.splitext(os.path.basename(dataset_path))[0]
    path = os.path.join(out_dir, f"{stem}.behavior.ckpt")
    if os.path.exists(path):
        return path
    ds = data.load(dataset_path)
    cfg = clone_cfg or CloneConfig()
    rng = np.random.default_rng(mix_seed(base_seed, 0xC10E, _stable_id(stem)))
    policy, _ = clone_behavior(ds, cfg, rng, hidden=hidden)
    checkpoints.save_policy(policy, path)
    return path


def _stable_id(text):
    return int.from_bytes(text.encode(), "little") % (1 << 32)


def _run_cell(args):
    """One grid cell, fully specified by paths and plain dicts (worker-safe)."""
    (cfg_dict, dataset_path, behavior_path, env_name, out_path,
     protocol_dict) = args
    from .trainer import TrainerConfig

    cfg = TrainerConfig.from_dict({k: v for k, v in cfg_dict.items()
                                   if k != "grid_cell"})
    ds = data.load(dataset_path)
    behavior = checkpoints.load_policy(behavior_path)
    env = make_env(env_name)
    record = train_offline(cfg, ds, behavior, env, EvalProtocol(**protocol_dict))
    record.config["grid_cell"] = cfg_dict["grid_cell"]
    record.save(out_path)
    return out_path


def run_grid(grid, base_cfg, dataset_paths, env_name, out_dir, algo,
             parallelism=1, protocol=None, base_seed=0, behavior_dir=None):
    """Train every grid cell that has no record yet; returns all records.

    base_cfg is the shared TrainerConfig; the grid overwrites policy_lr, the
    strength knob and the seed per cell. Finished cells persist immediately,
    so an interrupted grid resumes where it stopped.
    """
    protocol = protocol or EvalProtocol()
    os.makedirs(out_dir, exist_ok=True)
    behavior_dir = behavior_dir or out_dir
    os.makedirs(behavior_dir, exist_ok=True)
    behaviors = {}
    for ids, ds_path in enumerate(dataset_paths):
        hidden = base_cfg.policy_hidden
        behaviors[ids] = ensure_behavior(ds_path, behavior_dir, base_seed,
                                         hidden=hidden)

    jobs = []
    for il, ist, ids, isd in grid.cells(len(dataset_paths)):
        out_path = os.path.join(out_dir, record_name(algo, il, ist, ids, isd))
        if os.path.exists(out_path):
            continue
        strength = grid.strengths[ist]
        cfg = replace(base_cfg, policy_lr=grid.policy_lrs[il],
                      seed=mix_seed(base_seed, il, ist, ids, isd))
        cfg = apply_strength(algo, cfg, strength)
        cfg_dict = cfg.to_dict()
        cfg_dict["grid_cell"] = {
            "algo": algo, "env": env_name,
            "lr_index": il, "strength_index": ist,
            "dataset_index": ids, "seed_index": isd,
            "lr": grid.policy_lrs[il], "strength": strength,
            "dataset": os.path.basename(dataset_paths[ids]),
        }
        jobs.append((cfg_dict, dataset_paths[ids], behaviors[ids], env_name,
                     out_path, protocol.__dict__))

    if parallelism > 1 and jobs:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(parallelism) as pool:
            for _ in pool.imap_unordered(_run_cell, jobs):
                pass
    else:
        for job in jobs:
            _run_cell(job)

    records = []
    for il, ist, ids, isd in grid.cells(len(dataset_paths)):
        records.append(RunRecord.load(
            os.path.join(out_dir, record_name(algo, il, ist, ids, isd))))
    return records


# ---------------------------------------------------------------------------
# aggregation


def _cell(record):
    try:
        return record.config["grid_cell"]
    except (KeyError, TypeError):
        raise ContractError("record carries no grid_cell metadata")


def select_best(records, grid=None, n_datasets=None):
    """The (lr, strength) pair with the best mean final score across all
    datasets and seeds. Exact ties prefer the smaller strength, then the
    smaller learning rate. Raises on an incomplete grid.

    A failed (overflowed) run disqualifies its cell: the recorded score 0
    would otherwise outrank healthy runs on tasks whose returns are negative.
    """
    if not records:
        raise ContractError("no records to select from")
    cells = {}
    for r in records:
        c = _cell(r)
        cells.setdefault((c["lr_index"], c["strength_index"]), []).append(r)
    seen = {(c["lr_index"], c["strength_index"], c["dataset_index"],
             c["seed_index"]) for c in map(_cell, records)}
    if grid is not None:
        nd = n_datasets or 1 + max(c["dataset_index"] for c in map(_cell, records))
        missing = [cell for cell in grid.cells(nd) if cell not in seen]
        if missing:
            raise ContractError(f"incomplete grid, missing cells: {missing[:20]}"
                                + ("..." if len(missing) > 20 else ""))
    scored = []
    for (il, ist), rs in cells.items():
        if any(r.failed for r in rs):
            mean = -np.inf
        else:
            mean = float(np.mean([r.final_score for r in rs]))
        lr = _cell(rs[0])["lr"]
        strength = _cell(rs[0])["strength"]
        scored.append((-mean, strength, lr, il, ist))
    scored.sort()
    _, strength, lr, il, ist = scored[0]
    return lr, strength


def _spearman(x, y):
    """Spearman rank correlation; exact +-1.0 for untied monotone data."""
    rx = stats.rankdata(x)
    ry = stats.rankdata(y)
    n = len(rx)
    if len(set(rx)) == n and len(set(ry)) == n:  # no ties: classic formula
        d2 = float(np.sum((rx - ry) ** 2))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    rho = np.corrcoef(rx, ry)[0, 1]
    return None if np.isnan(rho) else float(rho)


def correlation_report(records):
    """Scatter data of (trailing mean Q, final score) per (env, algo,
    dataset), with Spearman rank correlation (None when undefined)."""
    groups = {}
    for r in records:
        c = _cell(r)
        key = (c["env"], c["algo"], c["dataset"])
        q = r.q_trace[-1] if r.q_trace else float("nan")
        groups.setdefault(key, []).append((q, r.final_score))
    out = []
    for key, points in sorted(groups.items()):
        qs = [p[0] for p in points]
        scores = [p[1] for p in points]
        if len(points) < 2 or len(set(scores)) == 1 or len(set(qs)) == 1:
            rho = None
        else:
            rho = _spearman(qs, scores)
        out.append({"env": key[0], "algo": key[1], "dataset": key[2],
                    "points": points, "spearman": rho})
    return out


def emit_report(records, out_dir, fmt="csv"):
    """Write the grid-surface table, per-record curves, correlation data and
    a structured summary; returns the list of files written."""
    if fmt != "csv":
        raise ConfigError(f"unsupported report format '{fmt}'")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    surface_path = os.path.join(out_dir, "grid_surface.csv")
    cells = {}
    for r in records:
        c = _cell(r)
        cells.setdefault((c["lr_index"], c["strength_index"]), []).append(r)
    with open(surface_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lr_index", "strength_index", "lr", "strength",
                    "mean_final_score", "std_final_score",
                    "mean_clamped_score", "n_runs"])
        for (il, ist) in sorted(cells):
            rs = cells[(il, ist)]
            scores = np.array([r.final_score for r in rs])
            c = _cell(rs[0])
            w.writerow([il, ist, repr(c["lr"]), repr(c["strength"]),
                        repr(float(scores.mean())), repr(float(scores.std())),
                        repr(float(np.mean([clamp_score(s) for s in scores]))),
                        len(rs)])
    written.append(surface_path)

    curves_path = os.path.join(out_dir, "curves.csv")
    with open(curves_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["record", "step", "mean_return", "mean_q"])
        for r in records:
            c = _cell(r)
            rid = record_name(c["algo"], c["lr_index"], c["strength_index"],
                              c["dataset_index"], c["seed_index"])
            for step, ret, q in zip(r.eval_steps, r.eval_returns, r.q_trace):
                w.writerow([rid, step, repr(ret), repr(q)])
    written.append(curves_path)

    corr_path = os.path.join(out_dir, "correlation.csv")
    corr = correlation_report(records) if records else []
    with open(corr_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["env", "algo", "dataset", "mean_last500_q", "final_score",
                    "spearman"])
        for group in corr:
            for q, score in group["points"]:
                w.writerow([group["env"], group["algo"], group["dataset"],
                            repr(q), repr(score),
                            "" if group["spearman"] is None
                            else repr(group["spearman"])])
    written.append(corr_path)

    summary_path = os.path.join(out_dir, "summary.json")
    summary = {"n_records": len(records)}
    if records:
        lr, strength = select_best(records)
        best_rs = [r for r in records
                   if _cell(r)["lr"] == lr and _cell(r)["strength"] == strength]
        scores = [r.final_score for r in best_rs]
        summary.update({
            "best_lr": lr,
            "best_strength": strength,
            "best_mean_final_score": float(np.mean(scores)),
            "best_std_final_score": float(np.std(scores)),
            "best_mean_clamped_score": float(
                np.mean([clamp_score(s) for s in scores])),
            "failures": int(sum(r.failed for r in records)),
        })
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    written.append(summary_path)
    return written
