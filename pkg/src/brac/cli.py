"""Command-line entry point.

Subcommands cover the whole workflow: produce a reference policy, collect
datasets, clone the behavior policy, train a single run, sweep a grid,
evaluate checkpoints, render reports, and run the oracle check suites.

Environment overrides: BRAC_SEED replaces any --seed value and BRAC_OUT
replaces any --out path. A JSON config file mirroring TrainerConfig can seed
`train` and `grid`; explicit flags win over the file.
"""

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import checkpoints, data
from .checks import SUITES
from .data import NoiseConfig
from .envs import make_env
from .errors import ConfigError
from .harness import (EvalProtocol, GridSpec, bc_record, clamp_score,
                      emit_report, evaluate, run_grid, select_best)
from .policies import CloneConfig, clone_behavior
from .reference import train_reference_policy
from .trainer import (ALGORITHMS, BcqConfig, RunRecord, TrainerConfig,
                      config_for_algo, train_offline)


def _env_seed(value):
    return int(os.environ.get("BRAC_SEED", value))


def _env_out(value):
    return os.environ.get("BRAC_OUT", value)


def _load_config_file(path):
    with open(path) as f:
        return json.load(f)


def cmd_reference(args):
    result = train_reference_policy(args.env, seed=_env_seed(args.seed),
                                    max_steps=args.max_steps, verbose=True)
    checkpoints.save_policy(result.policy, _env_out(args.out))
    print(f"reference policy for {args.env}: score {result.score:.1f} "
          f"(band {result.target_band[0]:.1f} .. {result.target_band[1]:.1f}), "
          f"stopped at step {result.stop_step}, saved to {_env_out(args.out)}")
    return 0


def cmd_collect(args):
    env = make_env(args.env)
    policy = checkpoints.load_policy(args.policy)
    noise = NoiseConfig.parse(args.noise)
    rng = np.random.default_rng(_env_seed(args.seed))
    ds = data.collect(env, policy, noise, args.n, rng)
    data.save(ds, _env_out(args.out))
    print(f"collected {ds.count} transitions ({ds.noise_tag}) from {args.env} "
          f"-> {_env_out(args.out)}; average episode return "
          f"{ds.average_episode_return():.2f}")
    return 0


def cmd_clone(args):
    ds = data.load(args.data)
    cfg = CloneConfig(steps=args.steps, batch_size=args.batch_size,
                      learning_rate=args.lr)
    rng = np.random.default_rng(_env_seed(args.seed))
    policy, ll = clone_behavior(ds, cfg, rng, hidden=tuple(args.hidden))
    checkpoints.save_policy(policy, _env_out(args.out))
    print(f"cloned {ds.env_name}/{ds.noise_tag}: final mean log-likelihood "
          f"{ll:.4f} -> {_env_out(args.out)}")
    return 0


def _build_train_config(args):
    merged = config_for_algo(args.algo).to_dict()
    if args.config:
        file_cfg = _load_config_file(args.config)
        file_cfg.pop("grid_cell", None)
        merged.update(file_cfg)
    merged["seed"] = _env_seed(args.seed)
    if args.steps is not None:
        merged["total_steps"] = args.steps
    if args.policy_lr is not None:
        merged["policy_lr"] = args.policy_lr
    if args.alpha is not None:
        merged["alpha"] = args.alpha
    if args.epsilon is not None:
        merged["epsilon"] = args.epsilon
        merged["alpha_mode"] = "adaptive"
    if args.algo == "bcq" and args.phi is not None:
        bcq = merged.get("bcq") or BcqConfig().__dict__.copy()
        bcq = dict(bcq)
        bcq["phi"] = args.phi
        merged["bcq"] = bcq
    return TrainerConfig.from_dict(merged)


def cmd_train(args):
    ds = data.load(args.data)
    env = make_env(ds.env_name)
    protocol = EvalProtocol(episodes_per_eval=args.episodes)
    out = _env_out(args.out)
    behavior = checkpoints.load_policy(args.behavior) if args.behavior else None

    if args.algo == "bc":
        if behavior is None:
            raise ConfigError("algo bc needs --behavior")
        record = bc_record(behavior, env, protocol, _env_seed(args.seed))
    else:
        cfg = _build_train_config(args)
        record = train_offline(cfg, ds, behavior, env, protocol)
    record.save(out)
    status = "FAILED (overflow)" if record.failed else "ok"
    print(f"{args.algo} on {ds.env_name}/{ds.noise_tag}: final score "
          f"{record.final_score:.2f} (reported {clamp_score(record.final_score):.2f}), "
          f"{status} -> {out}")
    return 0


def cmd_grid(args):
    dataset_paths = sorted(glob.glob(os.path.join(args.datasets, "*.bin")))
    if not dataset_paths:
        raise ConfigError(f"no .bin datasets under {args.datasets}")
    merged = config_for_algo(args.algo).to_dict()
    if args.config:
        file_cfg = _load_config_file(args.config)
        file_cfg.pop("grid_cell", None)
        merged.update(file_cfg)
    if args.steps is not None:
        merged["total_steps"] = args.steps
    base_cfg = TrainerConfig.from_dict(merged)
    grid_kw = {"n_seeds": args.seeds}
    if args.lrs:
        grid_kw["policy_lrs"] = tuple(float(v) for v in args.lrs.split(","))
    if args.strengths:
        grid_kw["strengths"] = tuple(float(v) for v in args.strengths.split(","))
    grid = GridSpec.for_algo(args.algo, **grid_kw)
    out = _env_out(args.out)
    records = run_grid(grid, base_cfg, dataset_paths, args.env, out,
                       algo=args.algo, parallelism=args.parallel,
                       base_seed=_env_seed(args.base_seed))
    lr, strength = select_best(records, grid, n_datasets=len(dataset_paths))
    print(f"grid complete: {len(records)} records in {out}; "
          f"best cell lr={lr:g} strength={strength:g}")
    return 0


def cmd_eval(args):
    env = make_env(args.env)
    policy = checkpoints.load_policy(args.policy)
    ens = checkpoints.load_ensemble(args.critic) if args.critic else None
    protocol = EvalProtocol(episodes_per_eval=args.episodes)
    rng = np.random.default_rng(_env_seed(args.seed))
    score = evaluate(policy, ens, env, protocol, rng)
    print(f"mean return over {args.episodes} episodes: {score:.2f} "
          f"(reported {clamp_score(score):.2f})")
    return 0


def cmd_report(args):
    paths = sorted(glob.glob(os.path.join(args.runs, "*.json")))
    paths = [p for p in paths if not p.endswith("summary.json")]
    records = [RunRecord.load(p) for p in paths]
    out = _env_out(args.out or args.runs)
    written = emit_report(records, out, fmt=args.format)
    print(f"report over {len(records)} records:")
    for path in written:
        print(f"  {path}")
    return 0


def cmd_check(args):
    suites = args.suite.split(",") if args.suite != "all" else list(SUITES)
    ok = True
    for name in suites:
        if name not in SUITES:
            raise ConfigError(f"unknown suite '{name}' (have {sorted(SUITES)})")
        ok = SUITES[name]() and ok
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(
        prog="brac",
        description="Offline actor-critic laboratory with pluggable "
                    "behavior regularizers.",
        epilog="BRAC_SEED and BRAC_OUT environment variables override any "
               "--seed / --out flag.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("reference", help="train a partially-trained policy")
    s.add_argument("--env", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--max-steps", type=int, default=60_000)
    s.set_defaults(fn=cmd_reference)

    s = sub.add_parser("collect", help="roll a dataset from a policy checkpoint")
    s.add_argument("--env", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--noise", default="none", help="none | eps:P | gauss:S")
    s.add_argument("--n", type=int, default=50_000)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_collect)

    s = sub.add_parser("clone", help="max-likelihood behavior cloning")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=CloneConfig().steps)
    s.add_argument("--batch-size", type=int, default=CloneConfig().batch_size)
    s.add_argument("--lr", type=float, default=CloneConfig().learning_rate)
    s.add_argument("--hidden", type=int, nargs="+", default=[200, 200])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_clone)

    s = sub.add_parser("train", help="one offline training run")
    s.add_argument("--algo", required=True, choices=ALGORITHMS)
    s.add_argument("--data", required=True)
    s.add_argument("--behavior", help="cloned policy checkpoint")
    s.add_argument("--alpha", type=float)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--phi", type=float)
    s.add_argument("--policy-lr", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--episodes", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="JSON file mirroring TrainerConfig")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("grid", help="learning-rate x strength sweep")
    s.add_argument("--algo", required=True, choices=ALGORITHMS)
    s.add_argument("--env", required=True)
    s.add_argument("--datasets", required=True, help="directory of .bin files")
    s.add_argument("--out", required=True)
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--steps", type=int)
    s.add_argument("--lrs", help="comma-separated learning rates")
    s.add_argument("--strengths", help="comma-separated strengths")
    s.add_argument("--base-seed", type=int, default=0)
    s.add_argument("--config", help="JSON file mirroring TrainerConfig")
    s.set_defaults(fn=cmd_grid)

    s = sub.add_parser("eval", help="score a policy checkpoint")
    s.add_argument("--policy", required=True)
    s.add_argument("--critic")
    s.add_argument("--env", required=True)
    s.add_argument("--episodes", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("report", help="aggregate run records into tables")
    s.add_argument("--runs", required=True)
    s.add_argument("--format", default="csv")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("check", help="run oracle suites")
    s.add_argument("--suite", default="all",
                   help="comma-separated: grad,divergence,combiner,sac-equiv")
    s.set_defaults(fn=cmd_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
