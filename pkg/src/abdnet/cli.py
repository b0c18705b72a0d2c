"""Command-line entry point.

Subcommands: dyncheck, train-policy, train-dynamics, eval-shift, flops,
ablate. Every run that writes files records a manifest first, so any run can
be reproduced from its manifest alone. Exit codes: 0 success, 2 data/parse
error, 64 usage or config error, 70 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .actors import ACTOR_KINDS, flops_count, instrumented_flops
from .dynamics import (
    DynamicsError,
    JointState,
    aba_forward_dynamics,
    crba_oracle_dynamics,
)
from .envs import load_env_spec, rollout_dataset
from .learn import (
    NaNLossError,
    TrainConfig,
    ablation_suite,
    eval_retention,
    ppo_train,
    regress_dynamics,
)
from .morphology import MorphologyError, load_tree, tree_hash

EXIT_OK = 0
EXIT_DATA = 2
EXIT_USAGE = 64
EXIT_NUMERIC = 70


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_manifest(out_dir: str, command: str, config: dict, seed: int,
                    morphology_hash: str | None, extra: dict | None = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "morphology_hash": morphology_hash,
        "out_dir": out_dir,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifact_version": __version__,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _load_config_sources(args) -> dict:
    """defaults < --config file < --from-manifest < explicit CLI overrides."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(json.load(open(args.config)))
    if getattr(args, "from_manifest", None):
        merged.update(json.load(open(args.from_manifest))["config"])
    return merged


def _train_config(args, extra_overrides: dict | None = None) -> TrainConfig:
    merged = _load_config_sources(args)
    for key in ("seed", "steps", "n_envs", "d", "lambda_orth"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            merged["total_steps" if key == "steps" else key] = val
    if extra_overrides:
        merged.update(extra_overrides)
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(merged) - known
    if unknown:
        raise UsageError(f"unknown config fields: {sorted(unknown)}")
    return TrainConfig(**merged)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_dyncheck(args) -> int:
    if args.n_random < 1:
        raise UsageError("--n-random must be >= 1")
    tree = load_tree(args.tree)
    rng = np.random.default_rng(args.seed)
    worst, worst_state = 0.0, None
    for _ in range(args.n_random):
        q = rng.uniform(-np.pi, np.pi, tree.n_dof)
        qd = rng.normal(size=tree.n_dof)
        tau = rng.normal(size=tree.n_dof) * 3.0
        state = JointState(q, qd)
        dev = float(np.max(np.abs(
            aba_forward_dynamics(tree, state, tau) - crba_oracle_dynamics(tree, state, tau)
        ))) if tree.n_dof else 0.0
        if dev > worst:
            worst, worst_state = dev, (q.tolist(), qd.tolist(), tau.tolist())
    ok = worst <= args.tol
    print(f"dyncheck: {args.n_random} random states, max |qdd_aba - qdd_oracle| = {worst:.3e} "
          f"(tol {args.tol:.1e}) -> {'OK' if ok else 'FAIL'}")
    if worst_state is not None and not ok:
        print(f"worst case: q={worst_state[0]} qd={worst_state[1]} tau={worst_state[2]}")
    if args.out:
        _write_manifest(args.out, "dyncheck",
                        {"tree": args.tree, "n_random": args.n_random, "tol": args.tol},
                        args.seed, tree_hash(tree))
        with open(os.path.join(args.out, "dyncheck.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["n_random", "tol", "max_deviation", "ok"])
            w.writerow([args.n_random, args.tol, repr(worst), int(ok)])
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_train_policy(args) -> int:
    spec = load_env_spec(args.env)
    config = _train_config(args)
    _write_manifest(args.out, "train-policy", config.as_dict(), config.seed,
                    tree_hash(spec.tree), extra={"env": args.env, "actor": args.actor})
    result = ppo_train(args.actor, spec, config, out_dir=args.out)
    last = result.metrics[-1] if result.metrics else {}
    print(f"train-policy done: {last.get('env_steps', 0)} steps, "
          f"mean return {last.get('mean_return', float('nan')):.2f}, "
          f"{len(result.checkpoints)} checkpoints in {args.out}")
    return EXIT_OK


def cmd_train_dynamics(args) -> int:
    spec = load_env_spec(args.env)
    config = _train_config(args)
    _write_manifest(args.out, "train-dynamics", config.as_dict(), config.seed,
                    tree_hash(spec.tree),
                    extra={"env": args.env, "model": args.model,
                           "dataset_steps": args.dataset_steps})
    rng = np.random.default_rng(config.seed)
    limit = spec.torque_limit

    def random_policy(obs):
        return rng.uniform(-limit, limit)

    dataset = rollout_dataset(spec, random_policy, args.dataset_steps, seed=config.seed)
    result = regress_dynamics(args.model, spec, dataset, config)
    with open(os.path.join(args.out, "regress_metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_mse"])
        for e, v in enumerate(result.train_losses):
            w.writerow([e, repr(v)])
    summary = {"model": args.model, "val_mse": result.val_mse,
               "rollout_mse": {str(k): v for k, v in result.rollout_mse.items()},
               "n_params": result.n_params}
    with open(os.path.join(args.out, "result.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    np.savez(os.path.join(args.out, "model.npz"),
             **{n: t.data for n, t in result.model.tensors.items()})
    print(f"train-dynamics done: val MSE {result.val_mse:.3e}, "
          f"rollout {result.rollout_mse}")
    return EXIT_OK


def cmd_eval_shift(args) -> int:
    spec = load_env_spec(args.env)
    factors = [float(v) for v in args.factors.split(",") if v]
    if not factors:
        raise UsageError("--factors needs at least one value")
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    if args.out:
        _write_manifest(args.out, "eval-shift",
                        {"env": args.env, "ckpt": args.ckpt, "factors": factors,
                         "episodes": args.episodes, "link": args.link},
                        args.seed, tree_hash(spec.tree))
    report = eval_retention(args.ckpt, spec, factors, args.episodes,
                            seed=args.seed, link_name=args.link)
    flag = "" if report.converged else "  [N/C: nominal below 2x random baseline]"
    print(f"nominal return {report.nominal_return:.3f} "
          f"(95% CI {report.nominal_ci[0]:.3f}..{report.nominal_ci[1]:.3f}), "
          f"scaled link '{report.link_name}'{flag}")
    for f_ in factors:
        lo, hi = report.shifted_ci[f_]
        print(f"factor {f_}: return {report.shifted_return[f_]:.3f} "
              f"(95% CI {lo:.3f}..{hi:.3f}), retention {report.retention_pct[f_]:.1f}%")
    if args.out:
        with open(os.path.join(args.out, "retention.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["factor", "mean_return", "ci_lo", "ci_hi", "retention_pct",
                        "n_episodes", "converged"])
            w.writerow([1.0, repr(report.nominal_return), repr(report.nominal_ci[0]),
                        repr(report.nominal_ci[1]), repr(100.0), report.n_episodes,
                        int(report.converged)])
            for f_ in factors:
                w.writerow([f_, repr(report.shifted_return[f_]),
                            repr(report.shifted_ci[f_][0]), repr(report.shifted_ci[f_][1]),
                            repr(report.retention_pct[f_]), report.n_episodes,
                            int(report.converged)])
    return EXIT_OK


def cmd_flops(args) -> int:
    tree = load_tree(args.tree)
    obs_dim = args.obs_dim if args.obs_dim is not None else 2 * tree.n_dof
    analytic = flops_count(args.actor, tree, args.d, obs_dim)
    for stage, count in analytic.items():
        print(f"{stage}: {count}")
    if args.check:
        measured = instrumented_flops(args.actor, tree, args.d, obs_dim)
        match = analytic == measured
        print(f"instrumented check: {'MATCH' if match else f'MISMATCH {measured}'}")
        return EXIT_OK if match else EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = load_env_spec(args.env)
    config = _train_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s)
    variants = tuple(args.variants.split(",")) if args.variants else None
    factors = tuple(float(v) for v in args.factors.split(",")) if args.factors else ()
    for v in variants or ():
        if v not in ACTOR_KINDS:
            raise UsageError(f"unknown variant '{v}' (choose from {ACTOR_KINDS})")
    _write_manifest(args.out, "ablate", config.as_dict(), config.seed,
                    tree_hash(spec.tree),
                    extra={"env": args.env, "seeds": list(seeds),
                           "variants": list(variants) if variants else list(ACTOR_KINDS),
                           "factors": list(factors)})
    rows = ablation_suite(spec, config, variants=variants or ACTOR_KINDS,
                          seeds=seeds, factors=factors, out_dir=args.out)
    print(f"ablation complete: {len(rows)} rows in {os.path.join(args.out, 'ablation.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="abdnet", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dyncheck", help="verify forward dynamics against the dense oracle")
    d.add_argument("--tree", required=True)
    d.add_argument("--n-random", type=int, default=200)
    d.add_argument("--tol", type=float, default=1e-8)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_dyncheck)

    def add_train_common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--from-manifest", default=None,
                        help="re-run with a previous run's resolved config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--steps", type=int, default=None, help="total env steps")
        sp.add_argument("--n-envs", type=int, default=None, dest="n_envs")
        sp.add_argument("--d", type=int, default=None, help="actor hidden width")
        sp.add_argument("--lambda-orth", type=float, default=None, dest="lambda_orth")
        sp.add_argument("--workers", type=int, default=1,
                        help="parallelism cap (desk scale runs single-process)")

    t = sub.add_parser("train-policy", help="PPO training")
    t.add_argument("--env", required=True)
    t.add_argument("--actor", required=True, choices=ACTOR_KINDS)
    t.add_argument("--out", required=True)
    add_train_common(t)
    t.set_defaults(func=cmd_train_policy)

    td = sub.add_parser("train-dynamics", help="next-state model regression")
    td.add_argument("--env", required=True)
    td.add_argument("--model", required=True, choices=("abdnet", "mlp"))
    td.add_argument("--out", required=True)
    td.add_argument("--dataset-steps", type=int, default=15_000)
    add_train_common(td)
    td.set_defaults(func=cmd_train_dynamics)

    e = sub.add_parser("eval-shift", help="mass-shift retention evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--factors", default="1.5,2.0")
    e.add_argument("--episodes", type=int, default=500)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--link", default=None, help="link to scale (default: heaviest)")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval_shift)

    f = sub.add_parser("flops", help="forward-pass multiply-add accounting")
    f.add_argument("--tree", required=True)
    f.add_argument("--actor", required=True, choices=ACTOR_KINDS)
    f.add_argument("--d", type=int, required=True)
    f.add_argument("--obs-dim", type=int, default=None)
    f.add_argument("--check", action="store_true",
                   help="also run the instrumented counter and compare")
    f.set_defaults(func=cmd_flops)

    a = sub.add_parser("ablate", help="train variant grid with matched budgets")
    a.add_argument("--env", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--variants", default=None)
    a.add_argument("--factors", default=None)
    add_train_common(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    if os.environ.get("ABD_DETERMINISTIC") == "1":
        pass  # TrainConfig picks this up; kept as the documented switch
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MorphologyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DynamicsError, NaNLossError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
