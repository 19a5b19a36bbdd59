"""Command-line front end.

Verbs: ``train``, ``eval``, ``id-probe``, ``plan run``, ``plan emit``,
``config validate``. Every verb takes the same JSON plan config; exit code 0
means full success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .intrinsic_dim import collect_clean_features, collect_noise_features, estimate_id
from .models import load_params, save_params
from .plans import (
    FIGURES,
    ConfigError,
    build_dataset,
    build_trainer_config,
    emit_plot_data,
    run_plan,
    validate_config,
)
from .trainers import meta_test, metrics_to_csv, metrics_to_jsonl, train


def _load_plan(path: str):
    try:
        return validate_config(path)
    except ConfigError as e:
        for err in e.errors:
            print(f"config error: {err}", file=sys.stderr)
        return None


def cmd_config_validate(args) -> int:
    plan = _load_plan(args.config)
    if plan is None:
        return 1
    print(json.dumps(plan.plan, indent=2))
    return 0


def cmd_train(args) -> int:
    plan = _load_plan(args.config)
    if plan is None:
        return 1
    dataset = build_dataset(plan.plan["dataset"])
    seed = args.seed if args.seed is not None else int(plan.plan["seeds"][0])
    cfg = build_trainer_config(plan.plan, dataset, seed=seed)
    out = Path(args.out)
    params, records = train(cfg, dataset, out_dir=out)
    save_params(params, out / "final.params")
    metrics_to_csv(records, out / "metrics.csv")
    metrics_to_jsonl(records, out / "metrics.jsonl")
    print(f"trained {cfg.name} for {cfg.epochs} epochs; checkpoint at {out / 'final.params'}")
    return 0


def cmd_eval(args) -> int:
    plan = _load_plan(args.config)
    if plan is None:
        return 1
    dataset = build_dataset(plan.plan["dataset"])
    cfg = build_trainer_config(plan.plan, dataset, seed=int(plan.plan["seeds"][0]))
    params = load_params(args.checkpoint)
    episodes = args.episodes or plan.plan["trainer"]["eval_episodes"]
    rec = meta_test(
        cfg.model, params, dataset, cfg.task,
        inner_lr=cfg.inner_lr, inner_steps=cfg.inner_steps_test,
        attacks=cfg.eval_attacks, episodes=episodes,
        rng=np.random.default_rng(args.seed if args.seed is not None else 0),
        trainer_name=cfg.name, k_train=cfg.task.k_train, weight_ratio=cfg.weight_ratio,
    )
    print(json.dumps({
        "clean_acc": rec.clean_acc, "clean_ci": rec.clean_ci,
        "robust_acc": rec.robust_acc, "robust_ci": rec.robust_ci,
        "episodes": episodes,
    }, indent=2))
    return 0


def cmd_id_probe(args) -> int:
    plan = _load_plan(args.config)
    if plan is None:
        return 1
    dataset = build_dataset(plan.plan["dataset"])
    cfg = build_trainer_config(plan.plan, dataset, seed=int(plan.plan["seeds"][0]))
    params = load_params(args.checkpoint)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    clean = estimate_id(
        collect_clean_features(cfg.model, params, dataset, args.samples, rng), args.target
    )
    noise = estimate_id(
        collect_noise_features(cfg.model, params, dataset, cfg.attack, args.samples, rng,
                               space=args.space),
        args.target,
    )
    print(json.dumps({
        "target": args.target,
        "clean": {"d_hat": clean.d_hat, "degenerate": clean.degenerate},
        "noise": {"d_hat": noise.d_hat, "degenerate": noise.degenerate, "space": args.space},
    }, indent=2))
    return 0


def cmd_plan_run(args) -> int:
    plan = _load_plan(args.config)
    if plan is None:
        return 1
    stats = run_plan(
        plan, workers=args.workers,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    print(json.dumps(stats, indent=2))
    return 1 if stats["errors"] else 0


def cmd_plan_emit(args) -> int:
    try:
        path = emit_plot_data(args.dir, args.figure)
    except (ValueError, FileNotFoundError) as e:
        print(f"emit error: {e}", file=sys.stderr)
        return 1
    print(str(path))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metarobust",
        description="Robust meta-learning laboratory: training, attacks, "
                    "intrinsic-dimension probes, and experiment sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training from a plan config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="meta-test a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("id-probe", help="intrinsic dimension of a checkpoint's features")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", type=float, default=0.9)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--space", choices=("feature", "input"), default="feature")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_id_probe)

    plan = sub.add_parser("plan", help="experiment sweeps")
    plan_sub = plan.add_subparsers(dest="plan_command", required=True)

    p = plan_sub.add_parser("run", help="execute every pending plan cell")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_plan_run)

    p = plan_sub.add_parser("emit", help="write tidy plot data from a finished plan")
    p.add_argument("--dir", required=True)
    p.add_argument("--figure", required=True, choices=FIGURES)
    p.set_defaults(fn=cmd_plan_emit)

    p = sub.add_parser("config", help="configuration tools")
    cfg_sub = p.add_subparsers(dest="config_command", required=True)
    v = cfg_sub.add_parser("validate", help="normalize and echo a plan config")
    v.add_argument("--config", required=True)
    v.set_defaults(fn=cmd_config_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
