"""Reproducible experiment driver.

Subcommands: gen-tasks, train, eval, oracle, selftest. Output lands under
$GOALSIFT_OUT_ROOT (default: current directory) joined with the config's
out_dir. Exit code 0 iff every seed completes.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import envs, evaluator, metrics, oracle, runner
from .config import ConfigError, RunConfig, load_config, save_config
from .envs import Family, Target
from .oracle import GREEDY_TO_TARGET, UNIFORM_RANDOM

OOD_DIFFICULTIES = (0.25, 0.35, 0.45, 0.55)


def _out_root(args) -> Path:
    return Path(os.environ.get("GOALSIFT_OUT_ROOT", "."))


def _run_dir(config: RunConfig, args) -> Path:
    d = _out_root(args) / config.out_dir / config.run_id
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_gen_tasks(args) -> int:
    config = load_config(args.config)
    out = _run_dir(config, args)
    for seed in config.seeds:
        task_dir = out / f"tasks-seed{seed}"
        task_dir.mkdir(exist_ok=True)
        for i, task in enumerate(runner.make_tasks(config, seed)):
            envs.save_task(task, task_dir / f"task{i:03d}.task")
        print(f"seed {seed}: {config.n_train_tasks} tasks -> {task_dir}")
    return 0


def _train_seed(payload):
    config, seed = payload
    art = runner.run_training(config, seed)
    return seed, art.rows, art.evaluator, art.tasks


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = _run_dir(config, args)
    save_config(config, out / "config.json")
    jobs = [(config, seed) for seed in config.seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_train_seed, jobs))
    else:
        results = [_train_seed(j) for j in jobs]
    all_rows = []
    for seed, rows, model, tasks in sorted(results, key=lambda r: r[0]):
        all_rows.extend(rows)
        suffix = "json" if model.backend == "tabular" else "npz"
        evaluator.save_model(model, out / f"evaluator-seed{seed}.{suffix}")
        task_dir = out / f"tasks-seed{seed}"
        task_dir.mkdir(exist_ok=True)
        for i, task in enumerate(tasks):
            envs.save_task(task, task_dir / f"task{i:03d}.task")
        print(f"seed {seed}: done ({len(rows)} metric rows)")
    metrics.write_rows(out / "metrics.csv", all_rows)
    print(f"metrics -> {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    out = _run_dir(config, args)
    model = evaluator.load_model(args.checkpoint)
    difficulties = [float(d) for d in args.difficulties.split(",")] if args.difficulties else list(OOD_DIFFICULTIES)
    agents_to_run = {
        "checkpoint": metrics.GoalPolicyAgent(model),
        "random": metrics.RandomAgent(),
        "optimal": metrics.SolvedAgent(gamma=config.gamma),
    }
    rows = []
    for name, agent in agents_to_run.items():
        res = metrics.ood_protocol(agent, Family(config.family), config.width, config.height,
                                   difficulties, args.n_per, args.seed,
                                   max_steps=config.max_episode_steps)
        for key, val in res.items():
            rows.append(metrics.MetricsRow(config.run_id, args.seed, 0, "ood_return",
                                           f"{name}:{key}", val))
    path = out / "ood.csv"
    metrics.write_rows(path, rows)
    print(f"ood -> {path}")
    return 0


def cmd_oracle(args) -> int:
    task = envs.load_task(args.task)
    parts = [int(v) for v in args.target.split(",")]
    if len(parts) not in (4, 5):
        raise SystemExit("--target must be x,y,has_sword,has_shield[,radius]")
    target = Target(tuple(parts[:4]), parts[4] if len(parts) == 5 else 0)
    policy = GREEDY_TO_TARGET if args.policy == "greedy_to_target" else UNIFORM_RANDOM
    table = oracle.distance_distribution(task, policy, target, args.support)
    oracle.table_to_csv(table, args.out)
    print(f"oracle table -> {args.out}")
    return 0


def cmd_selftest(args) -> int:
    ok = True
    rng = np.random.default_rng(0)

    # mixed-set feasibility reduction on both families
    failures = 0
    for k in range(20):
        family = Family.QUEST if k % 2 == 0 else Family.NAV
        task = envs.generate_task(family, 6, 6, 0.25, seed=100 + k)
        space = envs.state_space(task)
        src = int(rng.choice(space.nonterminal_indices()))
        members = []
        for _ in range(int(rng.integers(1, 5))):
            kind = int(rng.integers(3))
            if kind == 0:
                members.append(envs.target_of(space.states[int(rng.integers(space.n))]))
            elif kind == 1:
                members.append(Target((int(rng.integers(-2, 9)), int(rng.integers(-2, 9)), 1, 1)))
            else:
                members.append(Target((int(rng.integers(6)), int(rng.integers(6)), 0, 0)))
        if not oracle.theorem1_check(task, src, members, tau=int(rng.integers(1, 15))):
            failures += 1
    print(f"[{'PASS' if failures == 0 else 'FAIL'}] feasibility reduction (20 mixed sets)")
    ok &= failures == 0

    # backup shift branches on random histograms
    from .evaluator import delta_at_distance, delta_overflow, shift_hist
    bad = 0
    for _ in range(1000):
        h = rng.dirichlet(np.ones(16))
        shifted = shift_hist(h)
        if shifted[0] != 0.0 or abs(shifted.sum() - 1.0) > 1e-12:
            bad += 1
        if not np.array_equal(shifted[1:15], h[0:14]):
            bad += 1
        if shifted[15] != h[14] + h[15]:
            bad += 1
    print(f"[{'PASS' if bad == 0 else 'FAIL'}] backup shift exactness (1000 histograms)")
    ok &= bad == 0

    # normalization of oracle rows and model predictions
    task = envs.generate_task(Family.QUEST, 6, 6, 0.3, seed=3)
    space = envs.state_space(task)
    target = envs.target_of(space.states[5])
    table = oracle.distance_distribution(task, UNIFORM_RANDOM, target, 16)
    norm_ok = bool(np.allclose(table.probs.sum(axis=1), 1.0, atol=1e-12))
    model = evaluator.FeedforwardEvaluator(width=6, height=6, T=16, hidden=16, seed=0)
    h = model.predict(space.states[0], None, target)
    norm_ok &= abs(h.sum() - 1.0) < 1e-9 and h.min() >= 0
    tab = evaluator.TabularEvaluator(T=16)
    h = tab.predict(space.states[0], 1, target)
    norm_ok &= abs(h.sum() - 1.0) < 1e-9
    print(f"[{'PASS' if norm_ok else 'FAIL'}] histogram normalization")
    ok &= norm_ok

    print("selftest:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="goalsift", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-tasks", help="generate and save the training task sets")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_gen_tasks)

    p = sub.add_parser("train", help="run training for every configured seed")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="held-out difficulty-gradient evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--difficulties", default="")
    p.add_argument("--n-per", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle", help="dump an exact distance table as CSV")
    p.add_argument("--task", required=True)
    p.add_argument("--policy", choices=["uniform_random", "greedy_to_target"],
                   default="uniform_random")
    p.add_argument("--target", required=True)
    p.add_argument("--support", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("selftest", help="run the built-in invariant suites")
    p.set_defaults(fn=cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (envs.TaskFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
