"""Evaluation quantities computed against the oracle, and the CSV schema.

Distance errors compare the evaluator's expected clipped distance (overflow
valued at T) with the oracle's, bucketed by true distance for reachable
targets and pooled for invalid/blocked ones. All computations are pure
functions of logged artifacts, so recomputation is bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envs, oracle
from .envs import GridTask, InitMode, Target
from .evaluator import expected_clipped_distance
from .oracle import DistanceDistributionTable, PolicySpec, TargetCategory

# reachable-error buckets by true distance (upper edges, inclusive) at T=16
DISTANCE_BUCKETS = (("1-2", 2), ("3-4", 4), ("5-8", 8), ("9-15", 15))


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    seed: int
    step: int
    metric: str
    key: str
    value: float


def write_rows(path, rows) -> None:
    """Deterministic CSV export: sorted rows, 9 significant digits."""
    ordered = sorted(rows, key=lambda r: (r.run_id, r.seed, r.step, r.metric, r.key))
    lines = ["run_id,seed,step,metric,key,value"]
    for r in ordered:
        lines.append(f"{r.run_id},{r.seed},{r.step},{r.metric},{r.key},{r.value:.9g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def build_oracle_tables(task: GridTask, targets, policy: PolicySpec, T: int):
    """One exact table per distinct target, keyed for e_error lookups."""
    tables: dict[tuple, DistanceDistributionTable] = {}
    for t in targets:
        if t.key not in tables:
            tables[t.key] = oracle.distance_distribution(task, policy, t, T)
    return tables


def e_error(evaluator, oracle_tables, pairs, category: TargetCategory) -> dict[str, float]:
    """Mean |estimated - true| clipped distance, per bucket.

    Reachable pairs are bucketed by true distance; invalid and blocked pairs
    form a single bucket. Buckets with no pairs are missing from the result.
    """
    sums: dict[str, list[float]] = {}
    for source, target in pairs:
        table = oracle_tables[target.key] if isinstance(oracle_tables, dict) else oracle_tables(target)
        true_row = table.histogram(source)
        d_true = expected_clipped_distance(true_row)
        d_est = expected_clipped_distance(evaluator.predict(source, None, target))
        if category is TargetCategory.REACHABLE:
            bucket = None
            for name, hi in DISTANCE_BUCKETS:
                if d_true <= hi + 0.5:
                    bucket = name
                    break
            if bucket is None:
                continue  # beyond the finite supports
        else:
            bucket = "all"
        sums.setdefault(bucket, []).append(abs(d_est - d_true))
    return {bucket: float(np.mean(vals)) for bucket, vals in sums.items()}


def delusion_frequency(plan_log, task: GridTask) -> float:
    """Fraction of selections whose target the oracle calls infeasible."""
    if not plan_log:
        return 0.0
    bad = 0
    for source, target in plan_log:
        if oracle.categorize_target(task, source, target) is not TargetCategory.REACHABLE:
            bad += 1
    return bad / len(plan_log)


def q_error(qtable, oracle_q: np.ndarray, task: GridTask) -> float:
    """Mean absolute gap to the optimal values over non-terminal (s, a)."""
    space = envs.state_space(task)
    total, count = 0.0, 0
    for i in space.nonterminal_indices():
        est = qtable.q_values(task.task_id, space.states[int(i)].embedding)
        total += float(np.abs(est - oracle_q[int(i)]).sum())
        count += envs.N_ACTIONS
    return total / count


def run_episode(agent, task: GridTask, rng, max_steps: int = 128) -> float:
    """One evaluation episode from the fixed farthest spawn; returns the return."""
    state = envs.reset(task, InitMode.FIXED_FARTHEST)
    space = envs.state_space(task)
    total = 0.0
    for _ in range(max_steps):
        enc = space.encode(state)
        action = agent.act(task, enc, rng)
        state, r, done = envs.step(task, state, action)
        total += r
        if done:
            break
    return total


def ood_protocol(agent, family, width: int, height: int, difficulties, n_per: int,
                 seed: int, max_steps: int = 128) -> dict[str, float]:
    """Held-out evaluation over a gradient of difficulties, plus the pooled mean.

    Samples n_per fresh tasks per difficulty, one episode each from the
    fixed farthest spawn.
    """
    difficulties = list(difficulties)
    results: dict[str, float] = {}
    pooled: list[float] = []
    ss = np.random.SeedSequence(entropy=(seed, 0x00D))
    task_seeds = ss.generate_state(len(difficulties) * n_per + 1)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x00E)))
    k = 0
    for delta in difficulties:
        returns = []
        for _ in range(n_per):
            task = envs.generate_task(family, width, height, delta, int(task_seeds[k]),
                                      init_mode=InitMode.FIXED_FARTHEST)
            k += 1
            if hasattr(agent, "prepare"):
                agent.prepare(task)
            returns.append(run_episode(agent, task, rng, max_steps=max_steps))
        results[f"{delta:g}"] = float(np.mean(returns))
        pooled.extend(returns)
    results["pooled"] = float(np.mean(pooled))
    return results


class RandomAgent:
    def act(self, task, state, rng) -> int:
        return int(rng.integers(envs.N_ACTIONS))


class SolvedAgent:
    """Acts greedily on the task's exact optimal values (computed per task)."""

    def __init__(self, gamma: float = 0.99):
        self.gamma = gamma
        self._q: dict[str, np.ndarray] = {}

    def prepare(self, task: GridTask) -> None:
        if task.task_id not in self._q:
            self._q[task.task_id] = oracle.optimal_q(task, self.gamma)

    def act(self, task, state, rng) -> int:
        self.prepare(task)
        return int(np.argmax(self._q[task.task_id][state.index]))


class PolicyAgent:
    """Adapter for a QTable acting greedily during evaluation."""

    def __init__(self, qtable):
        self.qtable = qtable

    def act(self, task, state, rng) -> int:
        return self.qtable.greedy_action(task.task_id, state.embedding)


class GoalPolicyAgent:
    """Steers toward the task's success state using an evaluator's distances."""

    def __init__(self, evaluator_model):
        self.evaluator = evaluator_model

    def act(self, task, state, rng) -> int:
        from .agents import goal_policy_action

        gx, gy = task.success_pos
        return goal_policy_action(self.evaluator, state, Target((gx, gy, 1, 1)))
