"""Exact dynamic-programming ground truth for distances, feasibility and values.

The central object is the first-hit-time distribution of a target's state
set: per source state, the probability that a policy first arrives at a
matching state after exactly t steps, for t in {1..T-1}, with the leftover
mass in an overflow bin that conflates "later than T-1" with "never".
Histograms here are the reference the learned evaluator is tested against.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .envs import (
    ACTION_DELTAS,
    N_ACTIONS,
    GridTask,
    StateEncoding,
    StateSpace,
    Target,
    state_space,
)


class TargetCategory(str, enum.Enum):
    REACHABLE = "reachable"  # some member state is reachable from the source
    INVALID = "invalid"      # no enumerated state satisfies the indicator
    BLOCKED = "blocked"      # valid member states exist but none is reachable


@dataclass(frozen=True)
class PolicySpec:
    """Policy the ground truth conditions on; table rows are per-state action probs."""

    kind: str = "uniform_random"  # uniform_random | greedy_to_target | table
    table: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("uniform_random", "greedy_to_target", "table"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "table":
            if self.table is None:
                raise ValueError("table policy needs a table")
            if not np.allclose(self.table.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError("per-state action distributions must sum to 1")

    @property
    def tag(self) -> str:
        return self.kind


UNIFORM_RANDOM = PolicySpec("uniform_random")
GREEDY_TO_TARGET = PolicySpec("greedy_to_target")


@dataclass
class DistanceDistributionTable:
    """Per-state first-hit histograms over supports {1..T-1, overflow}."""

    task_id: str
    target: Target
    policy_tag: str
    T: int
    probs: np.ndarray  # (n_states, T); column t holds p(D = t+1), last column overflow

    def histogram(self, state) -> np.ndarray:
        return self.probs[_state_index(state)]


def _state_index(state) -> int:
    if isinstance(state, (int, np.integer)):
        return int(state)
    return state.index


def member_mask(space: StateSpace, target: Target) -> np.ndarray:
    """Boolean mask of enumerated states satisfying the target's indicator."""
    embs = space.embeddings
    tx, ty, tsw, tsh = target.embedding
    flags_ok = (embs[:, 2] == tsw) & (embs[:, 3] == tsh)
    if target.radius == 0:
        return flags_ok & (embs[:, 0] == tx) & (embs[:, 1] == ty)
    manhattan = np.abs(embs[:, 0] - tx) + np.abs(embs[:, 1] - ty)
    return flags_ok & (manhattan <= 1)


def _matched_matrix(space: StateSpace, targets: list[Target]) -> np.ndarray:
    """matched[s, a]: the arrival of action a from s satisfies any target."""
    hit = np.zeros(space.n, dtype=bool)
    for t in targets:
        hit |= member_mask(space, t)
    return hit[space.succ_idx]


def policy_matrix(task: GridTask, policy: PolicySpec, target: Target | None = None) -> np.ndarray:
    space = state_space(task)
    if policy.kind == "uniform_random":
        return np.full((space.n, N_ACTIONS), 1.0 / N_ACTIONS)
    if policy.kind == "table":
        if policy.table.shape != (space.n, N_ACTIONS):
            raise ValueError(f"policy table shape {policy.table.shape} != {(space.n, N_ACTIONS)}")
        return policy.table
    if target is None:
        raise ValueError("greedy_to_target needs a target")
    return _greedy_matrix(space, [target])


def _greedy_matrix(space: StateSpace, targets: list[Target]) -> np.ndarray:
    """One-hot shortest-path policy toward the targets' hit set, ties by action index."""
    matched = _matched_matrix(space, targets)
    dist = _first_hit_steps(space, matched)
    pi = np.zeros((space.n, N_ACTIONS))
    for s in range(space.n):
        if space.terminal[s]:
            pi[s, 0] = 1.0
            continue
        best_a, best_c = 0, np.inf
        for a in range(N_ACTIONS):
            if matched[s, a]:
                c = 1.0
            elif space.step_terminal[s, a]:
                c = np.inf
            else:
                c = 1.0 + dist[space.succ_idx[s, a]]
            if c < best_c:
                best_a, best_c = a, c
        pi[s, best_a] = 1.0
    return pi


def _first_hit_steps(space: StateSpace, matched: np.ndarray) -> np.ndarray:
    """BFS steps from each state to its first matching arrival (inf if never)."""
    dist = np.full(space.n, np.inf)
    frontier = []
    for s in range(space.n):
        if not space.terminal[s] and matched[s].any():
            dist[s] = 1.0
            frontier.append(s)
    preds: list[list[int]] = [[] for _ in range(space.n)]
    for s in range(space.n):
        if space.terminal[s]:
            continue
        for a in range(N_ACTIONS):
            if not matched[s, a] and not space.step_terminal[s, a]:
                preds[int(space.succ_idx[s, a])].append(s)
    while frontier:
        nxt = []
        for j in frontier:
            for p in preds[j]:
                if dist[p] == np.inf:
                    dist[p] = dist[j] + 1
                    nxt.append(p)
        frontier = nxt
    return dist


def _first_hit_table(
    succ_idx: np.ndarray,
    matched: np.ndarray,
    step_terminal: np.ndarray,
    source_terminal: np.ndarray,
    pi: np.ndarray,
    T: int,
) -> np.ndarray:
    """First-hit-time distribution by T-1 backward sweeps over arrival branches.

    Arrival order of precedence per step: a matching arrival contributes at
    that step, a terminal non-matching arrival sends everything to overflow,
    otherwise the successor's distribution shifts by one step.
    """
    n = succ_idx.shape[0]
    probs = np.zeros((n, T))
    live = (~matched) & (~step_terminal)
    weights = pi * live
    r_prev = (pi * matched).sum(axis=1)
    r_prev[source_terminal] = 0.0
    probs[:, 0] = r_prev
    for t in range(1, T - 1):
        r_t = np.zeros(n)
        for a in range(N_ACTIONS):
            r_t += weights[:, a] * r_prev[succ_idx[:, a]]
        r_t[source_terminal] = 0.0
        probs[:, t] = r_t
        r_prev = r_t
    probs[:, T - 1] = 1.0 - probs[:, : T - 1].sum(axis=1)
    return probs


def distance_distribution(
    task: GridTask,
    policy: PolicySpec,
    target: Target | list[Target],
    T: int,
) -> DistanceDistributionTable:
    """Exact per-state distribution of the first arrival time at the target set."""
    if T < 2:
        raise ValueError("T must be >= 2")
    targets = target if isinstance(target, list) else [target]
    space = state_space(task)
    matched = _matched_matrix(space, targets)
    if policy.kind == "greedy_to_target":
        pi = _greedy_matrix(space, targets)
    else:
        pi = policy_matrix(task, policy)
    probs = _first_hit_table(space.succ_idx, matched, space.step_terminal, space.terminal, pi, T)
    return DistanceDistributionTable(
        task_id=task.task_id,
        target=targets[0] if len(targets) == 1 else Target((-1, -1, 0, 0)),
        policy_tag=policy.tag,
        T=T,
        probs=probs,
    )


def tau_feasibility_exact(table: DistanceDistributionTable, state, tau: int) -> float:
    if not 1 <= tau <= table.T - 1:
        raise ValueError(f"tau must be in [1, {table.T - 1}]")
    return float(table.probs[_state_index(state), :tau].sum())


@lru_cache(maxsize=100_000)
def _reachable_arrivals_cached(task: GridTask, source_index: int) -> frozenset[int]:
    space = state_space(task)
    visited = {source_index}
    arrivals: set[int] = set()
    stack = [source_index]
    while stack:
        x = stack.pop()
        if space.terminal[x]:
            continue
        for a in range(N_ACTIONS):
            j = int(space.succ_idx[x, a])
            arrivals.add(j)
            if not space.step_terminal[x, a] and j not in visited:
                visited.add(j)
                stack.append(j)
    return frozenset(arrivals)


def reachable_arrivals(task: GridTask, source) -> frozenset[int]:
    """States arrivable in >= 1 steps from the source under some action sequence.

    A lava death arrives "at" the pre-move state, so that state's embedding
    counts as hit; this is the all-policies reachability the categorization
    quantifies over.
    """
    return _reachable_arrivals_cached(task, _state_index(source))


def categorize_target(task: GridTask, source, target: Target) -> TargetCategory:
    space = state_space(task)
    members = member_mask(space, target)
    if not members.any():
        return TargetCategory.INVALID
    arrivals = reachable_arrivals(task, source)
    member_ids = np.flatnonzero(members)
    if any(int(m) in arrivals for m in member_ids):
        return TargetCategory.REACHABLE
    return TargetCategory.BLOCKED


def optimal_q(task: GridTask, gamma: float, tol: float = 1e-10) -> np.ndarray:
    """Value-iteration fixed point; rows for terminal states are zero."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    space = state_space(task)
    q = np.zeros((space.n, N_ACTIONS))
    live = ~space.step_terminal
    nonterm = ~space.terminal
    for _ in range(space.n * 4 + 64):
        v = q.max(axis=1)
        q_new = space.reward + gamma * live * v[space.succ_idx]
        q_new[space.terminal] = 0.0
        delta = np.abs(q_new - q).max()
        q = q_new
        if delta <= tol:
            break
    q[~nonterm] = 0.0
    return q


def feasible_set_reachable(task: GridTask, source, targets: list[Target]) -> bool:
    """Whether any member of the combined target set is reachable from source."""
    space = state_space(task)
    hit = np.zeros(space.n, dtype=bool)
    for t in targets:
        hit |= member_mask(space, t)
    if not hit.any():
        return False
    arrivals = reachable_arrivals(task, source)
    return any(int(m) in arrivals for m in np.flatnonzero(hit))


def theorem1_check(
    task: GridTask,
    source,
    mixed_target_set: list[Target],
    tau: int,
    policy: PolicySpec = UNIFORM_RANDOM,
    T: int = 16,
) -> bool:
    """Feasibility of a mixed set equals that of the set minus infeasible members.

    Checked both under all-actions reachability and under the supplied
    policy's first-hit distribution (exact equality).
    """
    kept = [
        t for t in mixed_target_set
        if categorize_target(task, source, t) is TargetCategory.REACHABLE
    ]
    src = _state_index(source)
    reach_full = feasible_set_reachable(task, source, mixed_target_set)
    reach_kept = feasible_set_reachable(task, source, kept) if kept else False
    if reach_full != reach_kept:
        return False
    full = distance_distribution(task, policy, mixed_target_set, T)
    p_full = tau_feasibility_exact(full, src, tau)
    if kept:
        pruned = distance_distribution(task, policy, kept, T)
        p_kept = tau_feasibility_exact(pruned, src, tau)
    else:
        p_kept = 0.0
    return p_full == p_kept


class OracleEvaluator:
    """Evaluator-shaped adapter over exact tables (oracle-substituted runs).

    Action-conditioned queries expand one arrival step exactly; sources that
    are not enumerated states (hallucinated plan vertices) answer overflow.
    """

    def __init__(self, task: GridTask, T: int = 16, policy: PolicySpec = GREEDY_TO_TARGET):
        self.task = task
        self.space = state_space(task)
        self.T = T
        self.policy = policy
        self._tables: dict[tuple, np.ndarray] = {}

    def _probs(self, target: Target) -> np.ndarray:
        probs = self._tables.get(target.key)
        if probs is None:
            probs = distance_distribution(self.task, self.policy, target, self.T).probs
            self._tables[target.key] = probs
        return probs

    def predict(self, state, action, target: Target) -> np.ndarray:
        from .evaluator import delta_at_distance, delta_overflow, shift_hist

        probs = self._probs(target)
        emb = state.embedding if hasattr(state, "embedding") else tuple(state)
        idx = self.space.index_by_emb.get(tuple(emb))
        if idx is None:
            return delta_overflow(self.T)
        if action is None:
            return probs[idx].copy()
        if self.space.terminal[idx]:
            return delta_overflow(self.T)
        succ = int(self.space.succ_idx[idx, action])
        members = member_mask(self.space, target)
        if members[succ]:
            return delta_at_distance(self.T, 1)
        if self.space.step_terminal[idx, action]:
            return delta_overflow(self.T)
        return shift_hist(probs[succ])


def table_to_csv(table: DistanceDistributionTable, path) -> None:
    """Debug export: one row per state with all bins at 9 significant digits."""
    header = "state_index,target_key," + ",".join(f"bin_{t}" for t in range(1, table.T + 1))
    key = "r".join(str(k) for k in table.target.key)
    lines = [header]
    for s in range(table.probs.shape[0]):
        bins = ",".join(f"{v:.9g}" for v in table.probs[s])
        lines.append(f"{s},{key},{bins}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
