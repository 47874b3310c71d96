"""Tabular agents: Q-learning, gated 1-step background planning, subgoal graphs.

The background planner (classic Dyna) mixes real value backups with
simulated ones from a one-step model. Its gated variant asks the evaluator
whether each simulated successor looks reachable within one step and skips
the update otherwise. The decision-time planner builds a small directed
graph over candidate targets, scores edges by expected cumulative discount
read off the evaluator's histograms, value-iterates, and commits to the
best first hop.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import N_ACTIONS, StateEncoding, Target
from .evaluator import expected_clipped_distance, reject


@dataclass
class QTable:
    """Per-(state, action) values keyed by embedding; unseen entries read 0."""

    alpha: float = 0.1
    gamma: float = 0.99
    epsilon: float = 0.05
    cells: dict = field(default_factory=dict)

    def q_values(self, task_id: str, emb: tuple) -> np.ndarray:
        q = self.cells.get((task_id, emb))
        return q if q is not None else np.zeros(N_ACTIONS)

    def update(self, task_id: str, s_emb: tuple, a: int, r: float,
               next_emb: tuple, terminal: bool) -> None:
        key = (task_id, s_emb)
        q = self.cells.get(key)
        if q is None:
            q = np.zeros(N_ACTIONS)
            self.cells[key] = q
        bootstrap = 0.0 if terminal else float(self.q_values(task_id, next_emb).max())
        q[a] += self.alpha * (r + self.gamma * bootstrap - q[a])

    def greedy_action(self, task_id: str, emb: tuple) -> int:
        return int(np.argmax(self.q_values(task_id, emb)))

    def act(self, state: StateEncoding, rng: np.random.Generator,
            epsilon: float | None = None) -> int:
        eps = self.epsilon if epsilon is None else epsilon
        if rng.random() < eps:
            return int(rng.integers(N_ACTIONS))
        return self.greedy_action(state.task_id, state.embedding)


def q_update(qtable: QTable, transition) -> None:
    qtable.update(transition.task_id, transition.s.embedding, transition.a,
                  transition.r, transition.s_next.embedding, transition.terminal)


@dataclass
class DynaStats:
    applied: int = 0
    rejected: int = 0
    abstained: int = 0
    sims: list = field(default_factory=list)  # (source, action, outcome) when recorded


def dyna_step(qtable: QTable, transition, store, model, n_sim: int, threshold: float,
              evaluator=None, rng: np.random.Generator | None = None,
              record: bool = False) -> DynaStats:
    """One real value backup plus n_sim gated simulated backups.

    The gate asks for at least `threshold` probability mass at distance one
    toward the simulated successor; without an evaluator every simulated
    update applies (plain background planning).
    """
    q_update(qtable, transition)
    stats = DynaStats()
    for _ in range(n_sim):
        tr = store.sample_transition(rng)
        outcome = model.try_sample_next(tr.s, tr.a, rng)
        if outcome is None:
            stats.abstained += 1
            continue
        if record:
            stats.sims.append((tr.s, tr.a, outcome))
        if evaluator is not None:
            hist = evaluator.predict(tr.s, tr.a, Target(outcome.emb))
            if reject(hist, 1, threshold):
                stats.rejected += 1
                continue
        qtable.update(tr.task_id, tr.s.embedding, tr.a,
                      outcome.reward, outcome.emb, outcome.terminal)
        stats.applied += 1
    return stats


@dataclass
class PlanVertex:
    kind: str  # current | candidate | goal
    target: Target | None
    source: StateEncoding  # stand-in encoding used when predicting from here


@dataclass
class PlanGraph:
    vertices: list[PlanVertex]
    gamma_hat: np.ndarray  # (V, V) edge discounts, 0 where disconnected
    pruned: np.ndarray     # vertices removed as unreachable/duplicate
    feasible: np.ndarray
    values: np.ndarray
    sweeps: int
    goal_index: int
    current_index: int = 0


def _pseudo_encoding(task_id: str, emb: tuple) -> StateEncoding:
    return StateEncoding(task_id, -1, emb[0], emb[1], bool(emb[2]), bool(emb[3]))


def build_plan_graph(current: StateEncoding, candidates: list[Target], evaluator,
                     gamma: float, tau: int, goal_target: Target,
                     plus: bool = False, theta: float = 0.05,
                     goal_value: float = 1.0) -> PlanGraph:
    """Directed graph over {current} + deduplicated candidates + the task goal.

    Edge (u, v) carries the expected cumulative discount of reaching v's
    target from u within tau steps. The "+" variant zeroes edges whose
    predicted feasibility within the full support falls below theta; vertices
    unreachable from the current state through surviving edges are pruned.
    """
    from .evaluator import expected_discount  # local import keeps module load light

    T = evaluator.T
    seen = {goal_target.key}
    deduped: list[Target] = []
    for cand in candidates:
        if cand.key in seen:
            continue
        seen.add(cand.key)
        deduped.append(cand)
    vertices = [PlanVertex("current", None, current)]
    for cand in deduped:
        vertices.append(PlanVertex("candidate", cand, _pseudo_encoding(current.task_id, cand.embedding)))
    vertices.append(PlanVertex("goal", goal_target, _pseudo_encoding(current.task_id, goal_target.embedding)))
    n = len(vertices)
    goal_index = n - 1
    gamma_hat = np.zeros((n, n))
    for u in range(n):
        if u == goal_index:
            continue  # the goal is terminal
        for v in range(n):
            if v == u or v == 0:
                continue  # no edges back into the current state
            hist = evaluator.predict(vertices[u].source, None, vertices[v].target)
            if plus and reject(hist, T - 1, theta):
                continue
            gamma_hat[u, v] = expected_discount(hist, gamma, tau)

    pruned = np.zeros(n, dtype=bool)
    reachable = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in np.flatnonzero(gamma_hat[u] > 0.0):
            if int(v) not in reachable:
                reachable.add(int(v))
                stack.append(int(v))
    for v in range(1, n):
        if v not in reachable:
            pruned[v] = True
            gamma_hat[:, v] = 0.0
            gamma_hat[v, :] = 0.0

    values = np.zeros(n)
    if not pruned[goal_index]:
        values[goal_index] = goal_value
    sweeps = 0
    for _ in range(n):
        sweeps += 1
        new_values = values.copy()
        for v in range(n):
            if v == goal_index or pruned[v]:
                continue
            new_values[v] = float((gamma_hat[v] * values).max()) if n else 0.0
        if np.array_equal(new_values, values):
            break
        values = new_values

    feasible = ~pruned & (gamma_hat.sum(axis=0) > 0.0)
    feasible[0] = True
    return PlanGraph(vertices=vertices, gamma_hat=gamma_hat, pruned=pruned,
                     feasible=feasible, values=values, sweeps=sweeps,
                     goal_index=goal_index)


def plan_and_select(graph: PlanGraph) -> Target:
    """First hop of the best plan; falls back to the direct goal."""
    scores = graph.gamma_hat[graph.current_index] * graph.values
    best = int(np.argmax(scores))
    if scores[best] <= 0.0:
        return graph.vertices[graph.goal_index].target
    return graph.vertices[best].target


def goal_policy_action(evaluator, s: StateEncoding, target: Target) -> int:
    """Low-level goal reaching: the action minimizing expected clipped distance."""
    costs = [expected_clipped_distance(evaluator.predict(s, a, target)) for a in range(N_ACTIONS)]
    return int(np.argmin(costs))
