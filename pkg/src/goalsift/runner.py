"""Experience collection and the interleaved training loop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import envs, metrics, oracle
from .agents import QTable, dyna_step, q_update
from .config import RunConfig
from .envs import GridTask, InitMode, Target
from .evaluator import FeedforwardEvaluator, TabularEvaluator
from .generator import CertifiedLocalCorruptor, HallucinationInjector, OneStepModel
from .metrics import MetricsRow
from .oracle import GREEDY_TO_TARGET, TargetCategory
from .relabel import MIXTURES, ReplayStore, Transition, sample_batch


def uniform_actor(enc, rng) -> int:
    return int(rng.integers(envs.N_ACTIONS))


def collect_episode(task: GridTask, store: ReplayStore, episode_id: int,
                    rng: np.random.Generator, act_fn=uniform_actor,
                    max_steps: int = 128, on_transition=None) -> tuple[float, int]:
    """Roll one episode from a uniform non-terminal start into the store."""
    space = envs.state_space(task)
    state = envs.reset(task, InitMode.ALL_NONTERMINAL, rng)
    total = 0.0
    t = 0
    for t in range(max_steps):
        enc = space.encode(state)
        action = act_fn(enc, rng)
        nxt, r, done = envs.step(task, state, action)
        next_enc = space.states[space.index_by_emb[nxt.embedding]]
        tr = Transition(task.task_id, episode_id, t, enc, action, r, next_enc, done)
        store.push(tr)
        if on_transition is not None:
            on_transition(tr)
        total += r
        state = nxt
        if done:
            break
    return total, t + 1


def collect_random_walk(task: GridTask, n_episodes: int, rng: np.random.Generator,
                        capacity: int = 200_000, max_steps: int = 128) -> ReplayStore:
    store = ReplayStore(capacity=capacity)
    for ep in range(n_episodes):
        collect_episode(task, store, ep, rng, max_steps=max_steps)
    return store


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(entropy=tuple(int(p) for p in parts)).generate_state(1)[0])


def make_tasks(config: RunConfig, seed: int) -> list[GridTask]:
    """The seed run's preserved training task set."""
    return [
        envs.generate_task(config.family, config.width, config.height, config.difficulty,
                           derive_seed(seed, i, 0x7A5C))
        for i in range(config.n_train_tasks)
    ]


def model_target_generator(model: OneStepModel, radius: int = 0):
    """JIT generate handle: expose the simulated successors used in planning."""
    def handle(source, rng) -> Target | None:
        action = int(rng.integers(envs.N_ACTIONS))
        out = model.try_sample_next(source, action, rng)
        if out is None:
            return None
        return Target(out.emb, radius)
    return handle


class _TaskCorruptor:
    """Dispatches the corruption channel to the source task's corruptor."""

    def __init__(self, corruptors: dict[str, CertifiedLocalCorruptor]):
        self._by_task = corruptors

    def __call__(self, source, true_emb, rng):
        return self._by_task[source.task_id](source, true_emb, rng)


def build_eval_pairs(task: GridTask, n_per_category: int, radius: int, seed: int, T: int):
    """Fixed (source, target) probes per category plus their exact tables."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xE7A1)))
    space = envs.state_space(task)
    nonterm = space.nonterminal_indices()
    injector = HallucinationInjector(task, 0.0, 0.0, radius=radius)
    pairs: dict[TargetCategory, list] = {c: [] for c in TargetCategory}
    invalid_pool = injector._invalid_pool
    for _ in range(n_per_category):
        src = space.states[int(rng.choice(nonterm))]
        emb = invalid_pool[int(rng.integers(len(invalid_pool)))]
        pairs[TargetCategory.INVALID].append((src, Target(emb, radius)))
    tries = 0
    while len(pairs[TargetCategory.REACHABLE]) < n_per_category and tries < 50 * n_per_category:
        tries += 1
        src = space.states[int(rng.choice(nonterm))]
        target = Target(tuple(int(v) for v in space.embeddings[int(rng.integers(space.n))]), radius)
        if oracle.categorize_target(task, src, target) is TargetCategory.REACHABLE:
            pairs[TargetCategory.REACHABLE].append((src, target))
    tries = 0
    while len(pairs[TargetCategory.BLOCKED]) < n_per_category and tries < 50 * n_per_category:
        tries += 1
        src = space.states[int(rng.choice(nonterm))]
        pool = injector._blocked_pool(src.index)
        if not pool:
            continue
        target = Target(pool[int(rng.integers(len(pool)))], radius)
        pairs[TargetCategory.BLOCKED].append((src, target))
    targets = [t for plist in pairs.values() for _, t in plist]
    tables = metrics.build_oracle_tables(task, targets, GREEDY_TO_TARGET, T)
    return pairs, tables


def make_evaluator(config: RunConfig):
    if config.backend == "tabular":
        return TabularEvaluator(
            T=config.support_size,
            learning_rate=config.evaluator_learning_rate,
            sync_period=config.sync_period,
        )
    return FeedforwardEvaluator(
        width=config.width, height=config.height, T=config.support_size,
        learning_rate=config.evaluator_learning_rate if config.evaluator_learning_rate < 1.0 else 1e-3,
        sync_period=max(config.sync_period, 100),
        seed=derive_seed(0xFF, config.width, config.height),
    )


@dataclass
class TrainArtifacts:
    rows: list[MetricsRow]
    tasks: list[GridTask]
    qtable: QTable
    evaluator: object
    model: OneStepModel
    store: ReplayStore
    final: dict[str, float] = field(default_factory=dict)


def run_training(config: RunConfig, seed: int) -> TrainArtifacts:
    """One seed run: acting, relabeled evaluator training, agent updates, snapshots."""
    config.validate()
    tasks = make_tasks(config, seed)
    spaces = {t.task_id: envs.state_space(t) for t in tasks}
    optimal = {t.task_id: oracle.optimal_q(t, config.gamma) for t in tasks}
    probes = {
        t.task_id: build_eval_pairs(t, config.eval_pairs_per_category, config.radius,
                                    derive_seed(seed, i, 0xE), config.support_size)
        for i, t in enumerate(tasks)
    }
    corruptors = {
        t.task_id: CertifiedLocalCorruptor(t, config.corrupt_invalid, config.corrupt_blocked)
        for t in tasks
    }
    store = ReplayStore(capacity=config.replay_capacity)
    model = OneStepModel(corruptor=_TaskCorruptor(corruptors))
    evaluator = make_evaluator(config)
    qtable = QTable(alpha=config.q_alpha, gamma=config.gamma)
    mix = MIXTURES[config.relabel_mix]
    needs_generator = any(name == "generate" for name, _ in mix)
    gen_handle = model_target_generator(model, config.radius) if needs_generator else None

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xAC7)))
    rows: list[MetricsRow] = []
    episode_returns: list[float] = []
    interactions = 0
    episode_id = 0
    window = {"applied": 0, "rejected": 0, "abstained": 0}
    anneal_steps = max(1, int(config.epsilon_anneal_frac * config.total_interactions))

    def epsilon() -> float:
        frac = min(1.0, interactions / anneal_steps)
        return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)

    def snapshot(step: int) -> None:
        run_id = config.run_id
        qerr = float(np.mean([metrics.q_error(qtable, optimal[t.task_id], t) for t in tasks]))
        rows.append(MetricsRow(run_id, seed, step, "qerr", "all", qerr))
        recent = episode_returns[-config.return_window:]
        rows.append(MetricsRow(run_id, seed, step, "return", "train",
                               float(np.mean(recent)) if recent else 0.0))
        n_sims = window["applied"] + window["rejected"]
        rows.append(MetricsRow(run_id, seed, step, "reject_rate", "sim",
                               window["rejected"] / n_sims if n_sims else 0.0))
        window.update(applied=0, rejected=0, abstained=0)
        pooled: dict[tuple, list] = {}
        for t in tasks:
            cat_pairs, tables = probes[t.task_id]
            for cat, plist in cat_pairs.items():
                if not plist:
                    continue
                errs = metrics.e_error(evaluator, tables, plist, cat)
                for bucket, val in errs.items():
                    pooled.setdefault((cat.value, bucket), []).append(val)
        for (cat, bucket), vals in sorted(pooled.items()):
            rows.append(MetricsRow(run_id, seed, step, "dist_err", f"{cat}:{bucket}",
                                   float(np.mean(vals))))

    while interactions < config.total_interactions:
        task = tasks[int(rng.integers(len(tasks)))]
        space = spaces[task.task_id]
        state = envs.reset(task, InitMode.ALL_NONTERMINAL, rng)
        ep_return = 0.0
        for t_step in range(config.max_episode_steps):
            enc = space.encode(state)
            action = qtable.act(enc, rng, epsilon())
            nxt, r, done = envs.step(task, state, action)
            next_enc = space.states[space.index_by_emb[nxt.embedding]]
            tr = Transition(task.task_id, episode_id, t_step, enc, action, r, next_enc, done)
            store.push(tr)
            model.fit_one(tr)
            if config.agent == "q_only":
                q_update(qtable, tr)
            else:
                gate = evaluator if config.agent == "dyna_plus" else None
                threshold = config.dyna_threshold if config.agent == "dyna_plus" else 0.0
                stats = dyna_step(qtable, tr, store, model, config.n_sim, threshold,
                                  evaluator=gate, rng=rng)
                window["applied"] += stats.applied
                window["rejected"] += stats.rejected
                window["abstained"] += stats.abstained
            if interactions % config.train_every == 0 and len(store) >= config.batch_size:
                batch = sample_batch(store, mix, config.batch_size, generator=gen_handle,
                                     rng=rng, radius=config.radius)
                evaluator.train_batch(batch)
            interactions += 1
            ep_return += r
            state = nxt
            if interactions % config.snapshot_every == 0 or interactions == config.total_interactions:
                snapshot(interactions)
            if done or interactions >= config.total_interactions:
                break
        episode_returns.append(ep_return)
        episode_id += 1

    art = TrainArtifacts(rows=rows, tasks=tasks, qtable=qtable, evaluator=evaluator,
                         model=model, store=store)
    final_q = [r for r in rows if r.metric == "qerr"][-1]
    final_ret = [r for r in rows if r.metric == "return"][-1]
    final_rej = [r for r in rows if r.metric == "reject_rate"][-1]
    art.final = {"qerr": final_q.value, "return": final_ret.value, "reject_rate": final_rej.value}
    return art
