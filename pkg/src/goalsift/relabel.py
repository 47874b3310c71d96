"""Hindsight relabeling: replay storage and the four atomic strategies.

Relabel pools draw from the *source* states of stored transitions:

- ``future``:  a source state strictly later in the same episode (raises
  FutureEmpty on an episode's last transition; batch sampling falls back to
  episode).
- ``episode``: any source state of the same episode.
- ``pertask``: any distinct source state ever observed under the same task,
  from a deduplicated per-task auxiliary index.
- ``generate``: a target produced just-in-time by a generator handle
  conditioned on the transition's source; nothing is stored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import StateEncoding, Target, indicator, target_of

FUTURE = "future"
EPISODE = "episode"
PERTASK = "pertask"
GENERATE = "generate"
STRATEGIES = (FUTURE, EPISODE, PERTASK, GENERATE)

# default mixture: half episode, a quarter pertask, a quarter generate
MIX_DEFAULT = ((EPISODE, 0.5), (PERTASK, 0.25), (GENERATE, 0.25))
MIX_EPISODE_PERTASK = ((EPISODE, 0.5), (PERTASK, 0.5))
MIX_EPISODE_GENERATE = ((EPISODE, 0.5), (GENERATE, 0.5))
MIX_EPISODE_ONLY = ((EPISODE, 1.0),)
MIX_FUTURE_ONLY = ((FUTURE, 1.0),)

MIXTURES = {
    "epg": MIX_DEFAULT,
    "ep": MIX_EPISODE_PERTASK,
    "eg": MIX_EPISODE_GENERATE,
    "episode": MIX_EPISODE_ONLY,
    "future": MIX_FUTURE_ONLY,
}


class FutureEmpty(LookupError):
    """No later source state exists (last transition of its episode)."""


class MissingGenerator(ValueError):
    """generate strategy requested without a generator handle."""


class EmptyStore(LookupError):
    """Batch sampling from a store with no transitions."""


@dataclass(frozen=True)
class Transition:
    task_id: str
    episode_id: int
    t: int
    s: StateEncoding
    a: int
    r: float
    s_next: StateEncoding
    terminal: bool


@dataclass(frozen=True)
class RelabeledSample:
    transition: Transition
    target: Target
    h_flag: int
    strategy_tag: str

    @property
    def s(self) -> StateEncoding:
        return self.transition.s

    @property
    def a(self) -> int:
        return self.transition.a

    @property
    def s_next(self) -> StateEncoding:
        return self.transition.s_next

    @property
    def terminal(self) -> bool:
        return self.transition.terminal


class ReplayStore:
    """Ring buffer of transitions, evicted one whole episode at a time."""

    def __init__(self, capacity: int = 100_000):
        self.capacity = capacity
        self._episodes: dict[tuple[str, int], list[Transition]] = {}
        self._order: list[tuple[str, int]] = []
        self._aux: dict[str, dict[tuple, int]] = {}
        self._aux_sorted: dict[str, list[tuple]] = {}
        self._flat: list[Transition] = []
        self.n_transitions = 0

    def __len__(self) -> int:
        return self.n_transitions

    def push(self, tr: Transition) -> None:
        key = (tr.task_id, tr.episode_id)
        episode = self._episodes.get(key)
        if episode is None:
            if tr.t != 0:
                raise ValueError(f"episode {key} must start at t=0, got t={tr.t}")
            episode = []
            self._episodes[key] = episode
            self._order.append(key)
        else:
            if episode[-1].terminal:
                raise ValueError(f"episode {key} already terminated; t={tr.t} rejected")
            if tr.t != len(episode):
                raise ValueError(f"episode {key}: non-contiguous t={tr.t}, expected {len(episode)}")
        episode.append(tr)
        self._flat.append(tr)
        self.n_transitions += 1
        aux = self._aux.setdefault(tr.task_id, {})
        emb = tr.s.embedding
        if emb not in aux:
            self._aux_sorted.pop(tr.task_id, None)
        aux[emb] = aux.get(emb, 0) + 1
        while self.n_transitions > self.capacity and len(self._order) > 1:
            self._evict_oldest()

    def _evict_oldest(self) -> None:
        key = self._order.pop(0)
        episode = self._episodes.pop(key)
        self.n_transitions -= len(episode)
        aux = self._aux[key[0]]
        for tr in episode:
            emb = tr.s.embedding
            aux[emb] -= 1
            if aux[emb] == 0:
                del aux[emb]
                self._aux_sorted.pop(key[0], None)
        self._flat = [t for ep in self._episodes.values() for t in ep]

    def episode_of(self, tr: Transition) -> list[Transition]:
        return self._episodes[(tr.task_id, tr.episode_id)]

    def distinct_states(self, task_id: str) -> list[tuple]:
        cached = self._aux_sorted.get(task_id)
        if cached is None:
            cached = sorted(self._aux.get(task_id, ()))
            self._aux_sorted[task_id] = cached
        return cached

    def sample_transition(self, rng: np.random.Generator) -> Transition:
        if not self._flat:
            raise EmptyStore("replay store has no transitions")
        return self._flat[int(rng.integers(len(self._flat)))]


def relabel(store: ReplayStore, transition: Transition, strategy: str, generator=None,
            rng: np.random.Generator | None = None, radius: int = 0) -> Target:
    """Pick a substitute target for one transition under an atomic strategy."""
    if strategy == GENERATE:
        if generator is None:
            raise MissingGenerator("generate strategy needs a generator handle")
        target = generator(transition.s, rng)
        if target is None:
            raise MissingGenerator("generator abstained")
        return target
    if strategy == PERTASK:
        pool = store.distinct_states(transition.task_id)
        emb = pool[int(rng.integers(len(pool)))]
        return Target(embedding=emb, radius=radius)
    episode = store.episode_of(transition)
    last_t = len(episode) - 1
    if strategy == FUTURE:
        if transition.t >= last_t:
            raise FutureEmpty(f"transition t={transition.t} is the episode's last")
        t_pick = int(rng.integers(transition.t + 1, last_t + 1))
    elif strategy == EPISODE:
        t_pick = int(rng.integers(0, last_t + 1))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return target_of(episode[t_pick].s, radius=radius)


def sample_batch(store: ReplayStore, mix, batch_size: int, generator=None,
                 rng: np.random.Generator | None = None, radius: int = 0) -> list[RelabeledSample]:
    """Uniform transitions, each independently relabeled by a mixture draw.

    future falls back to episode on an episode's last transition; a generator
    abstention redraws among the remaining strategies with renormalized
    weights (episode if nothing remains).
    """
    mix = list(mix)
    names = [name for name, _ in mix]
    weights = np.array([w for _, w in mix], dtype=float)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixture weights sum to {weights.sum()}, expected 1")
    if GENERATE in names and generator is None:
        raise MissingGenerator("mixture includes generate but no generator was given")
    if len(store) == 0:
        raise EmptyStore("cannot sample from an empty store")
    flat = store._flat
    tr_picks = rng.integers(len(flat), size=batch_size)
    strat_edges = np.cumsum(weights)
    strat_picks = np.searchsorted(strat_edges, rng.random(batch_size), side="right")
    pool_u = rng.random(batch_size)
    rest = [(n, w) for n, w in mix if n != GENERATE]
    rest_edges = np.cumsum([w for _, w in rest]) / sum(w for _, w in rest) if rest else None

    out = []
    for i in range(batch_size):
        tr = flat[int(tr_picks[i])]
        strategy = names[min(int(strat_picks[i]), len(names) - 1)]
        target = None
        if strategy == GENERATE:
            target = generator(tr.s, rng)
            if target is None:  # abstention: renormalize over the rest
                if rest:
                    strategy = rest[int(np.searchsorted(rest_edges, rng.random(), side="right"))][0]
                else:
                    strategy = EPISODE
        if target is None:
            if strategy == PERTASK:
                pool = store.distinct_states(tr.task_id)
                target = Target(embedding=pool[int(pool_u[i] * len(pool))], radius=radius)
            else:
                episode = store.episode_of(tr)
                last_t = len(episode) - 1
                if strategy == FUTURE and tr.t >= last_t:
                    strategy = EPISODE
                if strategy == FUTURE:
                    t_pick = tr.t + 1 + int(pool_u[i] * (last_t - tr.t))
                else:
                    t_pick = int(pool_u[i] * (last_t + 1))
                target = Target(embedding=episode[t_pick].s.embedding, radius=radius)
        nxt = tr.s_next.embedding
        tgt = target.embedding
        if (nxt[2], nxt[3]) != (tgt[2], tgt[3]):
            h_flag = 0
        elif target.radius == 0:
            h_flag = int(nxt[0] == tgt[0] and nxt[1] == tgt[1])
        else:
            h_flag = int(abs(nxt[0] - tgt[0]) + abs(nxt[1] - tgt[1]) <= 1)
        out.append(RelabeledSample(transition=tr, target=target, h_flag=h_flag, strategy_tag=strategy))
    return out
