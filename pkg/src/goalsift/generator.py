"""Target producers: a one-step model, a conditional sampler and an injector.

The injector emits targets with exact, oracle-certified category rates and
is the controlled stand-in for a learned generator's hallucinations. The
one-step model supports a pluggable corruption channel so simulated
successors can hallucinate at a configured rate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .envs import GridTask, StateEncoding, Target, state_space
from .oracle import TargetCategory

OFFGRID_MARGIN = 2  # far enough off the board that even radius-1 sets are empty


class UnseenPair(LookupError):
    """The one-step model has never observed this (state, action)."""


class BlockedUnavailable(LookupError):
    """No temporarily-infeasible state exists for this source (e.g. nav tasks)."""


@dataclass(frozen=True)
class SimOutcome:
    """A simulated successor: its embedding plus the modeled reward/termination."""

    emb: tuple[int, int, int, int]
    reward: float
    terminal: bool
    label: str  # "true" or the injected TargetCategory value


class HallucinationInjector:
    """Emits targets at exact category rates, each re-certified by the oracle.

    Invalid targets come from a per-task pool (lava positions, off-grid
    positions, item-cell flag contradictions); blocked targets are valid
    states unreachable from the source; reachable targets are drawn from the
    source's reachability closure. When no blocked state exists the draw
    falls back to a reachable one (counted and logged) unless configured to
    raise.
    """

    def __init__(self, task: GridTask, p_invalid: float, p_blocked: float,
                 radius: int = 0, blocked_fallback: str = "reachable"):
        if p_invalid < 0 or p_blocked < 0 or p_invalid + p_blocked > 1:
            raise ValueError("rates must be non-negative and sum to at most 1")
        if blocked_fallback not in ("reachable", "error"):
            raise ValueError(f"unknown fallback {blocked_fallback!r}")
        self.task = task
        self.space = state_space(task)
        self.p_invalid = p_invalid
        self.p_blocked = p_blocked
        self.radius = radius
        self.blocked_fallback = blocked_fallback
        self.n_blocked_fallbacks = 0
        self._invalid_pool = self._build_invalid_pool()
        self._blocked_cache: dict[int, list[tuple]] = {}
        self._reachable_cache: dict[int, list[int]] = {}

    def _build_invalid_pool(self) -> list[tuple]:
        task, space = self.task, self.space
        classes = [(1, 1)] if task.family.value == "nav" else [(0, 0), (0, 1), (1, 0), (1, 1)]
        candidates: set[tuple] = set()
        for y in range(task.height):
            for x in range(task.width):
                for sw, sh in classes:
                    if (x, y, sw, sh) not in space.index_by_emb:
                        candidates.add((x, y, sw, sh))
        m = OFFGRID_MARGIN
        for sw, sh in classes:
            candidates.update({
                (-m, -m, sw, sh), (task.width - 1 + m, -m, sw, sh),
                (-m, task.height - 1 + m, sw, sh), (task.width - 1 + m, task.height - 1 + m, sw, sh),
            })
        pool = [emb for emb in sorted(candidates)
                if not oracle.member_mask(self.space, Target(emb, self.radius)).any()]
        if not pool:
            raise ValueError(f"task {task.task_id} has no certifiably invalid embedding")
        return pool

    def _reachable_pool(self, src_idx: int) -> list[int]:
        pool = self._reachable_cache.get(src_idx)
        if pool is None:
            pool = sorted(oracle.reachable_arrivals(self.task, src_idx))
            self._reachable_cache[src_idx] = pool
        return pool

    def _blocked_pool(self, src_idx: int) -> list[tuple]:
        pool = self._blocked_cache.get(src_idx)
        if pool is None:
            arrivals = oracle.reachable_arrivals(self.task, src_idx)
            pool = []
            for i in range(self.space.n):
                if i in arrivals:
                    continue
                emb = tuple(int(v) for v in self.space.embeddings[i])
                members = np.flatnonzero(oracle.member_mask(self.space, Target(emb, self.radius)))
                if not any(int(mm) in arrivals for mm in members):
                    pool.append(emb)
            self._blocked_cache[src_idx] = pool
        return pool

    def inject(self, source: StateEncoding, rng: np.random.Generator) -> tuple[Target, TargetCategory]:
        u = rng.random()
        if u < self.p_invalid:
            pool = self._invalid_pool
            target = Target(pool[int(rng.integers(len(pool)))], self.radius)
            intended = TargetCategory.INVALID
        elif u < self.p_invalid + self.p_blocked:
            pool = self._blocked_pool(source.index)
            if not pool:
                if self.blocked_fallback == "error":
                    raise BlockedUnavailable(f"no blocked state from source {source.index}")
                self.n_blocked_fallbacks += 1
                return self._reachable_draw(source, rng)
            target = Target(pool[int(rng.integers(len(pool)))], self.radius)
            intended = TargetCategory.BLOCKED
        else:
            return self._reachable_draw(source, rng)
        got = oracle.categorize_target(self.task, source.index, target)
        if got is not intended:
            raise AssertionError(f"injector certification failure: wanted {intended}, oracle says {got}")
        return target, intended

    def _reachable_draw(self, source: StateEncoding, rng) -> tuple[Target, TargetCategory]:
        pool = self._reachable_pool(source.index)
        idx = pool[int(rng.integers(len(pool)))]
        emb = tuple(int(v) for v in self.space.embeddings[idx])
        target = Target(emb, self.radius)
        got = oracle.categorize_target(self.task, source.index, target)
        if got is not TargetCategory.REACHABLE:
            raise AssertionError(f"injector certification failure: wanted reachable, oracle says {got}")
        return target, TargetCategory.REACHABLE

    def as_generator(self):
        """Adapter usable as a relabeling generator handle."""
        def handle(source: StateEncoding, rng: np.random.Generator) -> Target:
            return self.inject(source, rng)[0]
        return handle


class CertifiedLocalCorruptor:
    """Structured successor corruption at certified category rates.

    Invalid: the successor's position is perturbed onto an adjacent lava
    cell or just off the grid. Blocked: the successor's possession flags are
    flipped below the source's class (strictly unreachable, flags only grow).
    Every corrupted embedding is re-checked against the oracle's category;
    when no blocked variant exists the draw falls back to the true successor.
    """

    def __init__(self, task: GridTask, p_invalid: float, p_blocked: float):
        if p_invalid < 0 or p_blocked < 0 or p_invalid + p_blocked > 1:
            raise ValueError("rates must be non-negative and sum to at most 1")
        self.task = task
        self.space = state_space(task)
        self.p_invalid = p_invalid
        self.p_blocked = p_blocked
        self.n_blocked_fallbacks = 0
        self._invalid_cache: dict[tuple, list[tuple]] = {}

    def _invalid_options(self, emb: tuple) -> list[tuple]:
        opts = self._invalid_cache.get(emb)
        if opts is None:
            x, y, sw, sh = emb
            opts = []
            for dx, dy in ((0, -1), (0, 1), (-1, 0), (1, 0)):
                nx, ny = x + dx, y + dy
                if not self.task.in_bounds(nx, ny) or self.task.glyph(nx, ny) == "L":
                    opts.append((nx, ny, sw, sh))
            if not opts:
                opts.append((-OFFGRID_MARGIN, -OFFGRID_MARGIN, sw, sh))
            assert all(o not in self.space.index_by_emb for o in opts)
            self._invalid_cache[emb] = opts
        return opts

    def _blocked_options(self, source: StateEncoding, true_emb: tuple) -> list[tuple]:
        x, y, _, _ = true_emb
        opts = []
        for sw, sh in ((0, 0), (0, 1), (1, 0)):
            if sw >= source.has_sword and sh >= source.has_shield:
                continue  # not strictly below the source's class
            emb = (x, y, sw, sh)
            if emb in self.space.index_by_emb:
                opts.append(emb)
        return opts

    def __call__(self, source: StateEncoding, true_emb: tuple, rng) -> tuple[tuple, str]:
        u = rng.random()
        if u < self.p_invalid:
            opts = self._invalid_options(true_emb)
            emb = opts[int(rng.integers(len(opts)))]
            got = oracle.categorize_target(self.task, source.index, Target(emb))
            if got is not TargetCategory.INVALID:
                raise AssertionError(f"local corruptor: wanted invalid, oracle says {got}")
            return emb, TargetCategory.INVALID.value
        if u < self.p_invalid + self.p_blocked:
            opts = self._blocked_options(source, true_emb)
            if opts:
                emb = opts[int(rng.integers(len(opts)))]
                got = oracle.categorize_target(self.task, source.index, Target(emb))
                if got is not TargetCategory.BLOCKED:
                    raise AssertionError(f"local corruptor: wanted blocked, oracle says {got}")
                return emb, TargetCategory.BLOCKED.value
            self.n_blocked_fallbacks += 1
        return true_emb, "true"


class FlatCorruptor:
    """Uncertified structured corruption at a flat rate.

    Perturbs the successor onto a lava cell, off the grid, or flips a
    possession flag downward; which kinds are available depends on the task
    and the true successor's flags.
    """

    def __init__(self, task: GridTask, rate: float):
        if not 0.0 <= rate <= 1.0:
            raise ValueError("rate must be in [0, 1]")
        self.task = task
        self.rate = rate
        self.lava_cells = task.find_cells("L")

    def __call__(self, source: StateEncoding, true_emb: tuple, rng) -> tuple[tuple, str]:
        if self.rate == 0.0 or rng.random() >= self.rate:
            return true_emb, "true"
        x, y, sw, sh = true_emb
        kinds = ["offgrid"]
        if self.lava_cells:
            kinds.append("lava")
        if sw or sh:
            kinds.append("flagdown")
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "lava":
            lx, ly = self.lava_cells[int(rng.integers(len(self.lava_cells)))]
            return (lx, ly, sw, sh), "corrupt"
        if kind == "offgrid":
            return (-OFFGRID_MARGIN, -OFFGRID_MARGIN, sw, sh), "corrupt"
        if sw and sh:
            drop = int(rng.integers(2))
            return (x, y, 1 - drop, drop), "corrupt"
        return (x, y, 0, 0), "corrupt"


@dataclass
class OneStepModel:
    """Empirical deterministic transition model with a corruption channel."""

    corruptor: object | None = None
    table: dict = field(default_factory=dict)

    def fit_one(self, tr) -> None:
        key = (tr.task_id, tr.s.embedding, tr.a)
        n = self.table[key][3] if key in self.table else 0
        self.table[key] = (tr.s_next.embedding, tr.r, tr.terminal, n + 1)

    def fit(self, transitions) -> None:
        for tr in transitions:
            self.fit_one(tr)

    def has(self, s: StateEncoding, a: int) -> bool:
        return (s.task_id, s.embedding, a) in self.table

    def try_sample_next(self, s: StateEncoding, a: int, rng) -> SimOutcome | None:
        entry = self.table.get((s.task_id, s.embedding, a))
        if entry is None:
            return None
        emb, r, terminal, _ = entry
        if self.corruptor is not None:
            emb, label = self.corruptor(s, emb, rng)
        else:
            label = "true"
        return SimOutcome(emb=emb, reward=r, terminal=terminal, label=label)

    def sample_next(self, s: StateEncoding, a: int, rng) -> SimOutcome:
        out = self.try_sample_next(s, a, rng)
        if out is None:
            raise UnseenPair(f"no observation for {(s.embedding, a)}")
        return out


class ConditionalTargetSampler:
    """Categorical target distribution per source, fit from future-ordered pairs."""

    def __init__(self, radius: int = 0, temperature: float = 1.0, corruptor=None):
        self.radius = radius
        self.temperature = temperature
        self.corruptor = corruptor
        self.counts: dict[tuple, dict[tuple, int]] = {}
        self._marginal: dict[str, dict[tuple, int]] = {}

    def fit_future_pairs(self, store) -> None:
        """Count (source, later source state) pairs within each stored episode."""
        for episode in store._episodes.values():
            for t, tr in enumerate(episode):
                src_key = (tr.task_id, tr.s.embedding)
                bucket = self.counts.setdefault(src_key, {})
                marg = self._marginal.setdefault(tr.task_id, {})
                for later in episode[t + 1:]:
                    emb = later.s.embedding
                    bucket[emb] = bucket.get(emb, 0) + 1
                    marg[emb] = marg.get(emb, 0) + 1

    def _distribution(self, source: StateEncoding, temperature: float):
        bucket = self.counts.get((source.task_id, source.embedding))
        if not bucket:
            bucket = self._marginal.get(source.task_id)
        if not bucket:
            return None, None
        embs = sorted(bucket)
        counts = np.array([bucket[e] for e in embs], dtype=float)
        if temperature <= 0.0:
            probs = np.zeros(len(embs))
            probs[int(np.argmax(counts))] = 1.0  # argmax keeps lowest key on ties
            return embs, probs
        weighted = counts ** (1.0 / temperature)
        return embs, weighted / weighted.sum()

    def sample_candidates(self, source: StateEncoding, k: int, rng,
                          temperature: float | None = None) -> list[Target]:
        if k < 1:
            raise ValueError("k must be >= 1")
        temp = self.temperature if temperature is None else temperature
        embs, probs = self._distribution(source, temp)
        out = []
        for _ in range(k):
            if embs is None:
                return []
            emb = embs[int(rng.choice(len(embs), p=probs))]
            if self.corruptor is not None:
                emb, _ = self.corruptor(source, emb, rng)
            out.append(Target(emb, self.radius))
        return out

    def as_generator(self):
        def handle(source: StateEncoding, rng: np.random.Generator) -> Target | None:
            picks = self.sample_candidates(source, 1, rng)
            return picks[0] if picks else None
        return handle
