import numpy as np
import pytest

from goalsift import envs, generator as gen, oracle, runner
from goalsift.envs import Family, Target
from goalsift.oracle import TargetCategory


@pytest.fixture(scope="module")
def quest_store():
    task = envs.generate_task(Family.QUEST, 6, 6, 0.25, seed=2)
    rng = np.random.default_rng(3)
    store = runner.collect_random_walk(task, n_episodes=80, rng=rng)
    return task, store


def test_one_step_model_replays_observation(quest_store, rng):
    task, store = quest_store
    model = gen.OneStepModel()
    model.fit(store._flat)
    tr = store.sample_transition(rng)
    out = model.sample_next(tr.s, tr.a, rng)
    assert out.emb == tr.s_next.embedding
    assert out.label == "true"
    assert out.reward == tr.r and out.terminal == tr.terminal


def test_one_step_model_unseen_pair(quest_store, rng):
    task, store = quest_store
    model = gen.OneStepModel()
    model.fit_one(store._flat[0])
    ghost = envs.StateEncoding(task.task_id, -1, 0, 0, False, False)
    assert model.try_sample_next(ghost, 2, rng) is None
    with pytest.raises(gen.UnseenPair):
        model.sample_next(ghost, 2, rng)


def test_flat_corruption_rate(rng):
    task = envs.generate_task(Family.NAV, 8, 8, 0.2, seed=4)
    store = runner.collect_random_walk(task, n_episodes=60, rng=np.random.default_rng(8))
    space = envs.state_space(task)
    model = gen.OneStepModel(corruptor=gen.FlatCorruptor(task, rate=0.1))
    model.fit(store._flat)
    n, bad = 8000, 0
    for _ in range(n):
        tr = store.sample_transition(rng)
        out = model.sample_next(tr.s, tr.a, rng)
        if out.emb not in space.index_by_emb:
            bad += 1
    sigma = np.sqrt(n * 0.1 * 0.9)
    assert abs(bad - n * 0.1) < 4 * sigma


def test_corruption_zero_is_consistent(quest_store, rng):
    task, store = quest_store
    model = gen.OneStepModel(corruptor=gen.FlatCorruptor(task, rate=0.0))
    model.fit(store._flat)
    for _ in range(200):
        tr = store.sample_transition(rng)
        assert model.sample_next(tr.s, tr.a, rng).emb == tr.s_next.embedding


def test_injector_rates_and_certification(quest_store):
    task, store = quest_store
    space = envs.state_space(task)
    armed = [s for s in space.states
             if s.has_sword and s.has_shield and not space.terminal[s.index]]
    src = armed[0]
    inj = gen.HallucinationInjector(task, p_invalid=0.1, p_blocked=0.15)
    rng = np.random.default_rng(0)
    n = 5000
    counts = {c: 0 for c in TargetCategory}
    for _ in range(n):
        target, cat = inj.inject(src, rng)
        counts[cat] += 1
        assert oracle.categorize_target(task, src, target) is cat
    for cat, p in ((TargetCategory.INVALID, 0.1), (TargetCategory.BLOCKED, 0.15)):
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(counts[cat] - n * p) < 4 * sigma, (cat, counts[cat])
    assert inj.n_blocked_fallbacks == 0


def test_injector_zero_rates_all_reachable(quest_store):
    task, store = quest_store
    space = envs.state_space(task)
    src = space.states[int(space.nonterminal_indices()[0])]
    inj = gen.HallucinationInjector(task, 0.0, 0.0)
    rng = np.random.default_rng(1)
    for _ in range(100):
        target, cat = inj.inject(src, rng)
        assert cat is TargetCategory.REACHABLE


def test_injector_nav_blocked_falls_back():
    task = envs.generate_task(Family.NAV, 6, 6, 0.2, seed=9)
    space = envs.state_space(task)
    src = space.states[int(space.nonterminal_indices()[0])]
    inj = gen.HallucinationInjector(task, 0.0, 0.5)
    rng = np.random.default_rng(2)
    cats = {inj.inject(src, rng)[1] for _ in range(200)}
    assert cats == {TargetCategory.REACHABLE}
    assert inj.n_blocked_fallbacks > 0
    strict = gen.HallucinationInjector(task, 0.0, 1.0, blocked_fallback="error")
    with pytest.raises(gen.BlockedUnavailable):
        for _ in range(50):
            strict.inject(src, rng)


def test_injector_generator_handle(quest_store, rng):
    task, store = quest_store
    space = envs.state_space(task)
    src = space.states[int(space.nonterminal_indices()[0])]
    handle = gen.HallucinationInjector(task, 1.0, 0.0).as_generator()
    target = handle(src, rng)
    assert oracle.categorize_target(task, src, target) is TargetCategory.INVALID


def test_local_corruptor_rates_and_certification(quest_store):
    task, store = quest_store
    cor = gen.CertifiedLocalCorruptor(task, p_invalid=0.1, p_blocked=0.15)
    rng = np.random.default_rng(6)
    space = envs.state_space(task)
    n = 4000
    counts = {"invalid": 0, "blocked": 0, "true": 0}
    for _ in range(n):
        tr = store.sample_transition(rng)
        emb, label = cor(tr.s, tr.s_next.embedding, rng)
        counts[label] += 1
        if label == "invalid":
            assert emb not in space.index_by_emb
        elif label == "blocked":
            assert oracle.categorize_target(task, tr.s.index, envs.Target(emb)) is TargetCategory.BLOCKED
        else:
            assert emb == tr.s_next.embedding
    sigma = np.sqrt(n * 0.1 * 0.9)
    assert abs(counts["invalid"] - n * 0.1) < 4 * sigma
    # blocked rate runs below 0.15 only through counted fallbacks from flag-less sources
    assert counts["blocked"] + cor.n_blocked_fallbacks >= n * 0.15 - 4 * sigma


def test_local_corruptor_nav_always_falls_back_blocked():
    task = envs.generate_task(Family.NAV, 6, 6, 0.2, seed=9)
    store = runner.collect_random_walk(task, n_episodes=10, rng=np.random.default_rng(1))
    cor = gen.CertifiedLocalCorruptor(task, p_invalid=0.0, p_blocked=0.5)
    rng = np.random.default_rng(2)
    for _ in range(200):
        tr = store.sample_transition(rng)
        emb, label = cor(tr.s, tr.s_next.embedding, rng)
        assert label == "true" and emb == tr.s_next.embedding
    assert cor.n_blocked_fallbacks > 0


def test_conditional_sampler_zero_mass_off_support(quest_store, rng):
    task, store = quest_store
    sampler = gen.ConditionalTargetSampler()
    sampler.fit_future_pairs(store)
    tr = store._flat[0]
    episode = store.episode_of(tr)
    later = {t.s.embedding for t in episode[1:]}
    picks = {t.embedding for t in sampler.sample_candidates(tr.s, 50, rng)}
    observed = {e for ep in store._episodes.values() for e in (x.s.embedding for x in ep)}
    assert picks <= observed
    src_bucket = sampler.counts[(tr.task_id, tr.s.embedding)]
    assert set(src_bucket) <= observed


def test_conditional_sampler_single_episode_support(rng):
    task = envs.generate_task(Family.NAV, 6, 6, 0.1, seed=5)
    store = runner.collect_random_walk(task, n_episodes=1, rng=np.random.default_rng(4))
    sampler = gen.ConditionalTargetSampler()
    sampler.fit_future_pairs(store)
    episode = next(iter(store._episodes.values()))
    src = episode[0].s
    allowed = {t.s.embedding for t in episode[1:]}
    if allowed:
        picks = {t.embedding for t in sampler.sample_candidates(src, 100, rng)}
        assert picks <= allowed


def test_conditional_sampler_temperature_zero_mode(quest_store, rng):
    task, store = quest_store
    sampler = gen.ConditionalTargetSampler(temperature=0.0)
    sampler.fit_future_pairs(store)
    tr = next(t for t in store._flat if (t.task_id, t.s.embedding) in sampler.counts)
    picks = sampler.sample_candidates(tr.s, 8, rng)
    assert len({t.embedding for t in picks}) == 1


def test_sampler_candidate_count_and_categories(quest_store, rng):
    task, store = quest_store
    sampler = gen.ConditionalTargetSampler()
    sampler.fit_future_pairs(store)
    tr = store.sample_transition(rng)
    picks = sampler.sample_candidates(tr.s, 8, rng)
    assert len(picks) == 8
    for t in picks:
        assert oracle.categorize_target(task, tr.s, t) in tuple(TargetCategory)
