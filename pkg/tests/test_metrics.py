import numpy as np
import pytest

from goalsift import envs, metrics, oracle
from goalsift.envs import Family, Target
from goalsift.evaluator import uniform_hist
from goalsift.metrics import MetricsRow
from goalsift.oracle import GREEDY_TO_TARGET, OracleEvaluator, TargetCategory


class UniformStub:
    def __init__(self, T=16):
        self.T = T

    def predict(self, state, action, target):
        return uniform_hist(self.T)


@pytest.fixture(scope="module")
def quest_pairs():
    task = envs.generate_task(Family.QUEST, 6, 6, 0.25, seed=13)
    space = envs.state_space(task)
    rng = np.random.default_rng(7)
    by_cat = {c: [] for c in TargetCategory}
    nonterm = space.nonterminal_indices()
    tries = 0
    while (min(len(v) for v in by_cat.values()) < 6) and tries < 4000:
        tries += 1
        src = space.states[int(rng.choice(nonterm))]
        kind = int(rng.integers(3))
        if kind == 0:
            target = envs.target_of(space.states[int(rng.integers(space.n))])
        elif kind == 1:
            target = Target((int(rng.integers(-2, 8)), int(rng.integers(-2, 8)),
                             int(rng.integers(2)), int(rng.integers(2))))
        else:
            lx, ly = task.find_cells(envs.GLYPH_LAVA)[int(rng.integers(len(task.find_cells(envs.GLYPH_LAVA))))]
            target = Target((lx, ly, 1, 1))
        cat = oracle.categorize_target(task, src, target)
        by_cat[cat].append((src, target))
    return task, by_cat


def test_e_error_oracle_against_itself_zero(quest_pairs):
    task, by_cat = quest_pairs
    orc = OracleEvaluator(task, T=16, policy=GREEDY_TO_TARGET)
    for cat, pairs in by_cat.items():
        targets = [t for _, t in pairs]
        tables = metrics.build_oracle_tables(task, targets, GREEDY_TO_TARGET, 16)
        errs = metrics.e_error(orc, tables, pairs, cat)
        for bucket, val in errs.items():
            assert val == pytest.approx(0.0, abs=1e-12), (cat, bucket)


def test_e_error_uniform_on_invalid_is_7_5(quest_pairs):
    task, by_cat = quest_pairs
    pairs = by_cat[TargetCategory.INVALID]
    targets = [t for _, t in pairs]
    tables = metrics.build_oracle_tables(task, targets, GREEDY_TO_TARGET, 16)
    errs = metrics.e_error(UniformStub(), tables, pairs, TargetCategory.INVALID)
    assert errs["all"] == pytest.approx(7.5)


def test_e_error_empty_bucket_missing(quest_pairs):
    task, by_cat = quest_pairs
    errs = metrics.e_error(UniformStub(), {}, [], TargetCategory.REACHABLE)
    assert errs == {}


def test_e_error_reachable_buckets(quest_pairs):
    task, by_cat = quest_pairs
    pairs = by_cat[TargetCategory.REACHABLE]
    targets = [t for _, t in pairs]
    tables = metrics.build_oracle_tables(task, targets, GREEDY_TO_TARGET, 16)
    errs = metrics.e_error(UniformStub(), tables, pairs, TargetCategory.REACHABLE)
    assert errs
    assert set(errs) <= {name for name, _ in metrics.DISTANCE_BUCKETS}


def test_delusion_frequency_arithmetic(quest_pairs):
    task, by_cat = quest_pairs
    good = by_cat[TargetCategory.REACHABLE][:7]
    bad = by_cat[TargetCategory.INVALID][:3]
    log = [(src.index, t) for src, t in good + bad]
    assert metrics.delusion_frequency(log, task) == pytest.approx(0.3)
    assert metrics.delusion_frequency([(s, t) for s, t in log[:7]], task) == 0.0
    assert metrics.delusion_frequency([], task) == 0.0


def test_q_error_zero_and_mean(quest_pairs):
    task, _ = quest_pairs
    space = envs.state_space(task)
    star = oracle.optimal_q(task, 0.95)

    class Exact:
        def q_values(self, task_id, emb):
            return star[space.index_by_emb[emb]]

    class Zero:
        def q_values(self, task_id, emb):
            return np.zeros(envs.N_ACTIONS)

    assert metrics.q_error(Exact(), star, task) == 0.0
    nonterm = space.nonterminal_indices()
    expected = float(np.abs(star[nonterm]).sum()) / (len(nonterm) * envs.N_ACTIONS)
    assert metrics.q_error(Zero(), star, task) == pytest.approx(expected)


def test_ood_protocol_counts_and_pooling():
    agent = metrics.SolvedAgent(gamma=0.99)
    res = metrics.ood_protocol(agent, Family.QUEST, 6, 6, [0.25, 0.45], n_per=3, seed=5)
    assert set(res) == {"0.25", "0.45", "pooled"}
    assert res["pooled"] == pytest.approx((res["0.25"] + res["0.45"]) / 2)
    assert res["0.25"] == 1.0 and res["0.45"] == 1.0  # exact values solve every task


def test_ood_random_below_optimal():
    rand = metrics.ood_protocol(metrics.RandomAgent(), Family.QUEST, 6, 6, [0.45], n_per=6, seed=5)
    best = metrics.ood_protocol(metrics.SolvedAgent(), Family.QUEST, 6, 6, [0.45], n_per=6, seed=5)
    assert rand["pooled"] < best["pooled"]


def test_write_rows_deterministic_and_sorted(tmp_path):
    rows = [
        MetricsRow("b", 1, 10, "qerr", "all", 0.5),
        MetricsRow("a", 2, 0, "ret", "pooled", 1.0),
        MetricsRow("a", 1, 0, "ret", "pooled", 0.123456789123),
    ]
    p1, p2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
    metrics.write_rows(p1, rows)
    metrics.write_rows(p2, list(reversed(rows)))
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "run_id,seed,step,metric,key,value"
    assert lines[1].startswith("a,1,0,ret,pooled,0.123456789")
