import numpy as np
import pytest

from goalsift import envs, oracle
from goalsift.envs import EnvState, Family, Target
from goalsift.oracle import PolicySpec, TargetCategory, UNIFORM_RANDOM

from conftest import task_from_rows


LAVA3 = "L" * 4


@pytest.fixture(scope="module")
def corridor():
    # three walkable cells ending in the goal, everything else lava
    rows = ["..G" + "L", LAVA3, LAVA3, LAVA3]
    return task_from_rows(Family.NAV, rows)


def right_policy(task):
    n = envs.state_space(task).n
    table = np.zeros((n, envs.N_ACTIONS))
    table[:, 3] = 1.0
    return PolicySpec("table", table)


def test_corridor_point_mass_at_two(corridor):
    space = envs.state_space(corridor)
    src = space.index_by_emb[(0, 0, 1, 1)]
    target = Target((2, 0, 1, 1))
    table = oracle.distance_distribution(corridor, right_policy(corridor), target, T=16)
    expected = np.zeros(16)
    expected[1] = 1.0
    np.testing.assert_array_equal(table.probs[src], expected)
    assert oracle.tau_feasibility_exact(table, src, 1) == 0.0
    assert oracle.tau_feasibility_exact(table, src, 2) == 1.0


def test_two_state_chain_geometric():
    rows = [".G" + "LL", LAVA3, LAVA3, LAVA3]
    task = task_from_rows(Family.NAV, rows)
    space = envs.state_space(task)
    a_idx = space.index_by_emb[(0, 0, 1, 1)]
    table_pi = np.zeros((space.n, envs.N_ACTIONS))
    table_pi[:, 3] = 0.5  # right: advance
    table_pi[:, 2] = 0.5  # left: clamp in place
    T = 16
    table = oracle.distance_distribution(task, PolicySpec("table", table_pi), Target((1, 0, 1, 1)), T)
    for t in range(1, T):
        assert table.probs[a_idx, t - 1] == pytest.approx(0.5 ** t, abs=1e-15)
    assert table.probs[a_idx, T - 1] == pytest.approx(0.5 ** (T - 1), abs=1e-15)
    assert oracle.tau_feasibility_exact(table, a_idx, 2) == pytest.approx(0.75)


def test_unmatchable_target_is_all_overflow(quest_task):
    lava_x, lava_y = quest_task.find_cells(envs.GLYPH_LAVA)[0]
    table = oracle.distance_distribution(
        quest_task, UNIFORM_RANDOM, Target((lava_x, lava_y, 1, 1)), T=16
    )
    assert np.all(table.probs[:, :-1] == 0.0)
    assert np.all(table.probs[:, -1] == 1.0)


def test_rows_normalized_and_tau_monotone(quest_task, rng):
    space = envs.state_space(quest_task)
    for _ in range(5):
        src = int(rng.choice(space.nonterminal_indices()))
        tgt_idx = int(rng.choice(space.n))
        target = envs.target_of(space.states[tgt_idx])
        table = oracle.distance_distribution(quest_task, UNIFORM_RANDOM, target, T=16)
        sums = table.probs.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)
        assert np.all(table.probs >= -1e-15)
        feas = [oracle.tau_feasibility_exact(table, src, tau) for tau in range(1, 16)]
        assert all(b >= a - 1e-15 for a, b in zip(feas, feas[1:]))


def test_greedy_policy_gives_point_mass_at_bfs_distance(quest_task, rng):
    space = envs.state_space(quest_task)
    checked = 0
    while checked < 8:
        src = int(rng.choice(space.nonterminal_indices()))
        tgt_state = space.states[int(rng.choice(space.n))]
        target = envs.target_of(tgt_state)
        if oracle.categorize_target(quest_task, src, target) is not TargetCategory.REACHABLE:
            continue
        matched = oracle._matched_matrix(space, [target])
        d = oracle._first_hit_steps(space, matched)[src]
        if not np.isfinite(d) or d >= 15:
            continue
        table = oracle.distance_distribution(quest_task, oracle.GREEDY_TO_TARGET, target, T=16)
        assert table.probs[src, int(d) - 1] == pytest.approx(1.0)
        checked += 1


def test_categorize_blocked_for_lower_class(quest_task):
    space = envs.state_space(quest_task)
    src = next(i for i in range(space.n)
               if space.states[i].has_sword and space.states[i].has_shield and not space.terminal[i])
    low = next(s for s in space.states if not s.has_sword and not s.has_shield)
    assert oracle.categorize_target(quest_task, src, envs.target_of(low)) is TargetCategory.BLOCKED


def test_categorize_identity_reachable(quest_task):
    space = envs.state_space(quest_task)
    for i in space.nonterminal_indices()[:10]:
        enc = space.states[int(i)]
        assert oracle.categorize_target(quest_task, int(i), envs.target_of(enc)) is TargetCategory.REACHABLE


def test_categorize_lava_position_invalid(quest_task):
    lx, ly = quest_task.find_cells(envs.GLYPH_LAVA)[0]
    space = envs.state_space(quest_task)
    src = int(space.nonterminal_indices()[0])
    assert oracle.categorize_target(quest_task, src, Target((lx, ly, 1, 1))) is TargetCategory.INVALID
    assert oracle.categorize_target(quest_task, src, Target((-3, -3, 1, 1))) is TargetCategory.INVALID


def test_class_partition_blocked_everywhere(quest_task, rng):
    space = envs.state_space(quest_task)
    high = [i for i in range(space.n) if space.states[i].has_sword and not space.terminal[i]]
    low = [s for s in space.states if not s.has_sword]
    for _ in range(20):
        src = int(rng.choice(high))
        tgt = envs.target_of(low[int(rng.integers(len(low)))])
        assert oracle.categorize_target(quest_task, src, tgt) in (
            TargetCategory.BLOCKED,
            TargetCategory.INVALID,
        )
        assert oracle.categorize_target(quest_task, src, tgt) is not TargetCategory.REACHABLE


def test_optimal_q_fixture():
    rows = [
        "..G" + "L",
        LAVA3,
        LAVA3,
        LAVA3,
    ]
    task = task_from_rows(Family.NAV, rows)
    space = envs.state_space(task)
    q = oracle.optimal_q(task, gamma=0.9)
    near = space.index_by_emb[(1, 0, 1, 1)]
    far = space.index_by_emb[(0, 0, 1, 1)]
    assert q[near, 3] == pytest.approx(1.0)       # step right onto the goal
    assert q[far].max() == pytest.approx(0.9)     # two optimal steps away
    assert q[far, 1] == pytest.approx(0.0)        # down into lava


def test_optimal_q_unreachable_zero():
    rows = [
        ".LG" + "L"[:1],
        LAVA3,
        LAVA3,
        LAVA3,
    ]
    task = task_from_rows(Family.NAV, ["..GL", "LLLL", "LLLL", "LLL."])
    space = envs.state_space(task)
    q = oracle.optimal_q(task, gamma=0.9)
    pocket = space.index_by_emb[(3, 3, 1, 1)]
    assert np.all(q[pocket] == 0.0)


def test_theorem1_constructed_cases(quest_task):
    space = envs.state_space(quest_task)
    src = int(space.nonterminal_indices()[0])
    lx, ly = quest_task.find_cells(envs.GLYPH_LAVA)[0]
    g0 = envs.target_of(space.states[int(space.nonterminal_indices()[3])])
    invalids = [Target((lx, ly, 1, 1)), Target((-1, 0, 1, 1)), Target((99, 99, 0, 0))]
    assert oracle.theorem1_check(quest_task, src, [g0, *invalids], tau=10)
    mixed = oracle.distance_distribution(quest_task, UNIFORM_RANDOM, [g0, *invalids], T=16)
    alone = oracle.distance_distribution(quest_task, UNIFORM_RANDOM, g0, T=16)
    np.testing.assert_array_equal(mixed.probs, alone.probs)
    assert oracle.feasible_set_reachable(quest_task, src, invalids) is False


def test_theorem1_random_small(quest_task, nav_task, rng):
    for k in range(20):
        task = quest_task if k % 2 == 0 else nav_task
        space = envs.state_space(task)
        src = int(rng.choice(space.nonterminal_indices()))
        members = []
        for _ in range(int(rng.integers(1, 5))):
            kind = rng.integers(3)
            if kind == 0:
                members.append(envs.target_of(space.states[int(rng.integers(space.n))]))
            elif kind == 1:
                members.append(Target((int(rng.integers(-2, 10)), int(rng.integers(-2, 10)), 1, 1)))
            else:
                members.append(Target((int(rng.integers(8)), int(rng.integers(8)), 0, 0)))
        assert oracle.theorem1_check(task, src, members, tau=int(rng.integers(1, 15)))


def test_table_csv_export(tmp_path, corridor):
    target = Target((2, 0, 1, 1))
    table = oracle.distance_distribution(corridor, right_policy(corridor), target, T=4)
    out = tmp_path / "table.csv"
    oracle.table_to_csv(table, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "state_index,target_key,bin_1,bin_2,bin_3,bin_4"
    assert len(lines) == 1 + table.probs.shape[0]
