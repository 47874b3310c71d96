import numpy as np
import pytest

from goalsift import envs


def task_from_rows(family, rows, difficulty=0.0, seed=0, init_mode=envs.InitMode.ALL_NONTERMINAL):
    """Build a GridTask from an explicit glyph layout (tests only)."""
    family = envs.Family(family)
    return envs.GridTask(
        family=family,
        width=len(rows[0]),
        height=len(rows),
        difficulty=difficulty,
        rng_seed=seed,
        init_mode=envs.InitMode(init_mode),
        cells=tuple(rows),
        task_id=f"fixture-{family.value}-{seed}-{abs(hash(tuple(rows))) % 10**8}",
    )


@pytest.fixture(scope="session")
def nav_task():
    return envs.generate_task(envs.Family.NAV, 8, 8, 0.2, seed=11)


@pytest.fixture(scope="session")
def quest_task():
    return envs.generate_task(envs.Family.QUEST, 8, 8, 0.3, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
