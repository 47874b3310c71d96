"""Procedural gridworld families, state encodings and target indicators.

Two deterministic families share the same movement rules (four compass
moves, boundary moves clamp in place):

- ``nav``:   reach the single goal cell; the agent always holds both items,
  so the state is just a position.
- ``quest``: collect the sword and the shield (in any order), then step onto
  the monster for the terminal reward. Items cannot be dropped, so the
  possession flags partition the state space into one-way classes.

Lava cells terminate the episode without reward. A lava death clamps the
position to the pre-move cell, so no state embedding ever carries a lava
position (keeping lava-positioned targets permanently invalid).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

N_ACTIONS = 4
# 0=up, 1=down, 2=left, 3=right
ACTION_DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0))

GLYPH_FLOOR = "."
GLYPH_LAVA = "L"
GLYPH_SWORD = "S"
GLYPH_SHIELD = "H"
GLYPH_MONSTER = "M"
GLYPH_GOAL = "G"
_VALID_GLYPHS = {GLYPH_FLOOR, GLYPH_LAVA, GLYPH_SWORD, GLYPH_SHIELD, GLYPH_MONSTER, GLYPH_GOAL}

MAX_GENERATION_ATTEMPTS = 10_000


class Family(str, enum.Enum):
    NAV = "nav"
    QUEST = "quest"


class InitMode(str, enum.Enum):
    ALL_NONTERMINAL = "all_nonterminal"
    FIXED_FARTHEST = "fixed_farthest"


class GenerationExhausted(RuntimeError):
    """No solvable layout found within the resample budget (difficulty too high)."""


class SteppedTerminal(RuntimeError):
    """step() was called on a terminal state."""


class TaskFileError(ValueError):
    """Malformed task file; message carries line/field context."""


@dataclass(frozen=True)
class GridTask:
    family: Family
    width: int
    height: int
    difficulty: float
    rng_seed: int
    init_mode: InitMode
    cells: tuple[str, ...]  # rows, cells[y][x]
    task_id: str

    def glyph(self, x: int, y: int) -> str:
        return self.cells[y][x]

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def find_cells(self, glyph: str) -> list[tuple[int, int]]:
        return [(x, y) for y in range(self.height) for x in range(self.width) if self.cells[y][x] == glyph]

    @property
    def success_pos(self) -> tuple[int, int]:
        glyph = GLYPH_MONSTER if self.family is Family.QUEST else GLYPH_GOAL
        return self.find_cells(glyph)[0]

    @property
    def spawn_flags(self) -> tuple[bool, bool]:
        # evaluation spawns start item-less in quest, item-complete in nav
        return (False, False) if self.family is Family.QUEST else (True, True)


@dataclass(frozen=True)
class EnvState:
    x: int
    y: int
    has_sword: bool
    has_shield: bool
    terminal: bool = False
    success: bool = False

    @property
    def embedding(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, int(self.has_sword), int(self.has_shield))


class StateEncoding(NamedTuple):
    """Dense index into a task's enumerable state space plus its structured form."""

    task_id: str
    index: int
    x: int
    y: int
    has_sword: bool
    has_shield: bool

    @property
    def embedding(self) -> tuple:
        # bools compare and hash as 0/1, so the slice is key-compatible
        return self[2:6]


@dataclass(frozen=True)
class Target:
    """A target embedding plus the indicator radius (0 = exact match)."""

    embedding: tuple[int, int, int, int]
    radius: int = 0

    def __post_init__(self):
        if self.radius not in (0, 1):
            raise ValueError(f"radius must be 0 or 1, got {self.radius}")

    @property
    def key(self) -> tuple[int, int, int, int, int]:
        return (*self.embedding, self.radius)


def _embedding_of(state) -> tuple[int, int, int, int]:
    if isinstance(state, tuple) and len(state) == 4:
        return state
    return state.embedding


def target_of(state, radius: int = 0) -> Target:
    """Embedding function g: project a state onto (x, y, sword, shield)."""
    return Target(embedding=_embedding_of(state), radius=radius)


def indicator(state, target: Target, radius: int | None = None) -> int:
    """Indicator function h: 1 iff the state belongs to the target's set.

    Radius 0 requires component-wise equality; radius 1 relaxes the position
    to Manhattan distance <= 1 but still requires exact possession flags.
    """
    r = target.radius if radius is None else radius
    if r not in (0, 1):
        raise ValueError(f"radius must be 0 or 1, got {r}")
    sx, sy, ssw, ssh = _embedding_of(state)
    tx, ty, tsw, tsh = target.embedding
    if (ssw, ssh) != (tsw, tsh):
        return 0
    if r == 0:
        return int((sx, sy) == (tx, ty))
    return int(abs(sx - tx) + abs(sy - ty) <= 1)


def _flag_class(has_sword: bool, has_shield: bool) -> int:
    return int(has_sword) * 2 + int(has_shield)


def _position_valid(task: GridTask, x: int, y: int, has_sword: bool, has_shield: bool) -> bool:
    """A (position, flags) pair is a state iff it is layout-consistent."""
    if not task.in_bounds(x, y):
        return False
    glyph = task.glyph(x, y)
    if glyph == GLYPH_LAVA:
        return False
    if glyph == GLYPH_SWORD and not has_sword:
        return False
    if glyph == GLYPH_SHIELD and not has_shield:
        return False
    return True


def step(task: GridTask, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
    """Deterministic transition. Boundary moves clamp; lava kills in place."""
    if state.terminal:
        raise SteppedTerminal(f"step() on terminal state {state}")
    if action not in range(N_ACTIONS):
        raise ValueError(f"invalid action {action}")
    dx, dy = ACTION_DELTAS[action]
    nx, ny = state.x + dx, state.y + dy
    if not task.in_bounds(nx, ny):
        nx, ny = state.x, state.y
    glyph = task.glyph(nx, ny)
    if glyph == GLYPH_LAVA:
        # death in place: position never lands on lava
        nxt = EnvState(state.x, state.y, state.has_sword, state.has_shield, terminal=True)
        return nxt, 0.0, True
    has_sword, has_shield = state.has_sword, state.has_shield
    if glyph == GLYPH_SWORD and not has_sword:
        has_sword = True
    elif glyph == GLYPH_SHIELD and not has_shield:
        has_shield = True
    if glyph == GLYPH_MONSTER:
        win = has_sword and has_shield
        nxt = EnvState(nx, ny, has_sword, has_shield, terminal=True, success=win)
        return nxt, float(win), True
    if glyph == GLYPH_GOAL:
        nxt = EnvState(nx, ny, has_sword, has_shield, terminal=True, success=True)
        return nxt, 1.0, True
    return EnvState(nx, ny, has_sword, has_shield), 0.0, False


class StateSpace:
    """Enumeration of a task's valid states plus cached transition tables."""

    def __init__(self, task: GridTask):
        self.task = task
        classes = [3] if task.family is Family.NAV else [0, 1, 2, 3]
        states: list[StateEncoding] = []
        index_by_emb: dict[tuple[int, int, int, int], int] = {}
        for cls in classes:
            has_sword, has_shield = bool(cls // 2), bool(cls % 2)
            for y in range(task.height):
                for x in range(task.width):
                    if not _position_valid(task, x, y, has_sword, has_shield):
                        continue
                    idx = len(states)
                    states.append(StateEncoding(task.task_id, idx, x, y, has_sword, has_shield))
                    index_by_emb[(x, y, int(has_sword), int(has_shield))] = idx
        self.states = states
        self.index_by_emb = index_by_emb
        n = len(states)
        self.n = n
        self.embeddings = np.array([s.embedding for s in states], dtype=np.int64)

        success_pos = task.success_pos
        self.terminal = np.array([(s.x, s.y) == success_pos for s in states], dtype=bool)
        self.success = np.array(
            [(s.x, s.y) == success_pos and s.has_sword and s.has_shield for s in states], dtype=bool
        )

        # succ_idx: enumerated index of the arrival state (lava deaths arrive
        # "at" the pre-move state); step_terminal marks episode end.
        self.succ_idx = np.zeros((n, N_ACTIONS), dtype=np.int64)
        self.step_terminal = np.zeros((n, N_ACTIONS), dtype=bool)
        self.reward = np.zeros((n, N_ACTIONS), dtype=np.float64)
        for i, enc in enumerate(states):
            if self.terminal[i]:
                self.succ_idx[i, :] = i
                self.step_terminal[i, :] = True
                continue
            st = EnvState(enc.x, enc.y, enc.has_sword, enc.has_shield)
            for a in range(N_ACTIONS):
                nxt, r, done = step(task, st, a)
                self.succ_idx[i, a] = index_by_emb[nxt.embedding]
                self.step_terminal[i, a] = done
                self.reward[i, a] = r

    def encode(self, state: EnvState) -> StateEncoding:
        return self.states[self.index_by_emb[state.embedding]]

    def state_of(self, index: int) -> EnvState:
        enc = self.states[index]
        pos_terminal = bool(self.terminal[index])
        return EnvState(
            enc.x, enc.y, enc.has_sword, enc.has_shield,
            terminal=pos_terminal, success=bool(self.success[index]),
        )

    def nonterminal_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.terminal)

    def distance_to_success(self) -> np.ndarray:
        """BFS steps from each state to the success terminal (inf if cut off)."""
        dist = np.full(self.n, np.inf)
        goal = int(np.flatnonzero(self.success)[0])
        dist[goal] = 0.0
        frontier = [goal]
        # reverse adjacency over non-death moves
        preds: list[list[int]] = [[] for _ in range(self.n)]
        for s in range(self.n):
            if self.terminal[s]:
                continue
            for a in range(N_ACTIONS):
                j = int(self.succ_idx[s, a])
                if self.step_terminal[s, a] and not self.terminal[j]:
                    continue  # lava death: not a move to j
                preds[j].append(s)
        while frontier:
            nxt_frontier = []
            for j in frontier:
                for s in preds[j]:
                    if dist[s] == np.inf:
                        dist[s] = dist[j] + 1
                        nxt_frontier.append(s)
            frontier = nxt_frontier
        return dist

    def farthest_spawn(self) -> int | None:
        """Deterministic evaluation spawn: the spawn-class state farthest from success."""
        dist = self.distance_to_success()
        sw, sh = self.task.spawn_flags
        cand = [
            i for i in range(self.n)
            if not self.terminal[i]
            and self.states[i].has_sword == sw and self.states[i].has_shield == sh
            and np.isfinite(dist[i])
        ]
        if not cand:
            return None
        best = max(cand, key=lambda i: (dist[i], -i))
        return best


@lru_cache(maxsize=512)
def _space_cache(task: GridTask) -> StateSpace:
    return StateSpace(task)


def state_space(task: GridTask) -> StateSpace:
    return _space_cache(task)


def enumerate_states(task: GridTask) -> list[StateEncoding]:
    """All valid (position, flags) states in a stable order."""
    return list(state_space(task).states)


def _solvable(task: GridTask) -> bool:
    space = StateSpace(task)
    if not np.any(space.success):
        return False
    dist = space.distance_to_success()
    if task.init_mode is InitMode.ALL_NONTERMINAL:
        nonterm = space.nonterminal_indices()
        return len(nonterm) > 0 and bool(np.all(np.isfinite(dist[nonterm])))
    return space.farthest_spawn() is not None


def _layout_solvable(cells: list[str], family: Family, init_mode: InitMode) -> bool:
    """Fast position-graph equivalent of the full state-graph invariant.

    Success is reachable from a state iff its position connects to the
    success cell without passing through it, with both items inside the same
    component for quest; with the component unique this holds from every
    state, which is exactly the all_nonterminal requirement.
    """
    height, width = len(cells), len(cells[0])
    success_glyph = GLYPH_MONSTER if family is Family.QUEST else GLYPH_GOAL
    sx = sy = -1
    for y in range(height):
        x = cells[y].find(success_glyph)
        if x >= 0:
            sx, sy = x, y
    # components of non-lava cells, success cell excluded
    comp = [[-1] * width for _ in range(height)]
    n_comp = 0
    comp_cells: list[list[tuple[int, int]]] = []
    for y0 in range(height):
        for x0 in range(width):
            if comp[y0][x0] >= 0 or cells[y0][x0] == GLYPH_LAVA or (x0, y0) == (sx, sy):
                continue
            members = [(x0, y0)]
            comp[y0][x0] = n_comp
            stack = [(x0, y0)]
            while stack:
                cx, cy = stack.pop()
                for dx, dy in ACTION_DELTAS:
                    nx, ny = cx + dx, cy + dy
                    if 0 <= nx < width and 0 <= ny < height and comp[ny][nx] < 0 \
                            and cells[ny][nx] != GLYPH_LAVA and (nx, ny) != (sx, sy):
                        comp[ny][nx] = n_comp
                        members.append((nx, ny))
                        stack.append((nx, ny))
            comp_cells.append(members)
            n_comp += 1
    touching = set()
    for dx, dy in ACTION_DELTAS:
        nx, ny = sx + dx, sy + dy
        if 0 <= nx < width and 0 <= ny < height and comp[ny][nx] >= 0:
            touching.add(comp[ny][nx])

    def component_ok(cid: int, need_spawn_cell: bool) -> bool:
        if cid not in touching:
            return False
        glyphs = {cells[y][x] for x, y in comp_cells[cid]}
        if family is Family.QUEST:
            if GLYPH_SWORD not in glyphs or GLYPH_SHIELD not in glyphs:
                return False
            if need_spawn_cell and GLYPH_FLOOR not in glyphs:
                return False  # no flag-less spawn cell exists
        return True

    if init_mode is InitMode.ALL_NONTERMINAL:
        return n_comp == 1 and component_ok(0, need_spawn_cell=False)
    return any(component_ok(cid, need_spawn_cell=True) for cid in range(n_comp))


def _make_task_id(family: Family, width: int, height: int, difficulty: float, seed: int, mode: InitMode) -> str:
    return f"{family.value}-{width}x{height}-d{difficulty:g}-m{mode.value}-s{seed}"


def generate_task(
    family: Family | str,
    width: int,
    height: int,
    difficulty: float,
    seed: int,
    init_mode: InitMode | str = InitMode.ALL_NONTERMINAL,
) -> GridTask:
    """Sample a solvable task; resamples until the BFS invariant holds.

    Lava count is the closest achievable to difficulty * (cells - specials).
    Raises GenerationExhausted after MAX_GENERATION_ATTEMPTS resamples.
    """
    family = Family(family)
    init_mode = InitMode(init_mode)
    if width < 4 or height < 4:
        raise ValueError("width and height must be >= 4")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must be in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x6F61)))
    n_cells = width * height
    specials = [GLYPH_GOAL] if family is Family.NAV else [GLYPH_SWORD, GLYPH_SHIELD, GLYPH_MONSTER]
    n_lava = int(round(difficulty * (n_cells - len(specials))))
    task_id = _make_task_id(family, width, height, difficulty, seed, init_mode)
    for _ in range(MAX_GENERATION_ATTEMPTS):
        order = rng.permutation(n_cells)
        grid = [[GLYPH_FLOOR] * width for _ in range(height)]
        for glyph, flat in zip(specials, order[: len(specials)]):
            grid[flat // width][flat % width] = glyph
        for flat in order[len(specials): len(specials) + n_lava]:
            grid[flat // width][flat % width] = GLYPH_LAVA
        rows = ["".join(row) for row in grid]
        if not _layout_solvable(rows, family, init_mode):
            continue
        task = GridTask(
            family=family, width=width, height=height, difficulty=difficulty,
            rng_seed=seed, init_mode=init_mode,
            cells=tuple(rows), task_id=task_id,
        )
        if _solvable(task):  # state-graph confirmation of the position-graph check
            return task
    raise GenerationExhausted(
        f"no solvable {family.value} layout at difficulty {difficulty} "
        f"on a {width}x{height} grid within {MAX_GENERATION_ATTEMPTS} attempts"
    )


def reset(task: GridTask, mode: InitMode | str, seed=None) -> EnvState:
    """Initial state: uniform over non-terminal states, or the fixed farthest spawn."""
    mode = InitMode(mode)
    space = state_space(task)
    if mode is InitMode.FIXED_FARTHEST:
        idx = space.farthest_spawn()
        if idx is None:
            raise ValueError(f"task {task.task_id} has no success path from its spawn class")
        return space.state_of(idx)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    nonterm = space.nonterminal_indices()
    return space.state_of(int(rng.choice(nonterm)))


def save_task(task: GridTask, path) -> None:
    lines = [
        f"family: {task.family.value}",
        f"width: {task.width}",
        f"height: {task.height}",
        f"difficulty: {task.difficulty!r}",
        f"seed: {task.rng_seed}",
        f"init_mode: {task.init_mode.value}",
        "cells:",
        *task.cells,
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_task(path) -> GridTask:
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    fields: dict[str, str] = {}
    rows: list[str] = []
    in_cells = False
    for lineno, line in enumerate(raw_lines, start=1):
        if in_cells:
            if line:
                rows.append(line)
            continue
        if not line.strip():
            continue
        if line.strip() == "cells:":
            in_cells = True
            continue
        if ":" not in line:
            raise TaskFileError(f"line {lineno}: expected 'key: value', got {line!r}")
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    for required in ("family", "width", "height", "difficulty", "seed", "init_mode"):
        if required not in fields:
            raise TaskFileError(f"missing field {required!r}")
    try:
        family = Family(fields["family"])
    except ValueError:
        raise TaskFileError(f"field 'family': unknown family {fields['family']!r}") from None
    try:
        init_mode = InitMode(fields["init_mode"])
    except ValueError:
        raise TaskFileError(f"field 'init_mode': unknown mode {fields['init_mode']!r}") from None
    try:
        width = int(fields["width"])
        height = int(fields["height"])
        seed = int(fields["seed"])
        difficulty = float(fields["difficulty"])
    except ValueError as exc:
        raise TaskFileError(f"numeric field parse failure: {exc}") from None
    if not 0.0 <= difficulty <= 1.0:
        raise TaskFileError(f"field 'difficulty': {difficulty} outside [0, 1]")
    if len(rows) != height:
        raise TaskFileError(f"cells: expected {height} rows, got {len(rows)}")
    for i, row in enumerate(rows):
        if len(row) != width:
            raise TaskFileError(f"cells row {i}: expected width {width}, got {len(row)}")
        bad = set(row) - _VALID_GLYPHS
        if bad:
            raise TaskFileError(f"cells row {i}: unknown glyphs {sorted(bad)}")
    counts = {g: sum(row.count(g) for row in rows) for g in _VALID_GLYPHS}
    if family is Family.NAV:
        if counts[GLYPH_GOAL] != 1 or counts[GLYPH_SWORD] or counts[GLYPH_SHIELD] or counts[GLYPH_MONSTER]:
            raise TaskFileError("nav tasks need exactly one goal and no quest items")
    else:
        if counts[GLYPH_MONSTER] != 1 or counts[GLYPH_SWORD] != 1 or counts[GLYPH_SHIELD] != 1 or counts[GLYPH_GOAL]:
            raise TaskFileError("quest tasks need exactly one monster, sword and shield and no goal")
    return GridTask(
        family=family, width=width, height=height, difficulty=difficulty,
        rng_seed=seed, init_mode=init_mode, cells=tuple(rows),
        task_id=_make_task_id(family, width, height, difficulty, seed, init_mode),
    )
