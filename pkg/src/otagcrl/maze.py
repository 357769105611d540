"""Discrete gridworld mazes with exact shortest-path oracles.

Cells are addressed as ``Cell(x, y)`` with ``x`` the column and ``y`` the row,
row 0 at the top. North decreases ``y``. Internally every free cell also has a
dense index (row-major order) used by all tabular code.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from importlib import resources
from typing import NamedTuple

import numpy as np

from . import kernels

MAX_CELLS = 10_000


class Action(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3
    STAY = 4

    @property
    def letter(self) -> str:
        return ACTION_LETTERS[self]

    @classmethod
    def from_letter(cls, letter: str) -> "Action":
        try:
            return cls(ACTION_LETTERS.index(letter))
        except ValueError:
            raise ValueError(f"unknown action letter {letter!r}") from None


ACTION_LETTERS = "NESWX"
NUM_ACTIONS = 5
# (dx, dy) per action, indexed by Action value
DELTAS = np.array([(0, -1), (1, 0), (0, 1), (-1, 0), (0, 0)], dtype=np.int32)


class Cell(NamedTuple):
    x: int
    y: int


class InvalidStateError(ValueError):
    """Raised when a cell is off-grid or inside a wall."""


class LayoutError(ValueError):
    """Raised for malformed or disconnected layouts."""


@dataclass(frozen=True, eq=False)
class GridMaze:
    width: int
    height: int
    walls: frozenset = field(default_factory=frozenset)
    slip_prob: float = 0.0
    layout_id: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "walls", frozenset(Cell(*w) for w in self.walls))
        if self.width < 1 or self.height < 1:
            raise LayoutError("maze must have at least one row and column")
        if self.width * self.height > MAX_CELLS:
            raise LayoutError(f"{self.width}x{self.height} exceeds {MAX_CELLS} cells")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValueError(f"slip_prob must lie in [0, 1), got {self.slip_prob}")
        for w in self.walls:
            if not (0 <= w.x < self.width and 0 <= w.y < self.height):
                raise LayoutError(f"wall {w} outside the grid")
        if not self.free_cells:
            raise LayoutError("layout has no free cells")
        unreachable = self._unreachable_cells()
        if unreachable:
            raise LayoutError(
                f"free space is disconnected: {len(unreachable)} cell(s) unreachable "
                f"from {tuple(self.free_cells[0])}, e.g. {tuple(unreachable[0])}"
            )

    def __eq__(self, other):
        if not isinstance(other, GridMaze):
            return NotImplemented
        return (self.width, self.height, self.walls, self.slip_prob, self.layout_id) == (
            other.width, other.height, other.walls, other.slip_prob, other.layout_id)

    def __hash__(self):
        return hash((self.width, self.height, self.walls, self.slip_prob, self.layout_id))

    def __repr__(self):
        return (f"GridMaze({self.layout_id!r}, {self.width}x{self.height}, "
                f"free={self.n_free}, slip={self.slip_prob})")

    # -- indexing ---------------------------------------------------------

    @cached_property
    def free_cells(self) -> list[Cell]:
        return [Cell(x, y) for y in range(self.height) for x in range(self.width)
                if Cell(x, y) not in self.walls]

    @cached_property
    def n_free(self) -> int:
        return len(self.free_cells)

    @cached_property
    def cell_xy(self) -> np.ndarray:
        """(F, 2) int32 array of (x, y) per free-cell index."""
        return np.array(self.free_cells, dtype=np.int32).reshape(-1, 2)

    @cached_property
    def _index_grid(self) -> np.ndarray:
        grid = np.full((self.height, self.width), -1, dtype=np.int32)
        xy = self.cell_xy
        grid[xy[:, 1], xy[:, 0]] = np.arange(len(xy), dtype=np.int32)
        return grid

    def is_free(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and self._index_grid[y, x] >= 0

    def index_of(self, cell) -> int:
        if not self.is_free(cell):
            raise InvalidStateError(f"{tuple(cell)} is not a free cell of {self.layout_id}")
        x, y = cell
        return int(self._index_grid[y, x])

    def cell_at(self, index: int) -> Cell:
        x, y = self.cell_xy[index]
        return Cell(int(x), int(y))

    def indices_of(self, cells) -> np.ndarray:
        return np.array([self.index_of(c) for c in cells], dtype=np.int32)

    # -- transition structure --------------------------------------------

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(F, 5) int32: deterministic successor index per action (blocked -> self)."""
        xy = self.cell_xy
        out = np.empty((len(xy), NUM_ACTIONS), dtype=np.int32)
        own = np.arange(len(xy), dtype=np.int32)
        for a, (dx, dy) in enumerate(DELTAS):
            nx, ny = xy[:, 0] + dx, xy[:, 1] + dy
            inside = (nx >= 0) & (nx < self.width) & (ny >= 0) & (ny < self.height)
            idx = np.full(len(xy), -1, dtype=np.int32)
            idx[inside] = self._index_grid[ny[inside], nx[inside]]
            out[:, a] = np.where(idx >= 0, idx, own)
        out.setflags(write=False)
        return out

    @cached_property
    def distances(self) -> np.ndarray:
        """(F, F) int32 all-pairs shortest move counts."""
        d = kernels.bfs_all_pairs(np.ascontiguousarray(self.neighbors))
        d.setflags(write=False)
        return d

    @cached_property
    def diameter(self) -> int:
        return int(self.distances.max())

    @cached_property
    def oracle_actions(self) -> np.ndarray:
        """(F_goal, F_state) int8: first of N, E, S, W that strictly decreases the
        distance to the goal; Stay at the goal itself."""
        d = self.distances
        nbr = self.neighbors
        F = self.n_free
        out = np.full((F, F), Action.STAY, dtype=np.int8)
        done = np.eye(F, dtype=bool)
        for a in (Action.NORTH, Action.EAST, Action.SOUTH, Action.WEST):
            # closer[g, s]: moving a from s gets closer to g
            closer = d[:, nbr[:, a]] < d
            pick = closer & ~done
            out[pick] = a
            done |= pick
        out.setflags(write=False)
        return out

    def _unreachable_cells(self) -> list[Cell]:
        free = set(self.free_cells)
        start = self.free_cells[0]
        seen = {start}
        queue = deque([start])
        while queue:
            x, y = queue.popleft()
            for dx, dy in DELTAS[:4]:
                c = Cell(x + int(dx), y + int(dy))
                if c in free and c not in seen:
                    seen.add(c)
                    queue.append(c)
        return [c for c in self.free_cells if c not in seen]


# -- operations --------------------------------------------------------------

def step(maze: GridMaze, s, a, rng: np.random.Generator | None = None) -> Cell:
    """One environment transition. With slip, the action is replaced by a uniform
    random one with probability ``maze.slip_prob``."""
    i = maze.index_of(s)
    a = Action(a)
    if maze.slip_prob > 0.0:
        if rng is None:
            raise ValueError("a random generator is required when slip_prob > 0")
        if rng.random() < maze.slip_prob:
            a = Action(int(rng.integers(NUM_ACTIONS)))
    return maze.cell_at(int(maze.neighbors[i, a]))


def shortest_distance(maze: GridMaze, s, g) -> int:
    return int(maze.distances[maze.index_of(s), maze.index_of(g)])


def oracle_subgoal(maze: GridMaze, s, g) -> Cell:
    """Adjacent cell on a shortest path from ``s`` to ``g`` (ties: N, E, S, W)."""
    i, j = maze.index_of(s), maze.index_of(g)
    if i == j:
        raise ValueError(f"oracle_subgoal needs s != g, got {tuple(s)} for both")
    a = int(maze.oracle_actions[j, i])
    return maze.cell_at(int(maze.neighbors[i, a]))


def oracle_path(maze: GridMaze, s, g) -> list[Cell]:
    """States visited by repeated ``oracle_subgoal`` from ``s`` to ``g`` inclusive."""
    path_idx = oracle_path_indices(maze, maze.index_of(s), maze.index_of(g))
    return [maze.cell_at(int(i)) for i in path_idx]


def oracle_path_indices(maze: GridMaze, s: int, g: int) -> np.ndarray:
    n = int(maze.distances[s, g])
    out = np.empty(n + 1, dtype=np.int32)
    out[0] = s
    act = maze.oracle_actions[g]
    nbr = maze.neighbors
    for t in range(n):
        s = int(nbr[s, act[s]])
        out[t + 1] = s
    return out


def oracle_subgoal_indices(maze: GridMaze, s: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """Cell reached after ``k`` oracle moves (stopping at the goal), vectorized."""
    s = np.asarray(s, dtype=np.int64).copy()
    g = np.asarray(g, dtype=np.int64)
    act = maze.oracle_actions
    nbr = maze.neighbors
    for _ in range(k):
        s = nbr[s, act[g, s]]
    return s.astype(np.int32)


# -- layouts -----------------------------------------------------------------

def parse_layout(text: str, slip_prob: float = 0.0, layout_id: str = "custom") -> GridMaze:
    """Build a maze from rows of '#' (wall) and '.' (free)."""
    rows = [r.rstrip("\r") for r in text.strip("\n").split("\n")]
    if not rows or not rows[0]:
        raise LayoutError("empty layout")
    width = len(rows[0])
    walls = []
    for y, row in enumerate(rows):
        if len(row) != width:
            raise LayoutError(f"row {y} has length {len(row)}, expected {width}")
        for x, ch in enumerate(row):
            if ch == "#":
                walls.append(Cell(x, y))
            elif ch != ".":
                raise LayoutError(f"unexpected character {ch!r} at ({x}, {y})")
    return GridMaze(width, len(rows), frozenset(walls), slip_prob, layout_id)


def render_layout(maze: GridMaze) -> str:
    return "\n".join(
        "".join("#" if Cell(x, y) in maze.walls else "." for x in range(maze.width))
        for y in range(maze.height)
    ) + "\n"


BUNDLED_LAYOUTS = ("chain-50", "corridor-300", "maze-medium", "maze-giant")


def load_layout(name: str, slip_prob: float = 0.0) -> GridMaze:
    if name not in BUNDLED_LAYOUTS:
        raise KeyError(f"unknown layout {name!r}; bundled: {', '.join(BUNDLED_LAYOUTS)}")
    text = resources.files("otagcrl").joinpath("layouts", f"{name}.txt").read_text()
    return parse_layout(text, slip_prob=slip_prob, layout_id=name)


# Fixed evaluation tasks per bundled layout: (start, goal) pairs.
EVAL_TASKS: dict[str, list[tuple[Cell, Cell]]] = {
    "chain-50": [(Cell(0, 0), Cell(49, 0)), (Cell(49, 0), Cell(0, 0)),
                 (Cell(5, 0), Cell(40, 0)), (Cell(45, 0), Cell(10, 0)),
                 (Cell(20, 0), Cell(35, 0))],
    "corridor-300": [(Cell(0, 0), Cell(299, 0)), (Cell(299, 0), Cell(0, 0)),
                     (Cell(20, 0), Cell(260, 0)), (Cell(280, 0), Cell(40, 0)),
                     (Cell(100, 0), Cell(250, 0))],
    # long-horizon pairs between cells the bundled behavior data visits often
    "maze-medium": [(Cell(1, 15), Cell(7, 3)), (Cell(7, 3), Cell(1, 15)),
                    (Cell(7, 3), Cell(11, 17)), (Cell(1, 15), Cell(17, 2)),
                    (Cell(7, 3), Cell(11, 11))],
    "maze-giant": [(Cell(7, 38), Cell(10, 5)), (Cell(10, 5), Cell(7, 38)),
                   (Cell(10, 5), Cell(18, 19)), (Cell(7, 38), Cell(34, 6)),
                   (Cell(23, 10), Cell(14, 30))],
}


def eval_tasks(maze: GridMaze, num_goals: int = 5) -> list[tuple[Cell, Cell]]:
    """Fixed (start, goal) tasks: bundled ones when known, otherwise far-apart pairs."""
    tasks = EVAL_TASKS.get(maze.layout_id)
    if tasks is not None and all(maze.is_free(s) and maze.is_free(g) for s, g in tasks):
        return tasks[:num_goals]
    return far_pairs(maze, num_goals)


def far_pairs(maze: GridMaze, count: int) -> list[tuple[Cell, Cell]]:
    """Deterministic spread of long-horizon pairs: greedy farthest-point goals,
    each paired with its farthest start."""
    d = maze.distances
    goals = [int(np.argmax(d[0]))]
    while len(goals) < min(count, maze.n_free):
        nearest = d[goals].min(axis=0)
        goals.append(int(np.argmax(nearest)))
    pairs = []
    for g in goals:
        s = int(np.argmax(d[:, g]))
        pairs.append((maze.cell_at(s), maze.cell_at(g)))
    return pairs
