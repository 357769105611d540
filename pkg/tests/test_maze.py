import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otagcrl.maze import (Action, Cell, GridMaze, InvalidStateError, LayoutError, BUNDLED_LAYOUTS,
                          eval_tasks, load_layout, oracle_path, oracle_subgoal, parse_layout,
                          render_layout, shortest_distance, step)


def open_maze(w=6, h=6):
    return GridMaze(w, h)


def bfs_distance(maze, s, g):
    # independent of the kernel-backed table: plain dict BFS over cells
    free = set(maze.free_cells)
    frontier, seen, d = [tuple(s)], {tuple(s)}, 0
    while frontier:
        if tuple(g) in frontier:
            return d
        nxt = []
        for x, y in frontier:
            for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0)):
                c = (x + dx, y + dy)
                if c in free and c not in seen:
                    seen.add(c)
                    nxt.append(c)
        frontier, d = nxt, d + 1
    raise AssertionError("unreachable")


# -- step ----------------------------------------------------------------------

def test_step_examples():
    m = GridMaze(3, 3)
    assert step(m, (1, 1), Action.NORTH) == Cell(1, 0)
    assert step(m, (0, 0), Action.WEST) == Cell(0, 0)
    c = parse_layout("....\n..#.")
    assert step(c, (1, 1), Action.EAST) == Cell(1, 1)


def test_u_shaped_detour():
    m = parse_layout("...\n.#.\n.#.\n.#.")
    # only way from (0,3) to (2,3) is up, across the top and down again
    assert shortest_distance(m, (0, 3), (2, 3)) == bfs_distance(m, (0, 3), (2, 3)) == 8
    m = parse_layout("...\n.#.\n.#.")
    assert shortest_distance(m, (0, 2), (2, 2)) == 6


def test_step_moves_and_blocks():
    m = parse_layout(".#.\n...")
    assert step(m, (0, 0), Action.SOUTH) == Cell(0, 1)
    assert step(m, (0, 0), Action.EAST) == Cell(0, 0)  # wall
    assert step(m, (0, 0), Action.NORTH) == Cell(0, 0)  # grid edge
    assert step(m, (2, 1), Action.STAY) == Cell(2, 1)


def test_step_rejects_wall_state():
    m = parse_layout(".#.\n...")
    with pytest.raises(InvalidStateError):
        step(m, (1, 0), Action.SOUTH)
    with pytest.raises(InvalidStateError):
        step(m, (5, 5), Action.SOUTH)


def test_slip_requires_rng_and_is_seeded():
    m = GridMaze(5, 5, slip_prob=0.5)
    with pytest.raises(ValueError):
        step(m, (2, 2), Action.EAST)
    a = [step(m, (2, 2), Action.EAST, np.random.default_rng(3)) for _ in range(5)]
    b = [step(m, (2, 2), Action.EAST, np.random.default_rng(3)) for _ in range(5)]
    assert a == b


def test_slip_prob_range():
    with pytest.raises(ValueError):
        GridMaze(3, 3, slip_prob=1.0)


# -- distances and oracle ------------------------------------------------------

def test_shortest_distance_examples():
    m = open_maze()
    assert shortest_distance(m, (0, 0), (0, 0)) == 0
    assert shortest_distance(m, (0, 0), (3, 3)) == 6
    c = load_layout("chain-50")
    assert shortest_distance(c, (0, 0), (49, 0)) == 49


def test_distance_table_matches_independent_bfs():
    m = load_layout("maze-medium")
    rng = np.random.default_rng(0)
    cells = m.free_cells
    for _ in range(40):
        s, g = cells[rng.integers(len(cells))], cells[rng.integers(len(cells))]
        assert shortest_distance(m, s, g) == bfs_distance(m, s, g)


def test_oracle_subgoal_examples():
    m = open_maze()
    assert oracle_subgoal(m, (0, 0), (0, 5)) == Cell(0, 1)
    # both (0,1) (South) and (1,0) (East) descend; East comes first in N,E,S,W
    d0 = shortest_distance(m, (0, 0), (3, 3))
    assert shortest_distance(m, (0, 1), (3, 3)) == d0 - 1
    assert shortest_distance(m, (1, 0), (3, 3)) == d0 - 1
    assert oracle_subgoal(m, (0, 0), (3, 3)) == Cell(1, 0)
    c = load_layout("corridor-300")
    assert oracle_subgoal(c, (10, 0), (11, 0)) == Cell(11, 0)


def test_oracle_tie_order_north_first():
    m = open_maze()
    # from (3,3) to (0,0): North (3,2) and West (2,3) both descend; North wins
    assert oracle_subgoal(m, (3, 3), (0, 0)) == Cell(3, 2)
    # to (5,0): North and East both descend
    assert oracle_subgoal(m, (3, 3), (5, 0)) == Cell(3, 2)
    # to (5,5): East and South; East precedes South
    assert oracle_subgoal(m, (3, 3), (5, 5)) == Cell(4, 3)


def test_oracle_subgoal_at_goal_errors():
    with pytest.raises(ValueError):
        oracle_subgoal(open_maze(), (2, 2), (2, 2))


# -- layouts -------------------------------------------------------------------

def test_parse_layout_examples():
    m = parse_layout("..\n..")
    assert (m.width, m.height, m.n_free) == (2, 2, 4)
    m = parse_layout(".#.\n...")
    assert (m.width, m.height) == (3, 2)
    assert m.walls == frozenset({Cell(1, 0)})
    with pytest.raises(LayoutError, match="disconnected"):
        parse_layout(".#.\n.#.")


@pytest.mark.parametrize("text", ["..\n.", "##\n##", "", "..\n.x"])
def test_parse_layout_rejects(text):
    with pytest.raises(LayoutError):
        parse_layout(text)


@pytest.mark.parametrize("name", BUNDLED_LAYOUTS)
def test_bundled_layouts_round_trip(name):
    m = load_layout(name)
    assert parse_layout(render_layout(m), layout_id=name) == m


def test_bundled_layout_shapes():
    assert load_layout("corridor-300").n_free == 300
    assert load_layout("chain-50").n_free == 50
    med, giant = load_layout("maze-medium"), load_layout("maze-giant")
    assert (med.width, med.height) == (21, 21)
    assert (giant.width, giant.height) == (41, 41)
    # long detours: the diameter far exceeds the Manhattan span
    assert giant.diameter > 2 * (41 + 41)


def test_unknown_layout():
    with pytest.raises(KeyError):
        load_layout("maze-huge")


@pytest.mark.parametrize("name", BUNDLED_LAYOUTS)
def test_eval_tasks_valid(name):
    m = load_layout(name)
    tasks = eval_tasks(m)
    assert len(tasks) == 5
    for s, g in tasks:
        assert shortest_distance(m, s, g) > 0


# -- properties ----------------------------------------------------------------

@st.composite
def mazes(draw):
    w = draw(st.integers(1, 7))
    h = draw(st.integers(1, 7))
    walls = draw(st.sets(st.tuples(st.integers(0, w - 1), st.integers(0, h - 1)),
                         max_size=w * h // 3))
    try:
        return GridMaze(w, h, frozenset(walls))
    except LayoutError:
        return GridMaze(w, h)


@settings(max_examples=60, deadline=None)
@given(mazes(), st.data())
def test_distance_metric_properties(m, data):
    F = m.n_free
    i, j, k = (data.draw(st.integers(0, F - 1)) for _ in range(3))
    d = m.distances
    assert (d[i, j] == 0) == (i == j)
    assert d[i, j] == d[j, i]
    assert d[i, k] <= d[i, j] + d[j, k]


@settings(max_examples=60, deadline=None)
@given(mazes(), st.data())
def test_oracle_path_length_is_distance(m, data):
    F = m.n_free
    s = m.cell_at(data.draw(st.integers(0, F - 1)))
    g = m.cell_at(data.draw(st.integers(0, F - 1)))
    path = oracle_path(m, s, g)
    assert path[0] == s and path[-1] == g
    assert len(path) - 1 == shortest_distance(m, s, g)
    for a, b in zip(path, path[1:]):
        assert abs(a.x - b.x) + abs(a.y - b.y) == 1


@settings(max_examples=60, deadline=None)
@given(mazes(), st.data())
def test_step_is_pure_without_slip(m, data):
    s = m.cell_at(data.draw(st.integers(0, m.n_free - 1)))
    a = data.draw(st.sampled_from(list(Action)))
    assert step(m, s, a) == step(m, s, a)


@settings(max_examples=60, deadline=None)
@given(mazes())
def test_render_parse_identity(m):
    assert parse_layout(render_layout(m)) == m
