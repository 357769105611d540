"""Offline trajectory datasets: generation, persistence and batch sampling.

A dataset keeps its trajectories flattened into one array of state indices
(``obs``) so every sampler works on positions into that array. Position ``t`` is
a valid anchor when it is not the final state of its trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .maze import ACTION_LETTERS, Action, Cell, GridMaze, load_layout, BUNDLED_LAYOUTS

REGIMES = ("navigate", "stitch", "explore")
DEFAULT_NOISE = {"navigate": 0.2, "stitch": 0.2, "explore": 0.8}
_REGIME_CODE = {"navigate": 0, "stitch": 1, "explore": 2}
HEADER = "OTAGCRL-DATASET v1"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    state: Cell
    action: Action
    next_state: Cell


@dataclass(eq=False)
class Trajectory:
    """States ``s_0..s_T`` (free-cell indices), actions ``a_0..a_{T-1}`` and the
    goal the behavior policy was heading for."""

    states: np.ndarray
    actions: np.ndarray
    behavior_tag: str
    goal: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int32)
        self.actions = np.asarray(self.actions, dtype=np.int8)
        if len(self.actions) < 1:
            raise DatasetError("trajectory needs at least one transition")
        if len(self.states) != len(self.actions) + 1:
            raise DatasetError("trajectory must hold one more state than actions")
        if self.behavior_tag not in REGIMES:
            raise DatasetError(f"unknown behavior tag {self.behavior_tag!r}")

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.behavior_tag == other.behavior_tag and self.goal == other.goal
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions))

    def transitions(self, maze: GridMaze) -> list[Transition]:
        return [Transition(maze.cell_at(int(s)), Action(int(a)), maze.cell_at(int(s2)))
                for s, a, s2 in zip(self.states[:-1], self.actions, self.states[1:])]


class OfflineDataset:
    def __init__(self, maze: GridMaze, trajectories: list[Trajectory]):
        if not trajectories:
            raise DatasetError("dataset has no trajectories")
        self.maze = maze
        self.trajectories = list(trajectories)
        F = maze.n_free
        lengths = np.array([len(tr) for tr in self.trajectories], dtype=np.int64)
        self.obs = np.concatenate([tr.states for tr in self.trajectories]).astype(np.int32)
        if self.obs.min() < 0 or self.obs.max() >= F:
            raise DatasetError("dataset holds states outside the maze")
        starts = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]])
        ends = starts + lengths
        self.traj_start = starts
        self.traj_final = ends
        self.final_pos = np.repeat(ends, lengths + 1)
        self.traj_of = np.repeat(np.arange(len(lengths), dtype=np.int32), lengths + 1)
        is_final = np.zeros(len(self.obs), dtype=bool)
        is_final[ends] = True
        self.valid_pos = np.flatnonzero(~is_final).astype(np.int64)
        self.act = np.full(len(self.obs), -1, dtype=np.int8)
        self.act[self.valid_pos] = np.concatenate([tr.actions for tr in self.trajectories])
        self.total_transitions = int(lengths.sum())
        nxt = self.obs[self.valid_pos + 1]
        ok = (maze.neighbors[self.obs[self.valid_pos]] == nxt[:, None]).any(axis=1)
        if not ok.all():
            bad = int(self.valid_pos[np.argmin(ok)])
            raise DatasetError(f"transition at position {bad} is not a single maze move")

    def __len__(self):
        return self.total_transitions

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return self.maze == other.maze and self.trajectories == other.trajectories

    def __repr__(self):
        return (f"OfflineDataset({self.maze.layout_id!r}, trajectories={len(self.trajectories)}, "
                f"transitions={self.total_transitions})")

    def position(self, traj: int, t: int) -> int:
        if not 0 <= t <= len(self.trajectories[traj]):
            raise IndexError(f"step {t} outside trajectory {traj}")
        return int(self.traj_start[traj] + t)

    def state_counts(self) -> np.ndarray:
        return np.bincount(self.obs, minlength=self.maze.n_free)


# -- generation ----------------------------------------------------------------

def generate_dataset(maze: GridMaze, regime: str, num_transitions: int, rng: np.random.Generator,
                     noise: float | None = None, segment_length: int | None = None,
                     episode_cap: int | None = None) -> OfflineDataset:
    """Collect whole behavior episodes until at least ``num_transitions`` are stored.

    navigate: noisy shortest-path expert toward a uniform goal, ending at the goal
    or ``episode_cap``. stitch: the same expert cut at ``segment_length``.
    explore: uniform-random actions with a per-episode drift direction.
    """
    if regime not in REGIMES:
        raise DatasetError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if num_transitions < 1:
        raise DatasetError("num_transitions must be at least 1")
    noise = DEFAULT_NOISE[regime] if noise is None else float(noise)
    if not 0.0 <= noise < 1.0:
        raise DatasetError(f"noise must lie in [0, 1), got {noise}")
    F = maze.n_free
    if episode_cap is None:
        episode_cap = max(1, 2 * maze.diameter)
    if regime == "stitch":
        cap = segment_length if segment_length is not None else max(1, round(0.2 * episode_cap))
    else:
        cap = episode_cap
    if cap < 1:
        raise DatasetError("episode length cap must be at least 1")
    if regime != "explore" and F < 2:
        raise DatasetError("goal-directed regimes need at least two free cells")

    nbr = np.ascontiguousarray(maze.neighbors)
    oracle = maze.oracle_actions if regime != "explore" else None
    no_goal = np.zeros(F, dtype=np.int8)
    mode = _REGIME_CODE[regime]
    buf_s = np.empty(cap + 1, dtype=np.int32)
    buf_a = np.empty(cap, dtype=np.int8)
    trajectories = []
    total = 0
    while total < num_transitions:
        start = int(rng.integers(F))
        if regime == "explore":
            goal = -1
            drift = int(rng.integers(4))
            toward = no_goal
        else:
            goal = int((start + 1 + rng.integers(F - 1)) % F)
            drift = 0
            toward = oracle[goal]
        seed = int(rng.integers(0, 2**64, dtype=np.uint64))
        T = kernels.run_episode(nbr, toward, start, goal, mode, drift, cap, noise,
                                maze.slip_prob, seed, buf_s, buf_a)
        # a stay-only explore episode of length >= 1 is still a valid trajectory
        states = buf_s[:T + 1].copy()
        trajectories.append(Trajectory(states, buf_a[:T].copy(), regime,
                                       goal if goal >= 0 else int(states[-1])))
        total += T
    return OfflineDataset(maze, trajectories)


# -- goal sampling -------------------------------------------------------------

@dataclass(frozen=True)
class GoalSamplingConfig:
    """Mixture over current-state, same-trajectory-future and uniform-dataset goals."""

    p_cur: float = 0.2
    p_traj: float = 0.5
    p_rand: float = 0.3
    traj_geometric_discount: float = 1.0

    def __post_init__(self):
        w = (self.p_cur, self.p_traj, self.p_rand)
        if min(w) < 0 or not math.isclose(sum(w), 1.0, abs_tol=1e-9):
            raise ValueError(f"goal weights must be nonnegative and sum to 1, got {w}")
        if not 0.0 < self.traj_geometric_discount <= 1.0:
            raise ValueError("traj_geometric_discount must lie in (0, 1]")


def _goal_positions(ds: OfflineDataset, anchors: np.ndarray, config: GoalSamplingConfig,
                    rng: np.random.Generator) -> np.ndarray:
    B = len(anchors)
    u = rng.random(B)
    r = rng.random(B)
    rand_pos = rng.integers(len(ds.obs), size=B)
    span = ds.final_pos[anchors] - anchors
    if config.traj_geometric_discount >= 1.0:
        offset = 1 + np.floor(r * span).astype(np.int64)
    else:
        offset = 1 + np.floor(np.log1p(-r) / math.log(config.traj_geometric_discount)).astype(np.int64)
    offset = np.minimum(offset, span)
    traj_pos = anchors + offset
    return np.where(u < config.p_cur, anchors,
                    np.where(u < config.p_cur + config.p_traj, traj_pos, rand_pos))


def _anchors(ds: OfflineDataset, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if ds.total_transitions == 0:
        raise DatasetError("cannot sample from an empty dataset")
    return ds.valid_pos[rng.integers(len(ds.valid_pos), size=batch_size)]


def sample_goal(ds: OfflineDataset, anchor, config: GoalSamplingConfig,
                rng: np.random.Generator) -> Cell:
    """Goal for one anchor, given as a flat position or a ``(trajectory, step)`` pair."""
    pos = ds.position(*anchor) if isinstance(anchor, tuple) else int(anchor)
    if not 0 <= pos < len(ds.obs):
        raise IndexError(f"anchor position {pos} outside the dataset")
    gpos = _goal_positions(ds, np.array([pos], dtype=np.int64), config, rng)
    return ds.maze.cell_at(int(ds.obs[gpos[0]]))


# -- batches -------------------------------------------------------------------

def _rewards(states, successors, goals, reward_on: str) -> np.ndarray:
    if reward_on == "state":
        return -(states != goals).astype(np.float64)
    if reward_on == "successor":
        return -(successors != goals).astype(np.float64)
    raise ValueError(f"reward_on must be 'state' or 'successor', got {reward_on!r}")


@dataclass
class ValueBatch:
    """Bootstrapped regression inputs; ``successors`` are one-step or option ends."""

    states: np.ndarray
    successors: np.ndarray
    goals: np.ndarray
    rewards: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.states)

    def entries(self, maze: GridMaze):
        return [(maze.cell_at(int(s)), maze.cell_at(int(s2)), maze.cell_at(int(g)), float(r))
                for s, s2, g, r in zip(self.states, self.successors, self.goals, self.rewards)]


@dataclass
class HighBatch:
    states: np.ndarray
    subgoals: np.ndarray
    goals: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.states)


@dataclass
class LowBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    subgoals: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.states)


def sample_value_batch(ds: OfflineDataset, config: GoalSamplingConfig, batch_size: int,
                       rng: np.random.Generator, reward_on: str = "state") -> ValueBatch:
    anchors = _anchors(ds, batch_size, rng)
    goals = ds.obs[_goal_positions(ds, anchors, config, rng)]
    s, s2 = ds.obs[anchors], ds.obs[anchors + 1]
    return ValueBatch(s, s2, goals, _rewards(s, s2, goals, reward_on))


def sample_option_batch(ds: OfflineDataset, config: GoalSamplingConfig, n: int, batch_size: int,
                        rng: np.random.Generator, reward_on: str = "state") -> ValueBatch:
    """Like ``sample_value_batch`` (same random draws) but the successor is the
    option end: the goal if it is hit within ``n`` steps, else ``s_{t+n}``,
    both clipped to the trajectory's final state."""
    if n < 1:
        raise ValueError("abstraction factor n must be >= 1")
    anchors = _anchors(ds, batch_size, rng)
    goals = ds.obs[_goal_positions(ds, anchors, config, rng)]
    end = kernels.option_successors(ds.obs, ds.final_pos, anchors, goals, int(n))
    s, s2 = ds.obs[anchors], ds.obs[end]
    return ValueBatch(s, s2, goals, _rewards(s, s2, goals, reward_on))


def sample_high_batch(ds: OfflineDataset, config: GoalSamplingConfig, k: int, batch_size: int,
                      rng: np.random.Generator) -> HighBatch:
    if k < 1:
        raise ValueError("subgoal steps k must be >= 1")
    anchors = _anchors(ds, batch_size, rng)
    goals = ds.obs[_goal_positions(ds, anchors, config, rng)]
    sub = np.minimum(anchors + k, ds.final_pos[anchors])
    return HighBatch(ds.obs[anchors], ds.obs[sub], goals)


def sample_low_batch(ds: OfflineDataset, k: int, batch_size: int,
                     rng: np.random.Generator) -> LowBatch:
    if k < 1:
        raise ValueError("subgoal steps k must be >= 1")
    anchors = _anchors(ds, batch_size, rng)
    sub = np.minimum(anchors + k, ds.final_pos[anchors])
    return LowBatch(ds.obs[anchors], ds.act[anchors].astype(np.int64),
                    ds.obs[anchors + 1], ds.obs[sub])


# -- persistence ---------------------------------------------------------------

def save_dataset(ds: OfflineDataset, path, provenance: str | None = None) -> None:
    maze = ds.maze
    xy = maze.cell_xy
    tags = [tr.behavior_tag for tr in ds.trajectories]
    lines = [f"{HEADER} {maze.layout_id} {maze.width} {maze.height}"]
    if provenance:
        lines.append(f"# {provenance}")
    lines.append("# behavior=" + (tags[0] if len(set(tags)) == 1 else ",".join(tags)))
    for tr in ds.trajectories:
        parts = [f"{xy[s, 0]}:{xy[s, 1]}:{ACTION_LETTERS[a]}"
                 for s, a in zip(tr.states[:-1].tolist(), tr.actions.tolist())]
        last = tr.states[-1]
        parts.append(f"{xy[last, 0]}:{xy[last, 1]}")
        lines.append(",".join(parts) + f"|{xy[tr.goal, 0]}:{xy[tr.goal, 1]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, maze: GridMaze | None = None) -> OfflineDataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith(HEADER + " "):
        raise DatasetError(f"{path}: missing '{HEADER}' header")
    fields = lines[0].split()
    if len(fields) != 5:
        raise DatasetError(f"{path}: malformed header {lines[0]!r}")
    layout_id, width, height = fields[2], int(fields[3]), int(fields[4])
    if maze is None:
        if layout_id not in BUNDLED_LAYOUTS:
            raise DatasetError(f"{path}: layout {layout_id!r} is not bundled; pass the maze")
        maze = load_layout(layout_id)
    if (maze.layout_id, maze.width, maze.height) != (layout_id, width, height):
        raise DatasetError(
            f"{path}: dataset was recorded on {layout_id} {width}x{height}, "
            f"not {maze.layout_id} {maze.width}x{maze.height}")
    tags = None
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("# behavior="):
                tags = line[len("# behavior="):].split(",")
            continue
        rows.append((lineno, line))
    if tags is None:
        raise DatasetError(f"{path}: missing '# behavior=' line")
    if len(tags) == 1:
        tags = tags * len(rows)
    if len(tags) != len(rows):
        raise DatasetError(f"{path}: {len(tags)} behavior tags for {len(rows)} trajectories")
    trajectories = []
    for (lineno, line), tag in zip(rows, tags):
        try:
            body, goal = line.split("|")
            parts = body.split(",")
            states, actions = [], []
            for p in parts[:-1]:
                x, y, a = p.split(":")
                states.append(maze.index_of((int(x), int(y))))
                actions.append(Action.from_letter(a))
            x, y = parts[-1].split(":")
            states.append(maze.index_of((int(x), int(y))))
            gx, gy = goal.split(":")
            trajectories.append(Trajectory(states, actions, tag, maze.index_of((int(gx), int(gy)))))
        except (ValueError, IndexError) as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return OfflineDataset(maze, trajectories)
