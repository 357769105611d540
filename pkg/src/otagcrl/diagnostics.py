"""Value diagnostics along shortest-path trajectories.

``value`` arguments accept anything that maps index arrays to values: an
approximator with ``predict(s_idx, g_idx)``, a dense ``(F, F)`` table indexed
``[s, g]``, or a callable ``f(s_idx, g_idx)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from decimal import Decimal, getcontext, localcontext
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .maze import Cell, GridMaze, oracle_path_indices
from .value import optimal_value

PROFILE_COLUMNS = ("t", "d_star", "v_learned", "d_hat", "v_opt",
                   "v_learned_norm", "v_opt_norm", "d_hat_norm", "d_star_norm")
CONSISTENCY_COLUMNS = ("traj_id", "length", "k", "r_c")
# window length per layout; a fraction of the shortest evaluation trajectory
DIAGNOSTIC_K = {"chain-50": 5, "corridor-300": 25, "maze-medium": 10, "maze-giant": 25}


def default_k(maze: GridMaze) -> int:
    return DIAGNOSTIC_K.get(maze.layout_id, 10)


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OptimalTrajectory:
    """States of a shortest path, ending at the goal."""

    maze: GridMaze
    indices: np.ndarray
    source: str = "oracle"
    d_star: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int32)
        if idx.ndim != 1 or len(idx) < 1:
            raise DiagnosticsError("a trajectory needs at least one state")
        if self.source not in ("oracle", "recorded"):
            raise DiagnosticsError(f"source must be 'oracle' or 'recorded', got {self.source!r}")
        d = self.maze.distances[idx, idx[-1]]
        if len(idx) > 1:
            step = np.abs(np.diff(self.maze.cell_xy[idx], axis=0)).sum(axis=1)
            if np.any(step != 1):
                raise DiagnosticsError("consecutive trajectory states must be adjacent")
            if np.any(np.diff(d) >= 0):
                raise DiagnosticsError("distance to the goal must strictly decrease")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "d_star", d.astype(np.int64))

    @classmethod
    def from_cells(cls, maze: GridMaze, cells: Sequence, source: str = "recorded"):
        return cls(maze, maze.indices_of(cells), source)

    @property
    def states(self) -> list[Cell]:
        return [self.maze.cell_at(int(i)) for i in self.indices]

    @property
    def goal(self) -> Cell:
        return self.maze.cell_at(int(self.indices[-1]))

    @property
    def length(self) -> int:
        """Number of moves T (states minus one)."""
        return len(self.indices) - 1


@dataclass
class ConsistencyReport:
    ratio: float
    k_used: int
    per_step_flags: np.ndarray
    trajectory_length: int

    @property
    def consistent(self) -> int:
        return int(self.per_step_flags.sum())

    @property
    def windows(self) -> int:
        return len(self.per_step_flags)


class DistanceEstimate(NamedTuple):
    distance: object
    saturated: object


@dataclass
class ValueProfile:
    t: np.ndarray
    d_star: np.ndarray
    v_learned: np.ndarray
    d_hat: np.ndarray
    v_opt: np.ndarray
    saturated: np.ndarray
    normalized: dict
    degenerate: dict


# -- helpers -------------------------------------------------------------------

def values_along(value, traj: OptimalTrajectory) -> np.ndarray:
    """V(s_t, g) for every state of ``traj`` with g its final state."""
    s = traj.indices
    g = np.full(len(s), s[-1], dtype=np.int32)
    if hasattr(value, "predict"):
        out = value.predict(s, g)
    elif callable(value):
        out = value(s, g)
    else:
        out = np.asarray(value)[s, g]
    return np.asarray(out, dtype=np.float64).reshape(-1)


def optimal_value_table(maze: GridMaze, gamma: float) -> np.ndarray:
    return optimal_value(maze.distances, gamma)


def minmax_normalize(x) -> tuple[np.ndarray, bool]:
    """Map finite entries to [0, 1]; non-finite entries become NaN.

    A constant (or empty finite) series maps to zeros and is reported degenerate.
    """
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(x)
    out = np.full(x.shape, np.nan)
    if not finite.any():
        return np.zeros(x.shape), True
    lo, hi = x[finite].min(), x[finite].max()
    if hi == lo:
        out[finite] = 0.0
        return out, True
    out[finite] = (x[finite] - lo) / (hi - lo)
    return out, False


# -- operations ----------------------------------------------------------------

def order_consistency_ratio(value, traj: OptimalTrajectory, k: int) -> ConsistencyReport:
    """Fraction of windows t = 0..T-k where V(s_{t+k}, g) > V(s_t, g) strictly."""
    T = traj.length
    if k < 1:
        raise DiagnosticsError("k must be at least 1")
    if T < k:
        raise DiagnosticsError(f"trajectory has {T} moves, fewer than k={k}")
    v = values_along(value, traj)
    flags = v[k:] > v[:T - k + 1]
    return ConsistencyReport(float(flags.sum()) / len(flags), k, flags, T)


def advantage_sign_errors(value, traj: OptimalTrajectory, k: int) -> tuple[int, int]:
    """(windows with A^h <= 0, total windows) for k-step subgoals along ``traj``."""
    T = traj.length
    if k < 1 or T < k:
        raise DiagnosticsError(f"need 1 <= k <= T, got k={k}, T={T}")
    v = values_along(value, traj)
    advantage = v[k:] - v[:T - k + 1]
    return int(np.count_nonzero(~(advantage > 0))), T - k + 1


def advantage_sign_error_rate(value, trajs, k: int) -> float:
    """Mean over trajectories of the fraction of windows whose high-level
    advantage is not positive."""
    if isinstance(trajs, OptimalTrajectory):
        trajs = [trajs]
    if not trajs:
        raise DiagnosticsError("no trajectories given")
    consistent = []
    for traj in trajs:
        errors, windows = advantage_sign_errors(value, traj, k)
        consistent.append((windows - errors) / windows)
    return 1.0 - float(np.mean(consistent))


# the conversion argument 1 + (1-gamma) V must clear this many unit roundoffs;
# closer to zero it is rounding noise and the distance carries no information
SATURATION_ULPS = 1e4


@lru_cache(maxsize=64)
def _decimal_ln(x: Decimal, prec: int) -> Decimal:
    with localcontext() as ctx:
        ctx.prec = prec
        return x.ln()


def temporal_distance(value_at, gamma) -> DistanceEstimate:
    """Invert the discounted -1 return: log(1 + (1-gamma) V) / log(gamma).

    Values at the asymptote -1/(1-gamma), below it, or too close to it for the
    working precision to resolve give ``inf`` with ``saturated`` set. Scalars
    (float or Decimal) give scalars; arrays give arrays. Decimal inputs use the
    current decimal context, so a wide context resolves far longer distances.
    """
    if isinstance(value_at, Decimal) or isinstance(gamma, Decimal):
        gamma = Decimal(gamma)
        arg = 1 + (1 - gamma) * Decimal(value_at)
        if arg <= Decimal(SATURATION_ULPS) * Decimal(10) ** (1 - getcontext().prec):
            return DistanceEstimate(math.inf, True)
        return DistanceEstimate(arg.ln() / _decimal_ln(gamma, getcontext().prec), False)
    v = np.asarray(value_at, dtype=np.float64)
    arg = 1.0 + (1.0 - gamma) * v
    saturated = ~(arg > SATURATION_ULPS * np.finfo(np.float64).eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.log1p(np.where(saturated, 0.0, (1.0 - gamma) * v)) / math.log(gamma)
    d = np.where(saturated, np.inf, d) + 0.0
    if v.ndim == 0:
        return DistanceEstimate(float(d), bool(saturated))
    return DistanceEstimate(d, saturated)


def value_profile(value, traj: OptimalTrajectory, gamma: float) -> ValueProfile:
    T = traj.length
    v = values_along(value, traj)
    d_hat, sat = temporal_distance(v, gamma)
    v_opt = optimal_value(traj.d_star, gamma)
    series = {"v_learned": v, "v_opt": v_opt, "d_hat": d_hat,
              "d_star": traj.d_star.astype(np.float64)}
    normalized, degenerate = {}, {}
    for name, x in series.items():
        normalized[name], degenerate[name] = minmax_normalize(x)
    return ValueProfile(np.arange(T + 1), traj.d_star, v, d_hat, v_opt, sat, normalized, degenerate)


def collect_optimal_trajectories(maze: GridMaze, starts_goals, rng: np.random.Generator | None = None
                                 ) -> list[OptimalTrajectory]:
    """Shortest paths by repeated oracle subgoals. ``rng`` is accepted for
    interface symmetry; the oracle is deterministic."""
    out = []
    for s, g in starts_goals:
        si, gi = maze.index_of(s), maze.index_of(g)
        if si == gi:
            raise DiagnosticsError(f"start and goal coincide at {maze.cell_at(si)}")
        out.append(OptimalTrajectory(maze, oracle_path_indices(maze, si, gi), "oracle"))
    return out


def mean_stderr(xs) -> tuple[float, float]:
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) == 0:
        return math.nan, math.nan
    se = float(xs.std(ddof=1) / math.sqrt(len(xs))) if len(xs) > 1 else 0.0
    return float(xs.mean()), se


# -- export --------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(float(x))
    return str(x)


def write_csv(path, columns, rows, preamble: dict | None = None) -> None:
    """CSV with optional ``# key=value`` comment lines ahead of the header."""
    with open(path, "w", newline="") as fh:
        for key, val in (preamble or {}).items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def profile_rows(profile: ValueProfile):
    n = profile.normalized
    for i in range(len(profile.t)):
        yield (int(profile.t[i]), int(profile.d_star[i]), profile.v_learned[i], profile.d_hat[i],
               profile.v_opt[i], n["v_learned"][i], n["v_opt"][i], n["d_hat"][i], n["d_star"][i])


def write_profile_csv(profile: ValueProfile, path, preamble: dict | None = None) -> None:
    write_csv(path, PROFILE_COLUMNS, profile_rows(profile), preamble)


def write_consistency_csv(reports: Sequence[ConsistencyReport], path,
                          preamble: dict | None = None) -> None:
    rows = [(i, r.trajectory_length, r.k_used, r.ratio) for i, r in enumerate(reports)]
    write_csv(path, CONSISTENCY_COLUMNS, rows, preamble)
