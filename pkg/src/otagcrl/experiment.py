"""Config-driven runs: datasets, value training with checkpoints, policy
extraction, evaluation rollouts, diagnostics and the bundled comparison recipes.

Every file a run writes is a pure function of (resolved config, seed). Each one
carries the config hash and the seed in its header, and wall-clock time goes
to the log only.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
import multiprocessing
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .approximator import NonFiniteError, OptimizerState, load_checkpoint, save_checkpoint
from .dataset import (DEFAULT_NOISE, REGIMES, GoalSamplingConfig, OfflineDataset,
                      generate_dataset, load_dataset, sample_option_batch, save_dataset)
from .diagnostics import (collect_optimal_trajectories, default_k, mean_stderr,
                          order_consistency_ratio, value_profile, write_consistency_csv,
                          write_csv, write_profile_csv)
from .maze import BUNDLED_LAYOUTS, GridMaze, eval_tasks, load_layout, parse_layout
from .policy import (AwrConfig, ExactHighPolicy, HierarchicalAgent, OracleLow, OracleSubgoaler,
                     exact_low_policy, load_policy, mlp_high_policy, mlp_low_policy,
                     tabular_high_policy, tabular_low_policy, train_high_policy, train_low_policy)
from .value import ExpectileConfig, Objective, make_learner, value_step

log = logging.getLogger("otagcrl")

METRICS_COLUMNS = ("checkpoint", "goal_id", "rollout", "success", "episode_len")
SUMMARY_COLUMNS = ("checkpoint", "goal_id", "success_rate", "mean_episode_len", "episodes")
LOG_COLUMNS = ("step", "objective", "loss", "mean_residual", "pos_residual_frac")
COMPARISON_COLUMNS = ("variant", "seed", "success", "mean_episode_len", "r_c")
COMPARISON_SUMMARY_COLUMNS = ("variant", "seeds", "success_mean", "success_stderr",
                              "r_c_mean", "r_c_stderr")
REPRO_TARGETS = ("bottleneck", "consistency", "n-sweep", "gamma")


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration (exit status 2)."""


# -- configuration -------------------------------------------------------------

# section -> key -> (type, default). Types: str, int, float, bool, ints, floats,
# strs, opt_int, opt_float ("" or "none" means unset).
SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "run": {"seeds": ("ints", "0"), "cache_dir": ("str", ""), "log_interval": ("int", "1000")},
    "maze": {"layout": ("str", "chain-50"), "slip_prob": ("float", "0.0")},
    "dataset": {"regime": ("str", "navigate"), "num_transitions": ("int", "20000"),
                "noise": ("opt_float", ""), "segment_length": ("opt_int", ""),
                "episode_cap": ("opt_int", ""), "path": ("str", ""),
                "p_cur": ("float", "0.2"), "p_traj": ("float", "0.5"), "p_rand": ("float", "0.3"),
                "traj_geometric_discount": ("float", "1.0"), "reward_on": ("str", "state")},
    "value": {"objective": ("str", "iql"), "low_objective": ("str", "iql"),
              "approximator": ("str", "tabular"), "hidden": ("ints", "256, 256"),
              "features": ("str", "normalized-coords"), "tau": ("float", "0.7"),
              "gamma": ("float", "0.99"), "learning_rate": ("float", "0.5"),
              "batch_size": ("int", "256"), "steps": ("int", "2000"),
              "polyak_rate": ("float", "0.005"), "terminal_bootstrap_mask": ("bool", "false"),
              "init": ("str", "zero")},
    "policy": {"k": ("int", "25"), "beta_h": ("float", "3.0"), "beta_l": ("float", "3.0"),
               "weight_clip": ("float", "100.0"), "extraction": ("str", "exact"),
               "approximator": ("str", "tabular"), "hidden": ("ints", "256, 256"),
               "features": ("str", "normalized-coords"), "learning_rate": ("opt_float", ""),
               "batch_size": ("int", "256"), "steps": ("int", "2000")},
    "eval": {"num_goals": ("int", "5"), "rollouts_per_goal": ("int", "50"),
             "checkpoints": ("floats", "0.8, 0.9, 1.0"), "episode_cap": ("opt_int", ""),
             "start_radius": ("int", "2"), "high": ("str", "learned"), "low": ("str", "learned"),
             "replan_interval": ("int", "1"), "deterministic": ("bool", "true")},
    "diagnostics": {"k": ("opt_int", ""), "num_trajectories": ("int", "5")},
    "sweep": {"key": ("str", "value.objective"), "values": ("strs", ""),
              "evaluate": ("bool", "false")},
    "repro": {"objectives": ("strs", "iql"), "oracle_high": ("bool", "false"),
              "evaluate": ("bool", "true")},
}

# keys that steer where or how fast a run happens, not what it computes
UNHASHED = {("run", "seeds"), ("run", "cache_dir")}

_CHOICES = {
    ("dataset", "regime"): REGIMES,
    ("dataset", "reward_on"): ("state", "successor"),
    ("value", "approximator"): ("tabular", "mlp"),
    ("value", "features"): ("normalized-coords", "onehot-pair"),
    ("value", "init"): ("zero", "floor"),
    ("policy", "extraction"): ("exact", "awr"),
    ("policy", "approximator"): ("tabular", "mlp"),
    ("policy", "features"): ("normalized-coords", "onehot-pair"),
    ("eval", "high"): ("learned", "oracle"),
    ("eval", "low"): ("learned", "oracle"),
}


def _parse(kind: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("opt_int", "opt_float"):
            if raw.lower() in ("", "none"):
                return None
            return int(raw) if kind == "opt_int" else float(raw)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if kind == "ints":
            return tuple(int(p) for p in parts)
        if kind == "floats":
            return tuple(float(p) for p in parts)
        if kind == "strs":
            return tuple(parts)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None
    raise AssertionError(kind)


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def bundled_config(name: str) -> str:
    """Text of a bundled config (``repro_bottleneck``, ``corridor`` ...)."""
    stem = name[:-4] if name.endswith(".ini") else name
    res = resources.files("otagcrl").joinpath("configs", f"{stem}.ini")
    if not res.is_file():
        raise ConfigError(f"no bundled config named {name!r}; available: "
                          + ", ".join(bundled_config_names()))
    return res.read_text()


def bundled_config_names() -> list[str]:
    root = resources.files("otagcrl").joinpath("configs")
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


@dataclass
class EvalProtocol:
    num_goals: int = 5
    rollouts_per_goal: int = 50
    checkpoint_fractions: tuple = (0.8, 0.9, 1.0)
    episode_cap: int | None = None  # None: twice the maze diameter
    start_radius: int = 2

    def __post_init__(self):
        if self.num_goals < 1 or self.rollouts_per_goal < 1:
            raise ConfigError("num_goals and rollouts_per_goal must be positive")
        if not self.checkpoint_fractions:
            raise ConfigError("at least one checkpoint fraction is required")
        if any(not 0.0 < f <= 1.0 for f in self.checkpoint_fractions):
            raise ConfigError(f"checkpoint fractions must lie in (0, 1], got {self.checkpoint_fractions}")
        if self.episode_cap is not None and self.episode_cap < 1:
            raise ConfigError("episode_cap must be positive")
        if self.start_radius < 0:
            raise ConfigError("start_radius must be >= 0")

    def cap_for(self, maze: GridMaze) -> int:
        return self.episode_cap if self.episode_cap is not None else 2 * maze.diameter


class ExperimentConfig:
    """Resolved, validated configuration; every key has a value (default or set)."""

    def __init__(self, sections: dict[str, dict], source: str = "<defaults>"):
        self.sections = sections
        self.source = source
        self._validate()

    # construction

    @classmethod
    def from_text(cls, text: str, overrides=(), source: str = "<text>") -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from None
        raw = {sec: {key: default for key, (_, default) in keys.items()}
               for sec, keys in SCHEMA.items()}
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{sec}]; known: {', '.join(SCHEMA)}")
            for key, val in cp.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"{source}: unknown key {sec}.{key}; "
                                      f"[{sec}] takes {', '.join(SCHEMA[sec])}")
                raw[sec][key] = val
        for item in overrides:
            sec, key, val = _split_override(item)
            raw[sec][key] = val
        sections = {sec: {key: _parse(SCHEMA[sec][key][0], val, f"{sec}.{key}")
                          for key, val in keys.items()} for sec, keys in raw.items()}
        return cls(sections, source)

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        """Read ``path`` (a file, or the name of a bundled config); None gives defaults."""
        if path is None:
            return cls.from_text("", overrides, "<defaults>")
        p = Path(path)
        if p.is_file():
            return cls.from_text(p.read_text(), overrides, str(p))
        if p.suffix in ("", ".ini") and p.parent == Path("."):
            return cls.from_text(bundled_config(p.name), overrides, f"bundled:{p.name}")
        raise ConfigError(f"config file {path} does not exist")

    def with_overrides(self, overrides) -> "ExperimentConfig":
        return ExperimentConfig.from_text(self.to_ini(include_unhashed=True), overrides, self.source)

    # access

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def get(self, dotted: str):
        sec, key = dotted.split(".", 1)
        return self.sections[sec][key]

    @property
    def seeds(self) -> tuple:
        return self.sections["run"]["seeds"]

    @property
    def objective(self) -> Objective:
        return Objective.parse(self["value"]["objective"])

    @property
    def low_objective(self) -> Objective:
        return Objective.parse(self["value"]["low_objective"])

    @property
    def protocol(self) -> EvalProtocol:
        e = self["eval"]
        return EvalProtocol(e["num_goals"], e["rollouts_per_goal"], e["checkpoints"],
                            e["episode_cap"], e["start_radius"])

    def expectile(self) -> ExpectileConfig:
        v = self["value"]
        return ExpectileConfig(v["tau"], v["gamma"], v["learning_rate"], v["batch_size"],
                               v["terminal_bootstrap_mask"])

    def awr(self) -> AwrConfig:
        p = self["policy"]
        return AwrConfig(p["beta_h"], p["beta_l"], p["weight_clip"])

    def goal_sampling(self) -> GoalSamplingConfig:
        d = self["dataset"]
        return GoalSamplingConfig(d["p_cur"], d["p_traj"], d["p_rand"], d["traj_geometric_discount"])

    def maze(self) -> GridMaze:
        m = self["maze"]
        name = m["layout"]
        if name in BUNDLED_LAYOUTS:
            return load_layout(name, m["slip_prob"])
        path = Path(name)
        if not path.is_file():
            raise ConfigError(f"maze.layout {name!r} is neither bundled "
                              f"({', '.join(BUNDLED_LAYOUTS)}) nor a layout file")
        return parse_layout(path.read_text(), slip_prob=m["slip_prob"], layout_id=path.stem)

    # identity

    def to_ini(self, include_unhashed: bool = False) -> str:
        lines = []
        for sec, keys in self.sections.items():
            lines.append(f"[{sec}]")
            for key, val in keys.items():
                if include_unhashed or (sec, key) not in UNHASHED:
                    lines.append(f"{key} = {_render(val)}")
            lines.append("")
        return "\n".join(lines)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def _validate(self):
        for (sec, key), allowed in _CHOICES.items():
            if self[sec][key] not in allowed:
                raise ConfigError(f"{sec}.{key} must be one of {', '.join(allowed)}, "
                                  f"got {self[sec][key]!r}")
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("run.seeds must be non-negative")
        if self["run"]["log_interval"] < 1:
            raise ConfigError("run.log_interval must be positive")
        for key in ("objective", "low_objective"):
            try:
                Objective.parse(self["value"][key])
            except ValueError as e:
                raise ConfigError(f"value.{key}: {e}") from None
        for obj in self["repro"]["objectives"]:
            try:
                Objective.parse(obj)
            except ValueError as e:
                raise ConfigError(f"repro.objectives: {e}") from None
        try:
            self.expectile()
            self.awr()
            self.goal_sampling()
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        self.protocol  # validates
        positive = [("dataset", "num_transitions"), ("diagnostics", "k"), ("value", "steps"), ("policy", "k"),
                    ("policy", "steps"), ("policy", "batch_size"),
                    ("diagnostics", "num_trajectories"), ("eval", "replan_interval")]
        for sec, key in positive:
            if self[sec][key] is not None and self[sec][key] < 1:
                raise ConfigError(f"{sec}.{key} must be positive, got {self[sec][key]}")
        if not 0.0 < self["value"]["polyak_rate"] <= 1.0:
            raise ConfigError("value.polyak_rate must lie in (0, 1]")
        m = self["maze"]
        if m["layout"] not in BUNDLED_LAYOUTS and not Path(m["layout"]).is_file():
            raise ConfigError(f"maze.layout {m['layout']!r} is neither bundled "
                              f"({', '.join(BUNDLED_LAYOUTS)}) nor a layout file")
        if not 0.0 <= m["slip_prob"] < 1.0:
            raise ConfigError("maze.slip_prob must lie in [0, 1)")
        if self["dataset"]["path"] and not Path(self["dataset"]["path"]).is_file():
            raise ConfigError(f"dataset.path {self['dataset']['path']} does not exist")
        sweep_key = self["sweep"]["key"]
        if "." not in sweep_key or sweep_key.split(".", 1)[0] not in SCHEMA \
                or sweep_key.split(".", 1)[1] not in SCHEMA[sweep_key.split(".", 1)[0]]:
            raise ConfigError(f"sweep.key {sweep_key!r} must name a config key as section.key")


def _split_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    lhs, val = item.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    sec, key = (x.strip() for x in lhs.split(".", 1))
    if sec not in SCHEMA or key not in SCHEMA[sec]:
        raise ConfigError(f"override {item!r} names an unknown key {sec}.{key}")
    return sec, key, val


def preamble(config: ExperimentConfig, seed) -> dict:
    return {"config_hash": config.hash, "seed": seed}


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricsRecord:
    """Per-episode outcomes plus derived summaries; ``wall_clock`` is seconds."""

    checkpoint: np.ndarray
    goal_id: np.ndarray
    rollout: np.ndarray
    success: np.ndarray
    episode_len: np.ndarray
    r_c: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @classmethod
    def merge(cls, records) -> "MetricsRecord":
        records = list(records)
        cat = lambda name: np.concatenate([getattr(r, name) for r in records])
        rc = {}
        for r in records:
            rc.update(r.r_c)
        return cls(cat("checkpoint"), cat("goal_id"), cat("rollout"), cat("success"),
                   cat("episode_len"), rc, float(sum(r.wall_clock for r in records)))

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success))

    @property
    def mean_episode_len(self) -> float:
        return float(np.mean(self.episode_len))

    def per_checkpoint(self) -> dict:
        return {float(c): float(np.mean(self.success[self.checkpoint == c]))
                for c in np.unique(self.checkpoint)}

    def per_goal(self) -> dict:
        return {int(g): float(np.mean(self.success[self.goal_id == g]))
                for g in np.unique(self.goal_id)}

    def rows(self):
        for i in range(len(self.success)):
            yield (float(self.checkpoint[i]), int(self.goal_id[i]), int(self.rollout[i]),
                   int(self.success[i]), int(self.episode_len[i]))

    def summary_rows(self):
        def row(ck, gid, mask):
            return (ck, gid, float(np.mean(self.success[mask])),
                    float(np.mean(self.episode_len[mask])), int(mask.sum()))
        for c in np.unique(self.checkpoint):
            at = self.checkpoint == c
            for g in np.unique(self.goal_id):
                yield row(float(c), int(g), at & (self.goal_id == g))
            yield row(float(c), "all", at)
        yield row("all", "all", np.ones(len(self.success), dtype=bool))

    def check_finite(self, where: str) -> None:
        vals = [self.success_rate, self.mean_episode_len, *self.r_c.values()]
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteError(f"{where}: non-finite metric in {vals}")

    def write(self, out_dir, config: ExperimentConfig, seed, stem: str = "") -> None:
        out_dir = Path(out_dir)
        head = preamble(config, seed)
        write_csv(out_dir / f"metrics{stem}.csv", METRICS_COLUMNS, self.rows(), head)
        write_csv(out_dir / f"summary{stem}.csv", SUMMARY_COLUMNS, self.summary_rows(), head)


def _start_cells(maze: GridMaze, start: int, goal: int, radius: int) -> np.ndarray:
    near = np.flatnonzero(maze.distances[start] <= radius)
    near = near[near != goal]
    return near if len(near) else np.array([start])


def evaluate_agent(agent, maze: GridMaze, protocol: EvalProtocol, rng: np.random.Generator,
                   checkpoint: float = 1.0, tasks=None) -> MetricsRecord:
    """Roll out every (task, rollout) episode in lockstep.

    Rollout starts are uniform over cells within ``start_radius`` of the task
    start (never the goal itself). An episode succeeds when it occupies the goal
    cell within the cap; ``episode_len`` is the step it arrived, else the cap.
    """
    t0 = time.perf_counter()
    tasks = tasks if tasks is not None else eval_tasks(maze, protocol.num_goals)
    R = protocol.rollouts_per_goal
    starts, goals = [], []
    for s0, g in tasks:
        si, gi = maze.index_of(s0), maze.index_of(g)
        starts.append(rng.choice(_start_cells(maze, si, gi, protocol.start_radius), size=R))
        goals.append(np.full(R, gi))
    s = np.concatenate(starts).astype(np.int64)
    g = np.concatenate(goals).astype(np.int64)
    cap = protocol.cap_for(maze)
    length = np.full(len(s), cap, dtype=np.int64)
    done = s == g
    length[done] = 0
    agent.reset()
    for t in range(cap):
        if done.all():
            break
        a = np.asarray(agent.step_batch(s, g, rng), dtype=np.int64)
        if maze.slip_prob > 0.0:
            slip = rng.random(len(a)) < maze.slip_prob
            a = np.where(slip, rng.integers(0, 5, size=len(a)), a)
        s = np.where(done, s, maze.neighbors[s, a])
        arrived = ~done & (s == g)
        length[arrived] = t + 1
        done |= arrived
    n = len(s)
    return MetricsRecord(np.full(n, float(checkpoint)), np.repeat(np.arange(len(tasks)), R),
                         np.tile(np.arange(R), len(tasks)), done.astype(np.int64), length,
                         wall_clock=time.perf_counter() - t0)


# -- training ------------------------------------------------------------------

def _frac_tag(f: float) -> str:
    return f"{int(round(f * 100)):03d}"


@dataclass
class TrainedValue:
    objective: Objective
    snapshots: dict  # checkpoint fraction -> approximator
    log_rows: list

    def final(self):
        return self.snapshots[max(self.snapshots)]


def _cache_path(config: ExperimentConfig, kind: str, payload: dict) -> Path | None:
    root = config["run"]["cache_dir"]
    if not root:
        return None
    blob = json.dumps(payload, sort_keys=True, default=_render).encode()
    return Path(root) / f"{kind}-{hashlib.sha256(blob).hexdigest()[:20]}"


def _dataset_key(config: ExperimentConfig, seed: int) -> dict:
    return {"maze": config["maze"], "dataset": config["dataset"], "seed": seed}


def make_dataset(config: ExperimentConfig, maze: GridMaze, seed: int) -> OfflineDataset:
    """Load ``dataset.path`` if set, else generate from ``(config, seed)``."""
    d = config["dataset"]
    if d["path"]:
        return load_dataset(d["path"], maze)
    cached = _cache_path(config, "dataset", _dataset_key(config, seed))
    if cached is not None and (cached / "dataset.txt").is_file():
        return load_dataset(cached / "dataset.txt", maze)
    noise = d["noise"] if d["noise"] is not None else DEFAULT_NOISE[d["regime"]]
    ds = generate_dataset(maze, d["regime"], d["num_transitions"], np.random.default_rng([seed, 0]),
                          noise=noise, segment_length=d["segment_length"],
                          episode_cap=d["episode_cap"])
    if cached is not None:
        cached.mkdir(parents=True, exist_ok=True)
        tmp = cached / "dataset.tmp"
        save_dataset(ds, tmp)
        tmp.replace(cached / "dataset.txt")
    return ds


def train_value(config: ExperimentConfig, maze: GridMaze, ds: OfflineDataset,
                objective: Objective, seed: int) -> TrainedValue:
    """Expectile training with snapshots at the eval checkpoint fractions.

    The batch stream depends only on the seed, so objectives trained under the
    same seed see the same anchors and goals (and ``ota(1)`` reproduces ``iql``).
    """
    v = config["value"]
    fractions = tuple(sorted(config.protocol.checkpoint_fractions))
    steps = v["steps"]
    interval = config["run"]["log_interval"]
    key = {"maze": config["maze"], "dataset": config["dataset"], "value": dict(v),
           "objective": str(objective), "fractions": fractions, "interval": interval,
           "seed": seed}
    key["value"].pop("objective")
    key["value"].pop("low_objective")
    cached = _cache_path(config, "value", key)
    if cached is not None and (cached / "done").is_file():
        snaps = {f: load_checkpoint(cached / f"{_frac_tag(f)}.ckpt", maze)[0] for f in fractions}
        rows = [(int(r[0]), str(objective), float(r[1]), float(r[2]), float(r[3]))
                for r in json.loads((cached / "log.json").read_text())]
        return TrainedValue(objective, snaps, rows)

    ec = config.expectile()
    gc = config.goal_sampling()
    learner = make_learner(maze, ec, v["approximator"], tuple(v["hidden"]), v["features"],
                           np.random.default_rng([seed, 2]), v["polyak_rate"], init=v["init"],
                           objective=objective)
    rng = np.random.default_rng([seed, 1])
    marks = {max(1, int(round(f * steps))): f for f in fractions}
    snaps, rows, acc = {}, [], []
    for step in range(1, steps + 1):
        batch = sample_option_batch(ds, gc, objective.option_n, ec.batch_size, rng,
                                    config["dataset"]["reward_on"])
        stats = value_step(learner, batch, objective, ec)
        acc.append((stats.loss, stats.mean_residual, stats.pos_residual_frac))
        if step % interval == 0 or step == steps:
            m = np.mean(acc, axis=0)
            rows.append((step, str(objective), float(m[0]), float(m[1]), float(m[2])))
            acc = []
        if step in marks:
            snaps[marks[step]] = learner.approx.copy()
    if cached is not None:
        cached.mkdir(parents=True, exist_ok=True)
        for f, approx in snaps.items():
            save_checkpoint(approx, cached / f"{_frac_tag(f)}.ckpt")
        (cached / "log.json").write_text(json.dumps([[r[0], *r[2:]] for r in rows]))
        (cached / "done").write_text("")
    return TrainedValue(objective, snaps, rows)


def save_trained_value(tv: TrainedValue, out_dir: Path, role: str, config, seed) -> None:
    steps = config["value"]["steps"]
    for f, approx in tv.snapshots.items():
        save_checkpoint(approx, out_dir / f"value_{role}_{_frac_tag(f)}.ckpt",
                        config_hash=config.hash, seed=seed, objective=str(tv.objective),
                        step=int(round(f * steps)))
    write_csv(out_dir / f"train_log_{role}.csv", LOG_COLUMNS, tv.log_rows,
              {**preamble(config, seed), "role": role})


def load_trained_value(run_dir: Path, role: str, config: ExperimentConfig, maze) -> TrainedValue:
    snaps, obj = {}, None
    for f in config.protocol.checkpoint_fractions:
        path = run_dir / f"value_{role}_{_frac_tag(f)}.ckpt"
        if not path.is_file():
            raise FileNotFoundError(f"{path} is missing; run `otagcrl train` with the same "
                                    f"config and --out first")
        snaps[f], desc = load_checkpoint(path, maze)
        obj = Objective.parse(desc.get("objective", "iql"))
    return TrainedValue(obj, snaps, [])


# -- policies and agents -------------------------------------------------------

def _train_policies(config, maze, ds, v_high, v_low, seed: int, frac: float):
    p = config["policy"]
    awr = config.awr()
    rng = np.random.default_rng([seed, 3, int(round(frac * 100))])
    if p["approximator"] == "tabular":
        high = tabular_high_policy(maze, awr.beta_h, p["k"])
        low = tabular_low_policy(maze, awr.beta_l)
    else:
        init = np.random.default_rng([seed, 4])
        high = mlp_high_policy(maze, awr.beta_h, p["k"], tuple(p["hidden"]), p["features"], init)
        low = mlp_low_policy(maze, awr.beta_l, tuple(p["hidden"]), p["features"], init)
    kind = "sgd" if p["approximator"] == "tabular" else "adam"
    lr = p["learning_rate"]
    train_high_policy(high, ds, v_high, awr, config.goal_sampling(), p["steps"], p["batch_size"],
                      rng, OptimizerState(kind, lr) if lr else None)
    train_low_policy(low, ds, v_low, awr, p["k"], p["steps"], p["batch_size"], rng,
                     OptimizerState(kind, lr) if lr else None)
    return high, low


def build_agent(config: ExperimentConfig, maze: GridMaze, ds: OfflineDataset | None,
                v_high, v_low, high_kind: str | None = None, low_kind: str | None = None,
                policies=None) -> HierarchicalAgent:
    """Compose the evaluated agent. ``policies`` holds trained (high, low) when
    extraction is ``awr``; otherwise learned levels are solved in closed form."""
    e, p = config["eval"], config["policy"]
    high_kind = high_kind or e["high"]
    low_kind = low_kind or e["low"]
    awr = config.awr()
    if high_kind == "oracle":
        high = OracleSubgoaler(maze, p["k"])
    elif policies is not None:
        high = policies[0]
    else:
        high = ExactHighPolicy(ds, v_high, awr, p["k"])
    if low_kind == "oracle":
        low = OracleLow(maze)
    elif policies is not None:
        low = policies[1]
    else:
        low = exact_low_policy(ds, v_low, awr, p["k"])
    return HierarchicalAgent(high, low, e["replan_interval"], e["deterministic"])


def consistency(config: ExperimentConfig, maze: GridMaze, value):
    """Per-trajectory order-consistency reports on the evaluation tasks."""
    k = config["diagnostics"]["k"] or default_k(maze)
    tasks = eval_tasks(maze, config["diagnostics"]["num_trajectories"])
    trajs = collect_optimal_trajectories(maze, tasks)
    reports = [order_consistency_ratio(value, t, k) for t in trajs]
    pooled = sum(r.consistent for r in reports) / sum(r.windows for r in reports)
    log.info("r_c per-trajectory mean %.4f, pooled over windows %.4f", mean_rc(reports), pooled)
    return trajs, reports


def mean_rc(reports) -> float:
    return float(np.mean([r.ratio for r in reports]))


# -- subcommand bodies (one seed each) -----------------------------------------

def seed_dir(out: Path, seed: int) -> Path:
    d = Path(out) / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_resolved_config(config: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(f"# config_hash={config.hash}\n" + config.to_ini())


def gen_data(config: ExperimentConfig, seed: int, out: Path) -> Path:
    maze = config.maze()
    ds = make_dataset(config, maze, seed)
    path = seed_dir(out, seed) / "dataset.txt"
    save_dataset(ds, path, provenance=f"config_hash={config.hash} seed={seed}")
    return path


def train(config: ExperimentConfig, seed: int, out: Path) -> dict:
    """Dataset, high and low values (shared when the objectives agree) and,
    for ``awr`` extraction, trained policies at every checkpoint."""
    maze = config.maze()
    d = seed_dir(out, seed)
    ds = make_dataset(config, maze, seed)
    save_dataset(ds, d / "dataset.txt", provenance=f"config_hash={config.hash} seed={seed}")
    high = train_value(config, maze, ds, config.objective, seed)
    low = high if config.low_objective == config.objective else \
        train_value(config, maze, ds, config.low_objective, seed)
    save_trained_value(high, d, "high", config, seed)
    save_trained_value(low, d, "low", config, seed)
    if config["policy"]["extraction"] == "awr":
        for f in sorted(high.snapshots):
            ph, pl = _train_policies(config, maze, ds, high.snapshots[f], low.snapshots[f], seed, f)
            ph.save(d / f"policy_high_{_frac_tag(f)}.ckpt", config_hash=config.hash, seed=seed)
            pl.save(d / f"policy_low_{_frac_tag(f)}.ckpt", config_hash=config.hash, seed=seed)
    return {"seed": seed, "final_loss": high.log_rows[-1][2] if high.log_rows else math.nan}


def evaluate(config: ExperimentConfig, seed: int, out: Path) -> MetricsRecord:
    maze = config.maze()
    d = seed_dir(out, seed)
    e = config["eval"]
    needs_learned = "learned" in (e["high"], e["low"])
    ds = v_high = v_low = None
    if needs_learned:
        ds_path = d / "dataset.txt"
        if not ds_path.is_file():
            raise FileNotFoundError(f"{ds_path} is missing; run `otagcrl train` first")
        ds = load_dataset(ds_path, maze)
        v_high = load_trained_value(d, "high", config, maze)
        v_low = load_trained_value(d, "low", config, maze)
    records = []
    for f in config.protocol.checkpoint_fractions:
        policies = None
        if needs_learned and config["policy"]["extraction"] == "awr":
            policies = tuple(load_policy(d / f"policy_{lvl}_{_frac_tag(f)}.ckpt", maze)
                             for lvl in ("high", "low"))
        agent = build_agent(config, maze, ds, v_high and v_high.snapshots[f],
                            v_low and v_low.snapshots[f], policies=policies)
        rng = np.random.default_rng([seed, 5, int(round(f * 100))])
        records.append(evaluate_agent(agent, maze, config.protocol, rng, f))
    rec = MetricsRecord.merge(records)
    if v_high is not None:
        rec.r_c["high"] = mean_rc(consistency(config, maze, v_high.final())[1])
    rec.check_finite(f"eval seed {seed}")
    rec.write(d, config, seed)
    log.info("seed %d: success %.3f over %d episodes (%.1fs)", seed, rec.success_rate,
             len(rec.success), rec.wall_clock)
    return rec


def diagnose(config: ExperimentConfig, seed: int, out: Path) -> float:
    maze = config.maze()
    d = seed_dir(out, seed)
    v = load_trained_value(d, "high", config, maze).final()
    trajs, reports = consistency(config, maze, v)
    head = preamble(config, seed)
    write_consistency_csv(reports, d / "consistency.csv", head)
    gamma = v_gamma(config, Objective.parse(config["value"]["objective"]))
    for i, traj in enumerate(trajs):
        write_profile_csv(value_profile(v, traj, gamma), d / f"profile_{i}.csv", head)
    rc = mean_rc(reports)
    if not math.isfinite(rc):
        raise NonFiniteError(f"diagnose seed {seed}: non-finite r_c")
    return rc


def v_gamma(config: ExperimentConfig, objective: Objective) -> float:
    """Discount the value was trained with (the profile's distance conversion)."""
    return objective.discount(config["value"]["gamma"])


# -- comparisons (repro targets and sweeps) ------------------------------------

@dataclass
class ComparisonRow:
    variant: str
    seed: int
    success: float
    mean_episode_len: float
    r_c: float


def _variants(config: ExperimentConfig):
    r = config["repro"]
    objs = [Objective.parse(o) for o in r["objectives"]]
    out = []
    if r["oracle_high"] and r["evaluate"]:
        out.append(("oracle-high", None))
    out += [(f"learned-high:{o}", o) for o in objs]
    return out


def comparison_seed(config: ExperimentConfig, seed: int, out: Path) -> list[ComparisonRow]:
    """One seed of a comparison: every listed objective trained on one dataset;
    when evaluating, all high levels share one low level (``low_objective``)."""
    maze = config.maze()
    d = seed_dir(out, seed)
    ds = make_dataset(config, maze, seed)
    save_dataset(ds, d / "dataset.txt", provenance=f"config_hash={config.hash} seed={seed}")
    r = config["repro"]
    trained = {}
    for _, obj in _variants(config):
        if obj is not None and str(obj) not in trained:
            trained[str(obj)] = train_value(config, maze, ds, obj, seed)
            save_trained_value(trained[str(obj)], d, f"high_{_slug(str(obj))}", config, seed)
    low = None
    if r["evaluate"] and config["eval"]["low"] == "learned":
        lo = config.low_objective
        low = trained.get(str(lo)) or train_value(config, maze, ds, lo, seed)
        save_trained_value(low, d, "low", config, seed)
    rows = []
    for label, obj in _variants(config):
        rc = math.nan
        tv = trained.get(str(obj)) if obj is not None else None
        if tv is not None:
            _, reports = consistency(config, maze, tv.final())
            write_consistency_csv(reports, d / f"consistency_{_slug(label)}.csv",
                                  preamble(config, seed))
            rc = mean_rc(reports)
        success = length = math.nan
        if r["evaluate"]:
            recs = []
            for f in config.protocol.checkpoint_fractions:
                agent = build_agent(config, maze, ds, tv and tv.snapshots[f],
                                    low and low.snapshots[f],
                                    high_kind="oracle" if obj is None else "learned")
                rng = np.random.default_rng([seed, 5, int(round(f * 100))])
                recs.append(evaluate_agent(agent, maze, config.protocol, rng, f))
            rec = MetricsRecord.merge(recs)
            if obj is not None:
                rec.r_c[label] = rc
            rec.check_finite(f"{label} seed {seed}")
            rec.write(d, config, seed, stem=f"_{_slug(label)}")
            success, length = rec.success_rate, rec.mean_episode_len
        elif not math.isfinite(rc):
            raise NonFiniteError(f"{label} seed {seed}: non-finite r_c")
        log.info("seed %d %-28s success %s  r_c %s", seed, label, _fmt3(success), _fmt3(rc))
        rows.append(ComparisonRow(label, seed, success, length, rc))
    return rows


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text).strip("_")


def _fmt3(x) -> str:
    return "  -  " if not math.isfinite(x) else f"{x:.3f}"


def summarize(rows: list[ComparisonRow]) -> list[tuple]:
    out = []
    for label in dict.fromkeys(r.variant for r in rows):
        mine = [r for r in rows if r.variant == label]
        sm, se = mean_stderr([r.success for r in mine])
        rm, re_ = mean_stderr([r.r_c for r in mine])
        out.append((label, len(mine), sm, se, rm, re_))
    return out


def write_comparison(rows, config: ExperimentConfig, out: Path) -> list[tuple]:
    seeds = ";".join(str(s) for s in config.seeds)
    head = preamble(config, seeds)
    write_csv(out / "results.csv", COMPARISON_COLUMNS,
              [(r.variant, r.seed, r.success, r.mean_episode_len, r.r_c) for r in rows], head)
    table = summarize(rows)
    write_csv(out / "summary.csv", COMPARISON_SUMMARY_COLUMNS, table, head)
    return table


def format_table(table) -> str:
    lines = [f"{'variant':<30} {'seeds':>5} {'success':>16} {'r_c':>16}"]
    for label, n, sm, se, rm, re_ in table:
        succ = f"{sm:.3f} +- {se:.3f}" if math.isfinite(sm) else "-"
        rc = f"{rm:.3f} +- {re_:.3f}" if math.isfinite(rm) else "-"
        lines.append(f"{label:<30} {n:>5} {succ:>16} {rc:>16}")
    return "\n".join(lines)


# -- fan-out -------------------------------------------------------------------

def _call(job):
    fn, config_ini, source, seed, out = job
    return fn(ExperimentConfig.from_text(config_ini, source=source), seed, Path(out))


def map_seeds(fn, config: ExperimentConfig, out: Path, workers: int = 1, seeds=None) -> list:
    """``fn(config, seed, out)`` for every seed, results in seed order.

    Each seed owns its own output directory, so workers never share a file.
    """
    seeds = list(seeds if seeds is not None else config.seeds)
    jobs = [(fn, config.to_ini(include_unhashed=True), config.source, s, str(out)) for s in seeds]
    if workers <= 1 or len(jobs) == 1:
        return [_call(j) for j in jobs]
    with multiprocessing.get_context("fork").Pool(min(workers, len(jobs))) as pool:
        return pool.map(_call, jobs, chunksize=1)


def run_comparison(config: ExperimentConfig, out, workers: int = 1):
    out = Path(out)
    write_resolved_config(config, out)
    per_seed = map_seeds(comparison_seed, config, out, workers)
    rows = [r for seed_rows in per_seed for r in seed_rows]
    return rows, write_comparison(rows, config, out)


def run_bottleneck_experiment(config: ExperimentConfig, out, workers: int = 1):
    """Learned high levels against the shortest-path oracle, all over the same
    low-level checkpoint. Returns (rows, summary table)."""
    config = config.with_overrides(["repro.oracle_high=true", "repro.evaluate=true"])
    return run_comparison(config, out, workers)


def run_sweep(config: ExperimentConfig, out, workers: int = 1):
    """One train (+ eval if ``sweep.evaluate``) + diagnose per listed value of
    ``sweep.key``, each under every seed."""
    out = Path(out)
    s = config["sweep"]
    if not s["values"]:
        raise ConfigError("sweep.values is empty; list the values of "
                          f"{s['key']} to sweep, comma separated")
    write_resolved_config(config, out)
    rows = []
    for value in s["values"]:
        sub = config.with_overrides([f"{s['key']}={value}"])
        sub_out = out / _slug(f"{s['key']}={value}")
        write_resolved_config(sub, sub_out)
        map_seeds(train, sub, sub_out, workers)
        rcs = map_seeds(diagnose, sub, sub_out, workers)
        recs = map_seeds(evaluate, sub, sub_out, workers) if s["evaluate"] else [None] * len(rcs)
        for seed, rc, rec in zip(sub.seeds, rcs, recs):
            rows.append(ComparisonRow(value, seed, rec.success_rate if rec else math.nan,
                                      rec.mean_episode_len if rec else math.nan, rc))
    return rows, write_comparison(rows, config, out)
