"""Expectile TD value learning: one-step, option-aware and discount-scaled targets.

All three objectives regress ``V(s, g)`` onto ``r + gamma * Vbar(s_next, g)`` under
the asymmetric squared loss; they differ only in what ``s_next`` is (one step
ahead or the option end state) and in the discount. The reward attached to a
sample is ``-1{s != g}`` unless the batch was drawn with ``reward_on="successor"``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from .approximator import (MlpValue, NonFiniteError, OptimizerState, TabularValue, TargetCopy,
                           apply_update, sync_target)
from .dataset import ValueBatch, _rewards
from .maze import GridMaze, oracle_subgoal_indices

OBJECTIVES = ("iql", "ota", "gamma_scaled")


@dataclass(frozen=True)
class ExpectileConfig:
    tau: float = 0.7
    gamma: float = 0.99
    learning_rate: float = 3e-4
    batch_size: int = 256
    terminal_bootstrap_mask: bool = False

    def __post_init__(self):
        if not 0.5 < self.tau < 1.0:
            raise ValueError(f"expectile tau must lie in (0.5, 1), got {self.tau}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")


@dataclass(frozen=True)
class OtaConfig:
    n: int
    base: ExpectileConfig = ExpectileConfig()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"abstraction factor n must be >= 1, got {self.n}")


@dataclass(frozen=True)
class Objective:
    """Which target the value regresses on: ``iql``, ``ota(n)`` or ``gamma_scaled(n)``."""

    name: str = "iql"
    n: int = 1

    def __post_init__(self):
        if self.name not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.name!r}")
        if self.n < 1:
            raise ValueError("objective n must be >= 1")
        if self.name == "iql" and self.n != 1:
            raise ValueError("iql has no abstraction factor")

    @classmethod
    def parse(cls, text: str) -> "Objective":
        m = re.fullmatch(r"\s*(iql|ota|gamma_scaled)\s*(?:\(\s*(\d+)\s*\))?\s*", text)
        if not m:
            raise ValueError(f"cannot parse objective {text!r}; use iql, ota(n) or gamma_scaled(n)")
        return cls(m.group(1), int(m.group(2)) if m.group(2) else 1)

    def __str__(self):
        return self.name if self.name == "iql" else f"{self.name}({self.n})"

    @property
    def option_n(self) -> int:
        """Successor horizon used when sampling batches."""
        return self.n if self.name == "ota" else 1

    def discount(self, gamma: float) -> float:
        return gamma ** (1.0 / self.n) if self.name == "gamma_scaled" else gamma


# -- closed forms --------------------------------------------------------------

def expectile_loss(u, tau):
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0)) * u * u


def expectile_loss_grad(u, tau):
    u = np.asarray(u, dtype=np.float64)
    return 2.0 * np.abs(tau - (u < 0)) * u


def optimal_value(d, gamma):
    """Discounted sum of -1 rewards over ``d`` steps.

    A ``Decimal`` gamma keeps the whole computation in decimal arithmetic at the
    current context precision; float64 cannot resolve ``gamma**d`` next to 1
    once ``d`` is in the thousands.
    """
    if isinstance(gamma, Decimal):
        return -(1 - gamma ** int(d)) / (1 - gamma)
    d = np.asarray(d, dtype=np.float64)
    return np.expm1(d * np.log(gamma)) / (1.0 - gamma) + 0.0  # + 0.0 turns -0.0 into 0.0


def optimal_value_abstracted(d, n, gamma):
    """Same, counted in options of ``n`` steps: ceil(d / n) discounted -1 rewards."""
    if isinstance(gamma, Decimal):
        return optimal_value(-(-int(d) // int(n)), gamma)
    d = np.asarray(d, dtype=np.int64)
    steps = -(-d // int(n))
    return optimal_value(steps, gamma)


# -- learners ------------------------------------------------------------------

@dataclass
class LossStats:
    loss: float
    mean_residual: float
    pos_residual_frac: float


class ValueLearner:
    """Live approximator, its target copy and optimizer state.

    ``target_sync='polyak'`` averages the target after every step;
    ``'manual'`` leaves syncing to the caller (tabular sweeps).
    """

    def __init__(self, approx, optimizer: OptimizerState | None = None,
                 polyak_rate: float = 0.005, target_sync: str = "polyak"):
        if target_sync not in ("polyak", "manual"):
            raise ValueError("target_sync must be 'polyak' or 'manual'")
        self.approx = approx
        if optimizer is None:
            optimizer = OptimizerState("sgd", 0.5) if isinstance(approx, TabularValue) \
                else OptimizerState("adam", 3e-4)
        self.optimizer = optimizer
        self.target = TargetCopy(approx, polyak_rate)
        self.target_sync = target_sync
        self.steps = 0

    def sync(self, rate: float | None = None) -> None:
        sync_target(self.approx, self.target, rate)


def value_floor(objective: "Objective", gamma: float) -> float:
    """Lowest value any policy can have under the objective's discount."""
    return -1.0 / (1.0 - objective.discount(gamma))


def make_learner(maze: GridMaze, config: ExpectileConfig, kind: str = "tabular",
                 hidden=(256, 256), features: str = "normalized-coords",
                 rng: np.random.Generator | None = None, polyak_rate: float = 0.005,
                 target_sync: str = "polyak", init: str = "zero",
                 objective: "Objective | None" = None) -> ValueLearner:
    """Learner with a fresh approximator.

    ``init='floor'`` starts every ``V(s, g)`` with ``s != g`` at the pessimistic
    bound ``-1 / (1 - gamma_eff)`` (for an MLP, through the output bias) so that
    entries the data rarely touches cannot outrank well-estimated ones.
    """
    if init not in ("zero", "floor"):
        raise ValueError(f"value init must be 'zero' or 'floor', got {init!r}")
    if kind == "tabular":
        approx = TabularValue(maze)
        opt = OptimizerState("sgd", config.learning_rate)
    elif kind == "mlp":
        approx = MlpValue(maze, hidden=hidden, features=features, rng=rng)
        opt = OptimizerState("adam", config.learning_rate)
    else:
        raise ValueError(f"approximator kind must be 'tabular' or 'mlp', got {kind!r}")
    if init == "floor":
        floor = value_floor(objective or Objective(), config.gamma)
        if kind == "tabular":
            approx.values[...] = floor
            np.fill_diagonal(approx.values, 0.0)
        else:
            approx.params[-1] += floor
    return ValueLearner(approx, opt, polyak_rate, target_sync)


def _td_step(learner: ValueLearner, batch: ValueBatch, gamma: float, tau: float,
             mask_terminal: bool) -> LossStats:
    approx = learner.approx
    if isinstance(approx, MlpValue):
        v = approx.predict_for_grad(batch.states, batch.goals)
    else:
        v = approx.predict(batch.states, batch.goals)
    bootstrap = gamma * learner.target.predict(batch.successors, batch.goals)
    if mask_terminal:
        bootstrap = bootstrap * (batch.states != batch.goals)
    u = batch.rewards + bootstrap - v
    w = np.where(u < 0, 1.0 - tau, tau)
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.mean(w * u * u))
    if not math.isfinite(loss):
        fin_v, fin_u = np.abs(v[np.isfinite(v)]), np.abs(u[np.isfinite(u)])
        raise NonFiniteError(
            f"non-finite value loss at step {learner.steps}: "
            f"{np.count_nonzero(~np.isfinite(u))} of {len(u)} residuals non-finite, "
            f"max finite |V|={fin_v.max() if len(fin_v) else math.nan:.3g}, "
            f"max finite |u|={fin_u.max() if len(fin_u) else math.nan:.3g}; "
            f"lower the learning rate or check the batch rewards")
    upstream = -2.0 * w * u / len(u)
    if isinstance(approx, MlpValue):
        grad = approx.backward(upstream)
    else:
        grad = approx.gradient(batch.states, batch.goals, upstream)
    apply_update(approx, grad, learner.optimizer)
    learner.steps += 1
    if learner.target_sync == "polyak":
        learner.sync()
    return LossStats(loss, float(np.mean(u)), float(np.mean(u > 0)))


def iql_value_step(learner: ValueLearner, batch: ValueBatch, config: ExpectileConfig) -> LossStats:
    """One step on the one-step expectile TD loss."""
    return _td_step(learner, batch, config.gamma, config.tau, config.terminal_bootstrap_mask)


def ota_value_step(learner: ValueLearner, batch: ValueBatch, config: OtaConfig) -> LossStats:
    """One step on the option-aware loss; ``batch`` must come from
    ``sample_option_batch`` with the same ``n``."""
    base = config.base
    return _td_step(learner, batch, base.gamma, base.tau, base.terminal_bootstrap_mask)


def gamma_scaled_value_step(learner: ValueLearner, batch: ValueBatch, n: int,
                            config: ExpectileConfig) -> LossStats:
    """One-step loss with the discount raised to ``gamma ** (1/n)``."""
    return _td_step(learner, batch, config.gamma ** (1.0 / n), config.tau,
                    config.terminal_bootstrap_mask)


def value_step(learner: ValueLearner, batch: ValueBatch, objective: Objective,
               config: ExpectileConfig) -> LossStats:
    if objective.name == "iql":
        return iql_value_step(learner, batch, config)
    if objective.name == "ota":
        return ota_value_step(learner, batch, OtaConfig(objective.n, config))
    return gamma_scaled_value_step(learner, batch, objective.n, config)


# -- exact solutions -----------------------------------------------------------

def tabular_fixed_point(maze: GridMaze, objective: Objective | str, config: ExpectileConfig,
                        tol: float = 1e-10, max_iter: int | None = None) -> TabularValue:
    """Synchronous value iteration on the deterministic maze.

    iql / gamma_scaled back up the best one-step successor; ota(n) backs up the
    best cell reachable within ``n`` moves (the goal absorbs). Reward ``-1{s != g}``.
    """
    if isinstance(objective, str):
        objective = Objective.parse(objective)
    F = maze.n_free
    if F > 2500:
        raise ValueError(f"tabular_fixed_point is limited to 2500 free cells, maze has {F}")
    gamma = objective.discount(config.gamma)
    hops = objective.option_n
    nbr = maze.neighbors
    r = -(1.0 - np.eye(F))
    V = np.zeros((F, F))
    if max_iter is None:
        max_iter = 10 * (maze.diameter + 2) + 1000
    for _ in range(max_iter):
        M = V
        for _ in range(hops):
            M = M[nbr].max(axis=1)
        V_new = r + gamma * M
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        if delta < tol:
            out = TabularValue(maze)
            out.values = V
            return out
    raise RuntimeError(f"value iteration did not reach tolerance {tol} in {max_iter} sweeps")


def exhaustive_batch(maze: GridMaze, n: int = 1, reward_on: str = "state") -> ValueBatch:
    """Every (s, g) pair once, with the successor taken ``n`` oracle moves along a
    shortest path (stopping at the goal; Stay at the goal)."""
    F = maze.n_free
    s = np.repeat(np.arange(F, dtype=np.int32), F)
    g = np.tile(np.arange(F, dtype=np.int32), F)
    succ = oracle_subgoal_indices(maze, s, g, n)
    return ValueBatch(s, succ, g, _rewards(s, succ, g, reward_on))


def train_tabular_exhaustive(maze: GridMaze, objective: Objective | str, config: ExpectileConfig,
                             max_sweeps: int = 20000, tol: float = 1e-12):
    """Fit a tabular value with the sampled-update machinery on exhaustive batches,
    hard-syncing the target after every sweep, until the table stops moving.

    Returns ``(learner, sweeps)``.
    """
    if isinstance(objective, str):
        objective = Objective.parse(objective)
    learner = ValueLearner(TabularValue(maze), OptimizerState("sgd", config.learning_rate),
                           polyak_rate=1.0, target_sync="manual")
    batch = exhaustive_batch(maze, objective.option_n)
    for sweep in range(1, max_sweeps + 1):
        before = learner.approx.values.copy()
        value_step(learner, batch, objective, config)
        learner.sync(1.0)
        if np.max(np.abs(learner.approx.values - before)) < tol:
            return learner, sweep
    raise RuntimeError(f"tabular training did not settle within {max_sweeps} sweeps")
