"""Advantage-weighted policy extraction and hierarchical composition.

The high level scores every free cell as a candidate subgoal for ``(s, g)``; the
low level scores the five moves for ``(s, w)``. Both are categorical, so a
policy is a scorer returning logits plus an inverse temperature.

Besides gradient steps on the weighted log-likelihood, tabular policies can be
fitted in closed form: with a tabular scorer the AWR objective is maximized by
the weight-normalized empirical distribution over what the data did.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .approximator import (MlpValue, NonFiniteError, OptimizerState, TabularValue, apply_update,
                           save_checkpoint, load_checkpoint)
from .dataset import (GoalSamplingConfig, HighBatch, LowBatch, OfflineDataset, sample_high_batch,
                      sample_low_batch, _anchors, _goal_positions)
from .maze import NUM_ACTIONS, Action, GridMaze, oracle_subgoal_indices

STAY = int(Action.STAY)


@dataclass(frozen=True)
class AwrConfig:
    beta_h: float = 3.0
    beta_l: float = 3.0
    weight_clip: float = 100.0

    def __post_init__(self):
        if self.beta_h <= 0 or self.beta_l <= 0:
            raise ValueError("inverse temperatures must be positive")
        if self.weight_clip < 1:
            raise ValueError("weight_clip must be at least 1")


@dataclass
class PolicyStats:
    loss: float
    mean_weight: float
    clipped_frac: float


# -- advantages and weights ----------------------------------------------------

def _values(value, s, g) -> np.ndarray:
    if hasattr(value, "predict"):
        return np.asarray(value.predict(s, g), dtype=np.float64)
    if callable(value):
        return np.asarray(value(s, g), dtype=np.float64)
    return np.asarray(value)[s, g]


def _as_index(maze, x):
    if maze is not None and isinstance(x, tuple):
        return maze.index_of(x)
    return np.asarray(x)


def high_advantage(value_h, s_t, s_tk, g):
    """V(s_{t+k}, g) - V(s_t, g). Cells or index arrays."""
    maze = getattr(value_h, "maze", None)
    s_t, s_tk, g = (_as_index(maze, x) for x in (s_t, s_tk, g))
    scalar = np.ndim(s_t) == 0
    s_t, s_tk, g = (np.atleast_1d(x) for x in (s_t, s_tk, g))
    adv = _values(value_h, s_tk, g) - _values(value_h, s_t, g)
    return float(adv[0]) if scalar else adv


def low_advantage(value_l, s_t, s_t1, s_tk):
    """V(s_{t+1}, w) - V(s_t, w) with the subgoal ``w = s_{t+k}`` as the goal."""
    return high_advantage(value_l, s_t, s_t1, s_tk)


def awr_weights(advantage, beta: float, clip: float) -> np.ndarray:
    """min(exp(beta * A), clip), evaluated without overflow."""
    x = beta * np.asarray(advantage, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite advantage in AWR weights")
    return np.minimum(np.exp(np.minimum(x, math.log(clip))), clip)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- policies ------------------------------------------------------------------

class _CategoricalPolicy:
    role = "policy"

    def __init__(self, scorer, beta: float):
        if beta <= 0:
            raise ValueError("inverse temperature must be positive")
        self.scorer = scorer
        self.beta = float(beta)
        self.maze = scorer.maze

    def logits(self, s_idx, c_idx) -> np.ndarray:
        out = np.asarray(self.scorer.predict(s_idx, c_idx), dtype=np.float64)
        return out.reshape(len(np.atleast_1d(s_idx)), -1)

    def probs(self, s_idx, c_idx) -> np.ndarray:
        return np.exp(_log_softmax(self.logits(s_idx, c_idx)))

    def choose(self, s_idx, c_idx, rng: np.random.Generator | None = None,
               deterministic: bool = True) -> np.ndarray:
        s_idx = np.atleast_1d(np.asarray(s_idx))
        c_idx = np.atleast_1d(np.asarray(c_idx))
        logits = self.logits(s_idx, c_idx)
        if deterministic:
            return logits.argmax(axis=1)
        if rng is None:
            raise ValueError("stochastic action selection needs a random generator")
        p = np.exp(_log_softmax(logits))
        u = rng.random(len(p))[:, None]
        return np.minimum((p.cumsum(axis=1) < u).sum(axis=1), p.shape[1] - 1)

    def save(self, path, **extra) -> None:
        self.scorer.role = self.role
        save_checkpoint(self.scorer, path, beta=repr(self.beta), **extra)


class HighPolicy(_CategoricalPolicy):
    """Logits over all free cells as the subgoal for (s, g)."""

    role = "high_policy"

    def __init__(self, scorer, beta_h: float, k: int):
        super().__init__(scorer, beta_h)
        if scorer.out_dim != scorer.maze.n_free:
            raise ValueError("a high-level scorer needs one logit per free cell")
        if k < 1:
            raise ValueError("subgoal horizon k must be >= 1")
        self.k = int(k)

    def subgoals(self, s_idx, g_idx, rng=None, deterministic=True) -> np.ndarray:
        return self.choose(s_idx, g_idx, rng, deterministic).astype(np.int32)

    def save(self, path, **extra) -> None:
        super().save(path, k=self.k, **extra)


class LowPolicy(_CategoricalPolicy):
    """Logits over the five moves for (s, subgoal)."""

    role = "low_policy"

    def __init__(self, scorer, beta_l: float):
        super().__init__(scorer, beta_l)
        if scorer.out_dim != NUM_ACTIONS:
            raise ValueError(f"a low-level scorer needs {NUM_ACTIONS} logits")

    def actions(self, s_idx, w_idx, rng=None, deterministic=True) -> np.ndarray:
        a = self.choose(s_idx, w_idx, rng, deterministic)
        a[np.asarray(s_idx) == np.asarray(w_idx)] = STAY
        return a


def tabular_high_policy(maze: GridMaze, beta_h: float, k: int) -> HighPolicy:
    return HighPolicy(TabularValue(maze, out_dim=maze.n_free, role=HighPolicy.role), beta_h, k)


def tabular_low_policy(maze: GridMaze, beta_l: float) -> LowPolicy:
    return LowPolicy(TabularValue(maze, out_dim=NUM_ACTIONS, role=LowPolicy.role), beta_l)


def mlp_high_policy(maze, beta_h, k, hidden=(256, 256), features="normalized-coords", rng=None):
    return HighPolicy(MlpValue(maze, hidden, features, out_dim=maze.n_free, rng=rng,
                               role=HighPolicy.role), beta_h, k)


def mlp_low_policy(maze, beta_l, hidden=(256, 256), features="normalized-coords", rng=None):
    return LowPolicy(MlpValue(maze, hidden, features, out_dim=NUM_ACTIONS, rng=rng,
                              role=LowPolicy.role), beta_l)


def default_optimizer(policy) -> OptimizerState:
    if isinstance(policy.scorer, TabularValue):
        return OptimizerState("sgd", 1.0)
    return OptimizerState("adam", 3e-4)


def load_policy(path, maze: GridMaze | None = None):
    scorer, desc = load_checkpoint(path, maze)
    role = desc.get("role")
    if role == HighPolicy.role:
        return HighPolicy(scorer, float(desc["beta"]), int(desc["k"]))
    if role in (LowPolicy.role, "flat_policy"):
        pol = LowPolicy(scorer, float(desc["beta"]))
        pol.role = role
        return pol
    raise ValueError(f"{path}: role {role!r} is not a policy")


# -- gradient steps ------------------------------------------------------------

def _weighted_nll_step(policy: _CategoricalPolicy, s, c, target, weights,
                       optimizer: OptimizerState, clip: float) -> PolicyStats:
    scorer = policy.scorer
    B = len(s)
    if isinstance(scorer, MlpValue):
        logits = scorer.predict_for_grad(s, c).reshape(B, -1)
    else:
        logits = scorer.predict(s, c).reshape(B, -1)
    logp = _log_softmax(logits)
    picked = logp[np.arange(B), target]
    loss = float(-np.mean(weights * picked))
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite AWR loss")
    upstream = np.exp(logp) * weights[:, None]
    upstream[np.arange(B), target] -= weights
    upstream /= B
    if isinstance(scorer, MlpValue):
        grad = scorer.backward(upstream)
    else:
        grad = scorer.gradient(s, c, upstream)
    apply_update(scorer, grad, optimizer)
    return PolicyStats(loss, float(weights.mean()), float(np.mean(weights >= clip)))


def awr_high_step(policy: HighPolicy, batch: HighBatch, value_h, config: AwrConfig,
                  optimizer: OptimizerState | None = None) -> PolicyStats:
    """One descent step on -E[min(exp(beta_h A^h), clip) log pi^h(s_{t+k} | s_t, g)]."""
    optimizer = optimizer if optimizer is not None else policy.__dict__.setdefault(
        "_opt", default_optimizer(policy))
    adv = high_advantage(value_h, batch.states, batch.subgoals, batch.goals)
    w = awr_weights(adv, config.beta_h, config.weight_clip)
    return _weighted_nll_step(policy, batch.states, batch.goals, batch.subgoals, w, optimizer,
                              config.weight_clip)


def awr_low_step(policy: LowPolicy, batch: LowBatch, value_l, config: AwrConfig,
                 optimizer: OptimizerState | None = None) -> PolicyStats:
    """One descent step on -E[min(exp(beta_l A^l), clip) log pi^l(a_t | s_t, s_{t+k})]."""
    optimizer = optimizer if optimizer is not None else policy.__dict__.setdefault(
        "_opt", default_optimizer(policy))
    adv = low_advantage(value_l, batch.states, batch.next_states, batch.subgoals)
    w = awr_weights(adv, config.beta_l, config.weight_clip)
    return _weighted_nll_step(policy, batch.states, batch.subgoals,
                              np.asarray(batch.actions, dtype=np.int64), w, optimizer,
                              config.weight_clip)


def sample_flat_batch(ds: OfflineDataset, config: GoalSamplingConfig, batch_size: int,
                      rng: np.random.Generator) -> LowBatch:
    """Low-level batch with the final goal standing in for the subgoal."""
    anchors = _anchors(ds, batch_size, rng)
    goals = ds.obs[_goal_positions(ds, anchors, config, rng)]
    return LowBatch(ds.obs[anchors], ds.act[anchors].astype(np.int64), ds.obs[anchors + 1], goals)


def flat_awr_baseline(value, dataset: OfflineDataset, config: AwrConfig,
                      goal_config: GoalSamplingConfig = GoalSamplingConfig(), steps: int = 1000,
                      batch_size: int = 256, rng: np.random.Generator | None = None,
                      policy: LowPolicy | None = None,
                      optimizer: OptimizerState | None = None) -> LowPolicy:
    """Single-level pi(a | s, g) trained with A = V(s', g) - V(s, g)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if policy is None:
        policy = tabular_low_policy(dataset.maze, config.beta_l)
    policy.role = "flat_policy"
    optimizer = optimizer if optimizer is not None else default_optimizer(policy)
    for _ in range(steps):
        awr_low_step(policy, sample_flat_batch(dataset, goal_config, batch_size, rng), value,
                     config, optimizer)
    return policy


def train_low_policy(policy: LowPolicy, dataset: OfflineDataset, value_l, config: AwrConfig,
                     k: int, steps: int, batch_size: int, rng: np.random.Generator,
                     optimizer: OptimizerState | None = None) -> list[PolicyStats]:
    optimizer = optimizer if optimizer is not None else default_optimizer(policy)
    return [awr_low_step(policy, sample_low_batch(dataset, k, batch_size, rng), value_l, config,
                         optimizer) for _ in range(steps)]


def train_high_policy(policy: HighPolicy, dataset: OfflineDataset, value_h, config: AwrConfig,
                      goal_config: GoalSamplingConfig, steps: int, batch_size: int,
                      rng: np.random.Generator,
                      optimizer: OptimizerState | None = None) -> list[PolicyStats]:
    optimizer = optimizer if optimizer is not None else default_optimizer(policy)
    return [awr_high_step(policy, sample_high_batch(dataset, goal_config, policy.k, batch_size, rng),
                          value_h, config, optimizer) for _ in range(steps)]


# -- closed-form tabular solutions ---------------------------------------------

def _k_step_pairs(ds: OfflineDataset, k: int):
    t = ds.valid_pos
    return t, np.minimum(t + k, ds.final_pos[t])


_LOG_FLOOR = math.log(1e-300)


def exact_low_policy(dataset: OfflineDataset, value_l, config: AwrConfig, k: int) -> LowPolicy:
    """Maximizer of the low-level AWR objective over tabular policies.

    Every dataset step contributes its weight to (s_t, s_{t+k}, a_t); the
    policy is the normalized weight per (s, w). Unseen pairs keep uniform logits.
    """
    maze = dataset.maze
    F = maze.n_free
    t, sub = _k_step_pairs(dataset, k)
    s, w = dataset.obs[t], dataset.obs[sub]
    a = dataset.act[t].astype(np.int64)
    adv = low_advantage(value_l, s, dataset.obs[t + 1], w)
    weight = awr_weights(adv, config.beta_l, config.weight_clip)
    mass = np.bincount((s.astype(np.int64) * F + w) * NUM_ACTIONS + a, weights=weight,
                       minlength=F * F * NUM_ACTIONS).reshape(F, F, NUM_ACTIONS)
    seen = mass.sum(axis=2) > 0
    with np.errstate(divide="ignore"):
        logits = np.maximum(np.log(mass), _LOG_FLOOR)
    logits[~seen] = 0.0
    scorer = TabularValue(maze, out_dim=NUM_ACTIONS, role=LowPolicy.role)
    scorer.values = logits
    return LowPolicy(scorer, config.beta_l)


class ExactHighPolicy:
    """Maximizer of the high-level AWR objective over tabular policies when goals
    are drawn independently of the (s_t, s_{t+k}) pair.

    ``pi(w | s, g)`` is proportional to ``C(s, w) * min(exp(beta_h A^h(s, w, g)), clip)``
    where ``C`` counts k-step pairs in the dataset. Logits are built on demand
    from the sparse pair counts, so memory stays O(pairs).
    """

    role = "high_policy"

    def __init__(self, dataset: OfflineDataset, value_h, config: AwrConfig, k: int):
        if k < 1:
            raise ValueError("subgoal horizon k must be >= 1")
        self.maze = dataset.maze
        self.value = value_h
        self.beta = config.beta_h
        self.clip = config.weight_clip
        self.k = int(k)
        F = self.maze.n_free
        t, sub = _k_step_pairs(dataset, k)
        key = dataset.obs[t].astype(np.int64) * F + dataset.obs[sub]
        uniq, counts = np.unique(key, return_counts=True)
        self.cand_state = (uniq // F).astype(np.int32)
        self.cand_sub = (uniq % F).astype(np.int32)
        self.log_count = np.log(counts.astype(np.float64))
        self.ptr = np.searchsorted(self.cand_state, np.arange(F + 1)).astype(np.int64)

    def candidates(self, s: int):
        lo, hi = self.ptr[s], self.ptr[s + 1]
        return self.cand_sub[lo:hi], self.log_count[lo:hi]

    def _scores(self, s_idx, g_idx):
        s_idx = np.atleast_1d(np.asarray(s_idx, dtype=np.int64))
        g_idx = np.atleast_1d(np.asarray(g_idx, dtype=np.int64))
        lo, hi = self.ptr[s_idx], self.ptr[s_idx + 1]
        n = hi - lo
        if np.any(n == 0):
            bad = int(s_idx[np.argmax(n == 0)])
            raise ValueError(f"state {self.maze.cell_at(bad)} never starts a k-step pair in the data")
        seg = np.repeat(np.arange(len(s_idx)), n)
        pos = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n) + np.repeat(lo, n)
        w = self.cand_sub[pos]
        g = g_idx[seg]
        adv = _values(self.value, w, g) - _values(self.value, s_idx[seg], g)
        x = np.minimum(self.beta * adv, math.log(self.clip))
        return seg, pos, w, self.log_count[pos] + x, np.cumsum(n) - n

    def logits(self, s_idx, g_idx) -> np.ndarray:
        """Dense (B, F) logits; cells never observed k steps after s get -inf."""
        seg, _, w, score, _ = self._scores(s_idx, g_idx)
        out = np.full((int(seg[-1]) + 1 if len(seg) else 0, self.maze.n_free), -np.inf)
        out[seg, w] = score
        return out

    def subgoals(self, s_idx, g_idx, rng=None, deterministic=True) -> np.ndarray:
        """Subgoal per episode. States that never start a k-step pair in the
        data have nothing to choose from; they are handed the final goal."""
        s_idx = np.atleast_1d(np.asarray(s_idx, dtype=np.int64))
        g_idx = np.atleast_1d(np.asarray(g_idx, dtype=np.int64))
        known = self.ptr[s_idx + 1] > self.ptr[s_idx]
        out = g_idx.astype(np.int32)
        if known.any():
            out[known] = self._pick(s_idx[known], g_idx[known], rng, deterministic)
        return out

    def _pick(self, s_idx, g_idx, rng, deterministic) -> np.ndarray:
        seg, _, w, score, start = self._scores(s_idx, g_idx)
        if deterministic:
            best = np.maximum.reduceat(score, start)
            # first candidate (lowest cell index) among ties
            hit = score == best[seg]
            first = np.full(len(start), len(score))
            np.minimum.at(first, seg[hit], np.flatnonzero(hit))
            return w[first].astype(np.int32)
        if rng is None:
            raise ValueError("stochastic subgoal selection needs a random generator")
        best = np.maximum.reduceat(score, start)
        p = np.exp(score - best[seg])
        cum = np.cumsum(p)
        base = np.concatenate([[0.0], cum])[start]
        total = np.add.reduceat(p, start)
        u = base + rng.random(len(start)) * total
        pick = np.minimum(np.searchsorted(cum, u, side="right"),
                          np.append(start[1:], len(score)) - 1)
        return w[pick].astype(np.int32)


# -- composition ---------------------------------------------------------------

class OracleSubgoaler:
    """Cell ``k`` moves along the shortest path (the goal if closer)."""

    role = "oracle_high"

    def __init__(self, maze: GridMaze, k: int = 1):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.maze = maze
        self.k = int(k)

    def subgoals(self, s_idx, g_idx, rng=None, deterministic=True) -> np.ndarray:
        return oracle_subgoal_indices(self.maze, np.atleast_1d(s_idx), np.atleast_1d(g_idx), self.k)


class OracleLow:
    """Greedy shortest-path move toward the subgoal."""

    role = "oracle_low"

    def __init__(self, maze: GridMaze):
        self.maze = maze

    def actions(self, s_idx, w_idx, rng=None, deterministic=True) -> np.ndarray:
        return self.maze.oracle_actions[np.asarray(w_idx), np.asarray(s_idx)].astype(np.int64)


class StayPolicy:
    """Always stays; a floor for evaluation."""

    def __init__(self, maze: GridMaze):
        self.maze = maze

    def subgoals(self, s_idx, g_idx, rng=None, deterministic=True):
        return np.atleast_1d(np.asarray(s_idx, dtype=np.int32))

    def actions(self, s_idx, w_idx, rng=None, deterministic=True):
        return np.full(len(np.atleast_1d(s_idx)), STAY, dtype=np.int64)


class HierarchicalAgent:
    """Low-level policy steered by subgoals from a high-level policy or oracle.

    Subgoals are refreshed every ``replan_interval`` steps. The agent holds the
    current subgoal of each parallel episode between refreshes.
    """

    def __init__(self, high, low, replan_interval: int = 1, deterministic: bool = True):
        if replan_interval < 1:
            raise ValueError("replan_interval must be >= 1")
        self.high = high
        self.low = low
        self.replan_interval = int(replan_interval)
        self.deterministic = deterministic
        self.maze = low.maze
        self.reset()

    def reset(self, n: int | None = None) -> None:
        self._t = 0
        self._w = None

    def step_batch(self, s_idx, g_idx, rng: np.random.Generator | None = None) -> np.ndarray:
        """Actions for parallel episodes at the same step count."""
        s_idx = np.atleast_1d(np.asarray(s_idx, dtype=np.int64))
        g_idx = np.atleast_1d(np.asarray(g_idx, dtype=np.int64))
        if self._w is None or len(self._w) != len(s_idx) or self._t % self.replan_interval == 0:
            self._w = np.asarray(self.high.subgoals(s_idx, g_idx, rng, self.deterministic),
                                 dtype=np.int64)
        self._t += 1
        a = np.asarray(self.low.actions(s_idx, self._w, rng, self.deterministic), dtype=np.int64)
        a[s_idx == g_idx] = STAY
        return a


def act(agent: HierarchicalAgent, s, g, rng: np.random.Generator | None = None) -> Action:
    """Single-episode action; call ``agent.reset()`` between episodes."""
    maze = agent.maze
    si, gi = maze.index_of(s), maze.index_of(g)
    if si == gi:
        agent._t += 1
        return Action.STAY
    return Action(int(agent.step_batch([si], [gi], rng)[0]))


def oracle_agent(maze: GridMaze, k: int = 1, replan_interval: int = 1) -> HierarchicalAgent:
    return HierarchicalAgent(OracleSubgoaler(maze, k), OracleLow(maze), replan_interval)
