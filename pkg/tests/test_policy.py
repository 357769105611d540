import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otagcrl.approximator import NonFiniteError, OptimizerState
from otagcrl.dataset import HighBatch, LowBatch, OfflineDataset, Trajectory, generate_dataset
from otagcrl.maze import Action, GridMaze, load_layout
from otagcrl.policy import (AwrConfig, ExactHighPolicy, HierarchicalAgent, OracleLow,
                            OracleSubgoaler, StayPolicy, act, awr_high_step, awr_low_step,
                            awr_weights, exact_low_policy, high_advantage, load_policy,
                            low_advantage, mlp_high_policy, mlp_low_policy, oracle_agent,
                            tabular_high_policy, tabular_low_policy, train_low_policy)
from otagcrl.value import optimal_value


@pytest.fixture(scope="module")
def chain():
    m = load_layout("chain-50")
    ds = generate_dataset(m, "navigate", 3000, np.random.default_rng(0))
    return m, ds, optimal_value(m.distances, 0.95)


def _pairs(ds, k):
    t = ds.valid_pos
    return t, np.minimum(t + k, ds.final_pos[t])


# -- advantages and weights --------------------------------------------------------

def test_advantage_examples():
    m = GridMaze(10, 1)
    V = optimal_value(m.distances, 0.9)
    assert high_advantage(V, 0, 3, 9) == pytest.approx(V[3, 9] - V[0, 9])
    assert high_advantage(V, 0, 3, 9) > 0
    assert low_advantage(V, 5, 4, 8) < 0
    np.testing.assert_allclose(high_advantage(V, np.array([0, 1]), np.array([1, 1]), np.array([9, 9])),
                               [V[1, 9] - V[0, 9], 0.0])


def test_awr_weights():
    np.testing.assert_allclose(awr_weights([0.0, 1.0, -1.0], 2.0, 100.0), [1.0, math.e ** 2, math.e ** -2])
    assert awr_weights([1e6], 3.0, 100.0)[0] == 100.0
    with pytest.raises(NonFiniteError):
        awr_weights([np.nan], 1.0, 10.0)
    with pytest.raises(ValueError):
        AwrConfig(beta_h=0.0)


@settings(max_examples=100)
@given(st.floats(-50, 50), st.floats(0.1, 10), st.floats(1, 1e4))
def test_awr_weights_bounded(a, beta, clip):
    w = awr_weights([a], beta, clip)[0]
    assert 0 <= w <= clip


# -- closed-form extraction ----------------------------------------------------------

def test_exact_low_recovers_expert_actions():
    m = load_layout("maze-medium")
    ds = generate_dataset(m, "navigate", 5000, np.random.default_rng(1), noise=0.0)
    V = optimal_value(m.distances, 0.95)
    low = exact_low_policy(ds, V, AwrConfig(), 5)
    t, sub = _pairs(ds, 5)
    s, w = ds.obs[t], ds.obs[sub]
    moving = s != w
    a = low.actions(s[moving], w[moving])
    np.testing.assert_array_equal(a, ds.act[t][moving])
    # an unseen (s, w) pair keeps uniform logits
    assert np.all(low.logits([0], [0]) == 0.0)


def test_exact_low_matches_weighted_counts(chain):
    m, ds, V = chain
    cfg = AwrConfig(beta_l=1.5)
    low = exact_low_policy(ds, V, cfg, 5)
    t, sub = _pairs(ds, 5)
    s, w, a = ds.obs[t], ds.obs[sub], ds.act[t]
    wt = awr_weights(V[ds.obs[t + 1], w] - V[s, w], 1.5, 100.0)
    i = 17
    row = (s == s[i]) & (w == w[i])
    mass = np.array([wt[row & (a == b)].sum() for b in range(5)])
    np.testing.assert_allclose(low.probs([s[i]], [w[i]])[0], mass / mass.sum(), atol=1e-12)


def test_exact_high_with_optimal_value_follows_shortest_paths():
    m = load_layout("maze-medium")
    ds = generate_dataset(m, "stitch", 20000, np.random.default_rng(2))
    V = optimal_value(m.distances, 0.99)
    high = ExactHighPolicy(ds, V, AwrConfig(beta_h=50.0, weight_clip=1e100), 5)
    rng = np.random.default_rng(3)
    s = rng.integers(m.n_free, size=200)
    g = rng.integers(m.n_free, size=200)
    w = high.subgoals(s, g)
    # the chosen candidate is the one closest to the goal among those observed
    for si, gi, wi in zip(s, g, w):
        cand, _ = high.candidates(si)
        if len(cand) == 0:
            assert wi == gi
        else:
            assert m.distances[wi, gi] == m.distances[cand, gi].min()


def test_exact_high_tie_break_lowest_index():
    m = GridMaze(5, 1)
    trajs = [Trajectory([2, 3], [Action.EAST], "navigate", 3),
             Trajectory([2, 1], [Action.WEST], "navigate", 1)]
    ds = OfflineDataset(m, trajs)
    high = ExactHighPolicy(ds, np.zeros((5, 5)), AwrConfig(), 1)
    assert high.subgoals([2], [4])[0] == 1  # equal scores: lower cell index
    logits = high.logits([2], [4])[0]
    assert np.isinf(logits[[0, 2, 4]]).all() and logits[1] == logits[3] == 0.0


def test_exact_high_falls_back_to_goal_off_data():
    m = GridMaze(6, 1)
    ds = OfflineDataset(m, [Trajectory([0, 1, 2], [Action.EAST, Action.EAST], "navigate", 2)])
    high = ExactHighPolicy(ds, optimal_value(m.distances, 0.9), AwrConfig(), 1)
    np.testing.assert_array_equal(high.subgoals([0, 5, 1], [2, 3, 2]), [1, 3, 2])
    with pytest.raises(ValueError, match="never starts"):
        high.logits([5], [3])


def test_stochastic_subgoals_follow_logits():
    m = GridMaze(5, 1)
    trajs = [Trajectory([2, 3], [Action.EAST], "navigate", 3) for _ in range(3)] + \
            [Trajectory([2, 1], [Action.WEST], "navigate", 1)]
    ds = OfflineDataset(m, trajs)
    high = ExactHighPolicy(ds, np.zeros((5, 5)), AwrConfig(), 1)
    draws = high.subgoals(np.full(20000, 2), np.full(20000, 4), np.random.default_rng(0), False)
    assert abs(np.mean(draws == 3) - 0.75) < 0.015
    assert set(np.unique(draws)) == {1, 3}


# -- gradient route against the closed form (chain-50) ---------------------------------

def _low_full_batch(ds, k):
    t, sub = _pairs(ds, k)
    return LowBatch(ds.obs[t], ds.act[t].astype(np.int64), ds.obs[t + 1], ds.obs[sub])


def _weighted_nll(probs, target, weights):
    return float(-np.mean(weights * np.log(np.maximum(probs[np.arange(len(target)), target], 1e-300))))


def test_low_closed_form_is_stationary_for_gradient_route(chain):
    m, ds, V = chain
    cfg = AwrConfig(beta_l=1.0)
    exact = exact_low_policy(ds, V, cfg, 5)
    pol = tabular_low_policy(m, 1.0)
    pol.scorer.values = exact.scorer.values.copy()
    before = pol.scorer.values.copy()
    awr_low_step(pol, _low_full_batch(ds, 5), V, cfg, OptimizerState("sgd", 1.0))
    assert np.abs(pol.scorer.values - before).max() < 1e-12


def test_low_gradient_descent_approaches_closed_form(chain):
    m, ds, V = chain
    cfg = AwrConfig(beta_l=1.0)
    batch = _low_full_batch(ds, 5)
    exact = exact_low_policy(ds, V, cfg, 5)
    target = exact.probs(batch.states, batch.subgoals)
    pol = tabular_low_policy(m, 1.0)
    opt = OptimizerState("sgd", 1.0)
    gaps = []
    for it in range(1500):
        awr_low_step(pol, batch, V, cfg, opt)
        if it % 300 == 299:
            gaps.append(np.abs(pol.probs(batch.states, batch.subgoals) - target).max())
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 2e-3
    learned = pol.probs(batch.states, batch.subgoals)
    np.testing.assert_array_equal(learned.argmax(1), target.argmax(1))
    w = awr_weights(V[batch.next_states, batch.subgoals] - V[batch.states, batch.subgoals], 1.0, 100.0)
    assert _weighted_nll(target, batch.actions, w) <= _weighted_nll(learned, batch.actions, w)


def _high_full_batch(ds, k, goals):
    t, sub = _pairs(ds, k)
    n = len(t)
    return HighBatch(np.tile(ds.obs[t], len(goals)), np.tile(ds.obs[sub], len(goals)),
                     np.repeat(goals, n).astype(np.int32))


def test_high_gradient_route_matches_closed_form(chain):
    m, ds, V = chain
    cfg = AwrConfig(beta_h=1.0)
    goals = np.array([0, 25, 49])
    batch = _high_full_batch(ds, 5, goals)  # every pair with every goal: goals independent of pairs
    exact = ExactHighPolicy(ds, V, cfg, 5)
    logits = exact.logits(batch.states, batch.goals)
    target = np.exp(logits - logits.max(1, keepdims=True))
    target /= target.sum(1, keepdims=True)
    w = awr_weights(V[batch.subgoals, batch.goals] - V[batch.states, batch.goals], 1.0, 100.0)
    # the closed form is a fixed point of full-batch descent
    pol = tabular_high_policy(m, 1.0, 5)
    floor = np.log(1e-300)
    for s in np.unique(batch.states):
        for g in goals:
            pol.scorer.values[s, g] = np.maximum(exact.logits([s], [g])[0], floor)
    before = pol.scorer.values.copy()
    awr_high_step(pol, batch, V, cfg, OptimizerState("sgd", 1.0))
    assert np.abs(pol.scorer.values - before).max() < 1e-12
    # descent from zero logits closes the objective gap from above, never crossing it
    pol = tabular_high_policy(m, 1.0, 5)
    opt = OptimizerState("sgd", 0.3)
    best = _weighted_nll(target, batch.subgoals, w)
    gaps = []
    for it in range(300):
        awr_high_step(pol, batch, V, cfg, opt)
        if it % 50 == 49:
            gaps.append(_weighted_nll(pol.probs(batch.states, batch.goals), batch.subgoals, w) - best)
    assert all(0 < b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.3 * gaps[0]
    learned = pol.probs(batch.states, batch.goals)
    np.testing.assert_array_equal(learned.argmax(1), target.argmax(1))


# -- composition ---------------------------------------------------------------------

def test_oracle_agent_walks_shortest_path():
    m = load_layout("maze-medium")
    agent = oracle_agent(m, k=4)
    s, g = m.cell_at(0), m.cell_at(m.n_free - 1)
    steps = 0
    while s != g:
        a = act(agent, s, g)
        s = m.cell_at(int(m.neighbors[m.index_of(s), a]))
        steps += 1
    assert steps == m.distances[0, m.n_free - 1]
    assert act(agent, g, g) == Action.STAY


def test_agent_replans_on_interval():
    m = GridMaze(10, 1)

    class Counting(OracleSubgoaler):
        calls = 0

        def subgoals(self, *a, **kw):
            Counting.calls += 1
            return super().subgoals(*a, **kw)

    agent = HierarchicalAgent(Counting(m, 3), OracleLow(m), replan_interval=3)
    for _ in range(7):
        agent.step_batch([0], [9])
    assert Counting.calls == 3
    with pytest.raises(ValueError):
        HierarchicalAgent(Counting(m, 3), OracleLow(m), replan_interval=0)


def test_stay_policy_and_goal_stay():
    m = GridMaze(4, 1)
    agent = HierarchicalAgent(StayPolicy(m), OracleLow(m))
    assert list(agent.step_batch([0, 3], [3, 3])) == [Action.STAY, Action.STAY]
    agent = HierarchicalAgent(StayPolicy(m), StayPolicy(m))
    assert list(agent.step_batch([0], [2])) == [Action.STAY]


# -- trained policies and persistence ------------------------------------------------------

def test_sampled_low_training_learns_expert(chain):
    m, ds, V = chain
    pol = tabular_low_policy(m, 3.0)
    stats = train_low_policy(pol, ds, V, AwrConfig(), 5, 400, 256, np.random.default_rng(0))
    assert stats[-1].loss < stats[0].loss
    s = np.arange(10, 40)
    w = s + 5
    assert np.mean(pol.actions(s, w) == Action.EAST) > 0.9


@pytest.mark.parametrize("make", [
    lambda m: tabular_high_policy(m, 2.0, 7),
    lambda m: tabular_low_policy(m, 1.5),
    lambda m: mlp_high_policy(m, 2.0, 7, hidden=(8,), rng=np.random.default_rng(0)),
    lambda m: mlp_low_policy(m, 1.5, hidden=(8,), rng=np.random.default_rng(0)),
])
def test_policy_checkpoint_round_trip(tmp_path, make):
    m = GridMaze(6, 2)
    pol = make(m)
    pol.scorer.params = np.random.default_rng(1).normal(size=pol.scorer.n_params)
    pol.save(tmp_path / "p.ckpt", seed=4)
    back = load_policy(tmp_path / "p.ckpt", m)
    assert type(back) is type(pol) and back.beta == pol.beta
    assert getattr(back, "k", None) == getattr(pol, "k", None)
    s, c = np.arange(6), np.arange(6)[::-1]
    np.testing.assert_array_equal(back.logits(s, c), pol.logits(s, c))


# -- further examples and invariants ------------------------------------------------------

def test_advantage_identity_and_converged_triple():
    from otagcrl.value import ExpectileConfig, train_tabular_exhaustive
    m = load_layout("chain-50")
    learner, _ = train_tabular_exhaustive(m, "iql", ExpectileConfig(gamma=0.95, learning_rate=1 / 1.4))
    V = learner.approx
    assert high_advantage(V, (3, 0), (3, 0), (40, 0)) == 0.0
    # hand value: V(s, g) = -(1 - 0.95**d) / 0.05 with d = 32 and 37
    hand = -(1 - 0.95 ** 32) / 0.05 + (1 - 0.95 ** 37) / 0.05
    assert high_advantage(V, (3, 0), (8, 0), (40, 0)) == pytest.approx(hand, abs=1e-8)
    assert low_advantage(V, (3, 0), (4, 0), (8, 0)) == pytest.approx(
        -(1 - 0.95 ** 4) / 0.05 + (1 - 0.95 ** 5) / 0.05, abs=1e-8)


def test_weight_ratio_formula():
    d = 0.37
    w = awr_weights([d, -d], 3.0, 1e9)
    assert w[0] / w[1] == pytest.approx(math.exp(6 * d), rel=1e-12)


def _bc_step(pol, s, c, target):
    from otagcrl.policy import _weighted_nll_step
    return _weighted_nll_step(pol, s, c, target, np.ones(len(s)), OptimizerState("sgd", 0.1), 100.0)


def test_zero_advantage_is_behavior_cloning(chain):
    m, ds, _ = chain
    batch = _low_full_batch(ds, 5)
    a, b = tabular_low_policy(m, 2.0), tabular_low_policy(m, 2.0)
    awr_low_step(a, batch, np.zeros((m.n_free, m.n_free)), AwrConfig(), OptimizerState("sgd", 0.1))
    _bc_step(b, batch.states, batch.subgoals, batch.actions)
    np.testing.assert_array_equal(a.scorer.values, b.scorer.values)
    hb = _high_full_batch(ds, 5, np.array([7, 30]))
    a, b = tabular_high_policy(m, 2.0, 5), tabular_high_policy(m, 2.0, 5)
    awr_high_step(a, hb, np.full((m.n_free, m.n_free), -4.0), AwrConfig(), OptimizerState("sgd", 0.1))
    _bc_step(b, hb.states, hb.goals, hb.subgoals)
    np.testing.assert_array_equal(a.scorer.values, b.scorer.values)


def test_small_beta_approaches_behavior_cloning(chain):
    m, ds, V = chain
    batch = _low_full_batch(ds, 5)
    ref = tabular_low_policy(m, 1.0)
    _bc_step(ref, batch.states, batch.subgoals, batch.actions)
    gaps = []
    for beta in (1.0, 1e-2, 1e-4):
        pol = tabular_low_policy(m, 1.0)
        awr_low_step(pol, batch, V, AwrConfig(beta_l=beta), OptimizerState("sgd", 0.1))
        gaps.append(np.abs(pol.scorer.values - ref.scorer.values).max())
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-4 * gaps[0] * 10


def test_chain_argmax_subgoal_is_on_path(chain):
    m, ds, V = chain
    # without clipping, a sharp temperature lets advantage outweigh visit counts
    cfg = AwrConfig(beta_h=50.0, weight_clip=1e100)
    high = ExactHighPolicy(ds, V, cfg, 5)
    checked = 0
    for s in range(50):
        cand, logc = high.candidates(s)
        for g in range(50):
            if abs(g - s) < 5 or len(cand) == 0:
                continue
            # enumerate C(s, w) * min(exp(beta A), clip) directly
            score = logc + 50.0 * (V[cand, g] - V[s, g])
            pick = high.subgoals([s], [g])[0]
            assert score[cand == pick][0] >= score.max() - 1e-9
            best = pick
            on_path = s + 5 * np.sign(g - s)
            if on_path in cand:
                assert best == on_path
                checked += 1
    assert checked > 1500


def test_chain_argmax_action_points_to_subgoal(chain):
    m, ds, V = chain
    low = exact_low_policy(ds, V, AwrConfig(beta_l=3.0), 5)
    t, sub = _pairs(ds, 5)
    s, w = ds.obs[t], ds.obs[sub]
    a_data = ds.act[t]
    toward_data = np.where(w > s, Action.EAST, Action.WEST)
    # pairs whose toward move appears in the data; others can only copy what was seen
    seen = np.unique(np.stack([s, w], 1)[(s != w) & (a_data == toward_data)], axis=0)
    a = low.actions(seen[:, 0], seen[:, 1])
    toward = np.where(seen[:, 1] > seen[:, 0], Action.EAST, Action.WEST)
    assert len(seen) > 300 and np.mean(a == toward) == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_goal_dependent_shift_leaves_policies_unchanged(seed):
    m = load_layout("chain-50")
    ds = generate_dataset(m, "navigate", 800, np.random.default_rng(seed % 7))
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(50, 50))
    V2 = V + rng.normal(scale=10, size=50)[None, :]  # V(., g) + c(g)
    cfg = AwrConfig()
    np.testing.assert_allclose(exact_low_policy(ds, V, cfg, 3).scorer.values,
                               exact_low_policy(ds, V2, cfg, 3).scorer.values, atol=1e-9)
    s = rng.integers(50, size=20)
    s = s[[len(ExactHighPolicy(ds, V, cfg, 3).candidates(x)[0]) > 0 for x in s]]
    g = rng.integers(50, size=len(s))
    np.testing.assert_allclose(ExactHighPolicy(ds, V, cfg, 3).logits(s, g),
                               ExactHighPolicy(ds, V2, cfg, 3).logits(s, g), atol=1e-9)


def test_flat_baseline_is_low_step_with_goal_as_subgoal(chain):
    from otagcrl.dataset import GoalSamplingConfig
    from otagcrl.policy import flat_awr_baseline, sample_flat_batch
    m, ds, V = chain
    flat = flat_awr_baseline(V, ds, AwrConfig(), steps=3, batch_size=64,
                             rng=np.random.default_rng(5), optimizer=OptimizerState("sgd", 0.5))
    manual = tabular_low_policy(m, 3.0)
    rng = np.random.default_rng(5)
    opt = OptimizerState("sgd", 0.5)
    for _ in range(3):
        batch = sample_flat_batch(ds, GoalSamplingConfig(), 64, rng)
        awr_low_step(manual, batch, V, AwrConfig(), opt)
    np.testing.assert_array_equal(flat.scorer.values, manual.scorer.values)
    assert flat.role == "flat_policy"
