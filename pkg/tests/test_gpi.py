from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfgpi.features import BinGrid, bin_table, cumulant_index
from sfgpi.gpi import (
    GoalRegion,
    achievement_failures,
    achieves,
    all_goals,
    analytic_goal_weights,
    fit_weights,
    gpe,
    gpe_table,
    gpi_action,
    gpi_policy,
    gpi_q,
    gpi_value_of_policy,
    policy_values,
    simplified_qmax,
    simplified_qmax_table,
    success_rate,
    unachieved_features,
)
from sfgpi.sf import FULL, OFF_DIAGONAL, tie_argmax

from conftest import GAMMA


def bfs_distance(mdp, goal_mask):
    """Oracle: fewest actions from every state into the goal (reverse BFS)."""
    t = mdp.transitions
    dist = np.full(mdp.state_count, -1)
    q = deque(np.flatnonzero(goal_mask).tolist())
    dist[goal_mask] = 0
    preds = [[] for _ in range(mdp.state_count)]
    for s in range(mdp.state_count):
        for a in range(mdp.action_count):
            preds[t[s, a]].append(s)
    while q:
        s = q.popleft()
        for p in preds[s]:
            if dist[p] < 0:
                dist[p] = dist[s] + 1
                q.append(p)
    return dist


def rollout_steps(mdp, policy, goal_mask, start, horizon):
    s = start
    for step in range(horizon + 1):
        if goal_mask[s]:
            return step
        s = int(mdp.transitions[s, policy[s]])
    return None


class TestGoals:
    def test_counts(self):
        assert len(all_goals(3, 3)) == 64
        assert len(all_goals(3, 3, wildcards=False)) == 27
        assert sum(not g.is_single_bin or None in g.allowed for g in all_goals(3, 3)) == 37

    def test_analytic_weights(self):
        g = GoalRegion.from_bins([2, 3])
        np.testing.assert_array_equal(analytic_goal_weights(g, 3), [[0, 1, 0], [0, 0, 1]])

    def test_all_wildcard(self):
        assert not analytic_goal_weights(GoalRegion.from_bins([None, None]), 4).any()

    def test_partial_wildcard(self):
        w = analytic_goal_weights(GoalRegion.from_bins([1, None, 3]), 3)
        np.testing.assert_array_equal(w, [[1, 0, 0], [0, 0, 0], [0, 0, 1]])

    def test_multi_bin_rows(self):
        w = analytic_goal_weights(GoalRegion.from_bins([[2, 3], 1]), 3)
        np.testing.assert_array_equal(w, [[0, 1, 1], [1, 0, 0]])
        assert not GoalRegion.from_bins([[2, 3], 1]).is_single_bin

    def test_invalid(self):
        with pytest.raises(ValueError):
            GoalRegion.from_bins([[], 1])
        with pytest.raises(ValueError):
            analytic_goal_weights(GoalRegion.from_bins([4]), 3)

    def test_mask_and_contains(self):
        bins = np.array([[1, 2], [2, 2], [3, 1]])
        g = GoalRegion.from_bins([[1, 2], 2])
        assert g.mask(bins).tolist() == [True, True, False]
        assert g.contains([2, 2]) and not g.contains([3, 2])


class TestGpe:
    def test_indicator_weight_reads_diagonal(self, exact_matrices):
        _, _, m = exact_matrices(2, 3)
        p = cumulant_index(1, 2, 3)
        w = np.zeros((2, 3))
        w.flat[p] = 1.0
        for s, a in [(0, 0), (4, 3), (8, 1)]:
            assert gpe(m, w, s, a, p) == pytest.approx(m.diagonal(p)[s, a])

    def test_zero_weight(self, exact_matrices):
        _, _, m = exact_matrices(2, 3)
        assert gpe(m, np.zeros((2, 3)), 3, 2, 4) == 0.0
        assert not gpe_table(m, np.zeros((2, 3))).any()

    def test_table_matches_scalar(self, exact_matrices):
        _, _, m = exact_matrices(2, 3)
        w = np.random.default_rng(0).normal(size=(2, 3))
        table = gpe_table(m, w)
        for p in range(m.n):
            assert table[p, 5, 2] == pytest.approx(gpe(m, w, 5, 2, p))

    def test_off_diagonal_table_matches_materialised(self, exact_matrices):
        _, _, m = exact_matrices(3, 3, OFF_DIAGONAL)
        w = np.random.default_rng(2).normal(size=(3, 3))
        expected = np.einsum("psac,c->psa", m.full(), w.ravel())
        np.testing.assert_allclose(gpe_table(m, w), expected, atol=1e-10)

    def test_dimension_mismatch(self, exact_matrices):
        _, _, m = exact_matrices(2, 3)
        with pytest.raises(ValueError):
            gpe(m, np.zeros((3, 3)), 0, 0, 0)
        with pytest.raises(ValueError):
            gpe_table(m, np.full((2, 3), np.nan))

    def test_fitted_weights_reproduce_sf_column(self, exact_matrices):
        mdp, fm, m = exact_matrices(2, 3)
        reward = m.cumulants[:, 0]
        samples = [(s, 0, reward[s]) for s in range(mdp.state_count)]
        w = fit_weights(samples, fm, BinGrid(3))
        for p in range(m.n):
            np.testing.assert_allclose(gpe_table(m, w)[p], m.full()[p][..., 0], atol=1e-4)


class TestGpiAction:
    def test_single_policy(self, exact_matrices):
        _, _, m = exact_matrices(2, 3)
        w = np.random.default_rng(3).normal(size=(2, 3))
        for p in (0, 4):
            got = gpi_policy(m, w, policies=[p])
            q = gpe_table(m, w)[p]
            expected = tie_argmax(q, 1e-9 * np.abs(q).max())
            np.testing.assert_array_equal(got, expected)

    def test_in_goal_returns_action_zero(self, exact_matrices):
        mdp, _, m = exact_matrices(2, 3)
        for goal in all_goals(2, 3, wildcards=False):
            w = analytic_goal_weights(goal, 3)
            s = mdp.state_id([goal.target_bin(0), goal.target_bin(1)])
            assert gpi_action(m, w, s) == 0

    def test_reaches_far_corner_in_four_steps(self, exact_matrices):
        mdp, fm, m = exact_matrices(2, 3)
        goal = GoalRegion.from_bins([3, 3])
        pol = gpi_policy(m, analytic_goal_weights(goal, 3))
        mask = goal.mask(bin_table(fm.values, 3))
        assert rollout_steps(mdp, pol, mask, mdp.state_id((1, 1)), 10) == 4

    @pytest.mark.parametrize("k", [2, 3])
    def test_shortest_paths_against_bfs(self, exact_matrices, k):
        mdp, fm, m = exact_matrices(k, 3)
        bins = bin_table(fm.values, 3)
        for goal in all_goals(k, 3):
            mask = goal.mask(bins)
            pol = gpi_policy(m, analytic_goal_weights(goal, 3))
            dist = bfs_distance(mdp, mask)
            for s in range(mdp.state_count):
                assert rollout_steps(mdp, pol, mask, s, mdp.state_count) == dist[s]

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 5), st.floats(-5, -1e-3)), min_size=9, max_size=9),
        st.floats(0.01, 100),
    )
    def test_scale_invariance(self, exact_matrices, flat, c):
        _, _, m = exact_matrices(3, 3)
        w = np.array(flat).reshape(3, 3)
        np.testing.assert_array_equal(gpi_policy(m, w), gpi_policy(m, c * w))


class TestOffDiagonalParity:
    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_goal_weights_identical_actions(self, exact_matrices, k):
        _, _, full = exact_matrices(k, 3)
        _, _, off = exact_matrices(k, 3, OFF_DIAGONAL)
        for goal in all_goals(k, 3):
            w = analytic_goal_weights(goal, 3)
            np.testing.assert_array_equal(gpi_policy(full, w), gpi_policy(off, w))

    def test_goal_weights_identical_q_on_policy_actions(self, exact_matrices):
        # both matrices agree wherever the first action keeps the other features fixed
        mdp, _, full = exact_matrices(3, 3)
        _, _, off = exact_matrices(3, 3, OFF_DIAGONAL)
        w = analytic_goal_weights(GoalRegion.from_bins([1, 3, 2]), 3)
        a = gpi_q(full, w)[:, 0]
        b = gpi_q(off, w)[:, 0]
        np.testing.assert_allclose(a, b, atol=1e-8)


class TestGpiValue:
    def test_dominates_constituents(self, exact_matrices):
        mdp, _, m = exact_matrices(2, 3)
        rng = np.random.default_rng(4)
        states = np.arange(mdp.state_count)
        for _ in range(5):
            w = rng.normal(size=(2, 3))
            v = gpi_value_of_policy(mdp, m, w)
            pol = gpi_policy(m, w)
            assert np.all(v >= gpi_q(m, w)[states, pol] - 1e-8)

    def test_indicator_weight(self, exact_matrices):
        mdp, _, m = exact_matrices(2, 3)
        for p in range(m.n):
            w = np.zeros((2, 3))
            w.flat[p] = 1.0
            v = gpi_value_of_policy(mdp, m, w)
            own = policy_values(mdp, m.greedy_policy(p).actions, m.cumulants[:, p], GAMMA)
            assert np.all(v >= own - 1e-8)

    def test_zero_weight(self, exact_matrices):
        mdp, _, m = exact_matrices(2, 3)
        np.testing.assert_array_equal(gpi_value_of_policy(mdp, m, np.zeros((2, 3))), 0.0)


class TestFitWeights:
    def test_zero_reward(self, exact_matrices):
        mdp, fm, _ = exact_matrices(2, 3)
        w = fit_weights([(s, 0, 0.0) for s in range(9)], fm, BinGrid(3))
        np.testing.assert_array_equal(w, 0.0)

    def test_single_cumulant_up_to_feature_shift(self, exact_matrices):
        mdp, fm, m = exact_matrices(2, 3)
        w = fit_weights([(s, 1, m.cumulants[s, 0]) for s in range(9)], fm, BinGrid(3), ridge=1e-10)
        # a constant added to one feature's row and removed from the other is invisible
        shift = w[0, 1]
        np.testing.assert_allclose(w[0] - shift, [1, 0, 0], atol=1e-6)
        np.testing.assert_allclose(w[1] + shift, [0, 0, 0], atol=1e-6)

    def test_matches_lstsq_oracle(self, exact_matrices):
        mdp, fm, m = exact_matrices(3, 3)
        bins = bin_table(fm.values, 3)
        for goal in all_goals(3, 3, wildcards=False)[::5]:
            reward = goal.mask(bins).astype(float)
            w = fit_weights([(s, 0, reward[s]) for s in range(mdp.state_count)], fm, BinGrid(3))
            oracle, *_ = np.linalg.lstsq(m.cumulants, reward, rcond=None)
            np.testing.assert_allclose(w.ravel(), oracle, atol=1e-4)
            for i in range(3):
                assert np.argmax(w[i]) + 1 == goal.target_bin(i)

    def test_validation(self, exact_matrices):
        _, fm, _ = exact_matrices(2, 3)
        with pytest.raises(ValueError):
            fit_weights([], fm, BinGrid(3))
        with pytest.raises(ValueError):
            fit_weights([(0, 0, 1.0)], fm, BinGrid(3), ridge=0.0)


class TestSimplifiedQmax:
    def test_in_goal_is_zero(self, exact_matrices):
        mdp, fm, m = exact_matrices(2, 3)
        bins = bin_table(fm.values, 3)
        goal = GoalRegion.from_bins([2, 2])
        s = mdp.state_id((2, 2))
        assert unachieved_features(goal, bins[s]) == []
        assert all(simplified_qmax(m, goal, bins, s, a) == 0.0 for a in range(5))

    def test_single_unachieved_feature(self, exact_matrices):
        mdp, fm, m = exact_matrices(2, 3)
        bins = bin_table(fm.values, 3)
        goal = GoalRegion.from_bins([2, 3])
        s = mdp.state_id((2, 1))
        assert unachieved_features(goal, bins[s]) == [1]
        p = cumulant_index(1, 3, 3)
        for a in range(5):
            assert simplified_qmax(m, goal, bins, s, a) == m.diagonal(p)[s, a]

    def test_multi_bin_rejected(self, exact_matrices):
        _, fm, m = exact_matrices(2, 3)
        with pytest.raises(ValueError):
            simplified_qmax_table(m, GoalRegion.from_bins([[1, 2], 3]), bin_table(fm.values, 3))

    def _argmax_sets(self, q, tol=1e-9):
        scale = max(1.0, float(np.abs(q).max()))
        return q >= q.max(axis=1, keepdims=True) - tol * scale

    def test_agrees_everywhere_with_closed_form_cross_terms(self, exact_matrices):
        mdp, fm, m = exact_matrices(3, 3, OFF_DIAGONAL)
        bins = bin_table(fm.values, 3)
        for goal in all_goals(3, 3, wildcards=False):
            w = analytic_goal_weights(goal, 3)
            full = self._argmax_sets(gpi_q(m, w))
            simple = self._argmax_sets(simplified_qmax_table(m, goal, bins))
            np.testing.assert_array_equal(full, simple)

    def test_agrees_outside_goal_with_exact_full_matrix(self, exact_matrices):
        mdp, fm, m = exact_matrices(3, 3, FULL)
        bins = bin_table(fm.values, 3)
        for goal in all_goals(3, 3, wildcards=False):
            w = analytic_goal_weights(goal, 3)
            outside = ~goal.mask(bins)
            full = self._argmax_sets(gpi_q(m, w))
            simple = self._argmax_sets(simplified_qmax_table(m, goal, bins))
            np.testing.assert_array_equal(full[outside], simple[outside])


class TestAchieves:
    def test_whole_space(self, exact_matrices):
        mdp, _, _ = exact_matrices(2, 3)
        pol = np.random.default_rng(0).integers(5, size=9)
        assert achieves(mdp, pol, np.ones(9, dtype=bool))

    def test_stay_policy_fails(self, exact_matrices):
        mdp, _, _ = exact_matrices(2, 3)
        mask = np.zeros(9, dtype=bool)
        mask[0] = True
        stay = np.zeros(9, dtype=int)
        assert not achieves(mdp, stay, mask)
        assert achievement_failures(mdp, stay, mask).tolist() == list(range(1, 9))
        assert not achieves(mdp, lambda s: 0, mask)

    def test_goal_campaign_hypercube(self, exact_matrices):
        mdp, fm, m = exact_matrices(3, 3)
        bins = bin_table(fm.values, 3)
        for goal in all_goals(3, 3):
            assert achieves(mdp, gpi_policy(m, analytic_goal_weights(goal, 3)), goal.mask(bins))

    def test_goal_campaign_k4(self, exact_matrices):
        mdp, fm, m = exact_matrices(4, 3)
        bins = bin_table(fm.values, 3)
        for goal in all_goals(4, 3):
            assert achieves(mdp, gpi_policy(m, analytic_goal_weights(goal, 3)), goal.mask(bins))

    def test_success_rate(self, exact_matrices):
        mdp, _, _ = exact_matrices(2, 3)
        mask = np.zeros(9, dtype=bool)
        mask[8] = True
        stay = np.zeros(9, dtype=int)
        assert success_rate(mdp, stay, mask, np.array([8, 8, 0, 1]), 10) == 0.5
        assert success_rate(mdp, stay, mask, np.array([], dtype=int), 10) == 0.0
