import itertools

import numpy as np
import pytest

from mudal.simplex import (BudgetLedger, SimilarityMatrix, assign_budget,
                           column_importance, largest_remainder_round,
                           project_simplex)


def grid_simplex_points(n, step):
    total = int(round(1.0 / step))
    pts = []
    for combo in itertools.product(range(total + 1), repeat=n - 1):
        if sum(combo) <= total:
            pts.append([c * step for c in combo] + [(total - sum(combo)) * step])
    return np.array(pts)


class TestProjectSimplex:
    def test_identity_on_simplex(self):
        v = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(project_simplex(v), v, atol=1e-13)

    def test_symmetric_point(self):
        np.testing.assert_allclose(project_simplex(np.array([0.5, 0.5, 0.5])),
                                   [1 / 3, 1 / 3, 1 / 3], atol=1e-13)

    def test_matches_grid_search_oracle(self):
        v = np.array([1.2, -0.3, 0.1])
        grid = grid_simplex_points(3, 0.001)
        dists = np.sum((grid - v) ** 2, axis=1)
        oracle = grid[np.argmin(dists)]
        np.testing.assert_allclose(project_simplex(v), oracle, atol=1e-3)

    def test_output_on_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w = project_simplex(rng.standard_normal(6) * 3)
            assert np.all(w >= 0)
            np.testing.assert_allclose(w.sum(), 1.0, atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            w = project_simplex(rng.standard_normal(5))
            np.testing.assert_allclose(project_simplex(w), w, atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            project_simplex(np.array([1.0, np.inf]))


class TestSimilarityMatrix:
    def test_uniform(self):
        m = SimilarityMatrix.uniform(4)
        np.testing.assert_allclose(m.alpha, 0.25)

    def test_invalid_rows_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            SimilarityMatrix(np.array([[0.5, 0.4], [0.5, 0.5]]))

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            SimilarityMatrix(np.array([[1.2, -0.2], [0.5, 0.5]]))

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        rows = np.stack([project_simplex(rng.random(5)) for _ in range(5)])
        m = SimilarityMatrix(rows)
        path = tmp_path / "alpha.csv"
        m.to_csv(path)
        back = SimilarityMatrix.from_csv(path)
        np.testing.assert_allclose(back.alpha, m.alpha, atol=1e-8)
        np.testing.assert_allclose(back.alpha.sum(axis=1), 1.0, atol=1e-6)


class TestColumnImportance:
    def test_identity_matrix(self):
        np.testing.assert_allclose(column_importance(np.eye(4)), 0.25)

    def test_equal_rows(self):
        w = np.array([0.1, 0.2, 0.7])
        alpha = np.tile(w, (3, 1))
        np.testing.assert_allclose(column_importance(alpha), w, atol=1e-15)

    def test_matches_hand_sum(self):
        rng = np.random.default_rng(3)
        alpha = np.stack([project_simplex(rng.random(4)) for _ in range(4)])
        hand = np.array([sum(alpha[i][j] for i in range(4)) / 4 for j in range(4)])
        np.testing.assert_allclose(column_importance(alpha), hand, atol=1e-15)
        np.testing.assert_allclose(column_importance(alpha).sum(), 1.0, atol=1e-9)


def enumeration_oracle(fractions, m):
    """All nonnegative integer vectors summing to m, ranked by L1 adjustment."""
    n = len(fractions)
    best, best_cost = [], None
    for combo in itertools.product(range(m + 1), repeat=n):
        if sum(combo) != m:
            continue
        cost = sum(abs(c - f) for c, f in zip(combo, fractions))
        if best_cost is None or cost < best_cost - 1e-12:
            best, best_cost = [combo], cost
        elif abs(cost - best_cost) <= 1e-12:
            best.append(combo)
    return best


class TestLargestRemainder:
    def test_tie_broken_by_lower_index(self):
        np.testing.assert_array_equal(largest_remainder_round(np.array([2.5, 2.5]), 5), [3, 2])

    def test_integers_unchanged(self):
        np.testing.assert_array_equal(largest_remainder_round(np.array([1.0, 2.0, 2.0]), 5),
                                      [1, 2, 2])

    def test_matches_enumeration_oracle(self):
        fractions = np.array([1.7, 2.6, 0.7])
        result = largest_remainder_round(fractions, 5)
        assert result.sum() == 5
        # the rule floors to (1,2,0) and hands out 2 units by fractional part
        # .7, .7, .6 with ties toward the lower index
        np.testing.assert_array_equal(result, [2, 2, 1])
        assert tuple(result) in enumeration_oracle(fractions.tolist(), 5)

    def test_random_cases_are_minimal_adjustment(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            m = 6
            frac = rng.random(3)
            frac = frac / frac.sum() * m
            out = largest_remainder_round(frac, m)
            assert out.sum() == m
            assert tuple(out) in enumeration_oracle(frac.tolist(), m)

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="nonnegative"):
            largest_remainder_round(np.array([-0.5, 5.5]), 5)


class TestBudgetLedger:
    def test_beta_identity(self):
        ledger = BudgetLedger(m0=12, m=6, initial_counts=np.array([4, 4, 4]))
        ledger.record(np.array([3, 2, 1]))
        ledger.record(np.array([0, 3, 3]))
        counts = np.array([4 + 3 + 0, 4 + 2 + 3, 4 + 1 + 3])
        np.testing.assert_allclose(ledger.beta(2), counts / (12 + 2 * 6))
        np.testing.assert_allclose(ledger.beta(2).sum(), 1.0, atol=1e-9)
        np.testing.assert_allclose(ledger.beta(1), np.array([7, 6, 5]) / 18)

    def test_bad_increment_sum_rejected(self):
        ledger = BudgetLedger(m0=6, m=4, initial_counts=np.array([3, 3]))
        with pytest.raises(ValueError, match="sum to m"):
            ledger.record(np.array([2, 1]))

    def test_negative_increment_rejected(self):
        ledger = BudgetLedger(m0=6, m=4, initial_counts=np.array([3, 3]))
        with pytest.raises(ValueError, match="nonnegative"):
            ledger.record(np.array([5, -1]))

    def test_initial_counts_must_sum_to_m0(self):
        with pytest.raises(ValueError, match="sum to m0"):
            BudgetLedger(m0=5, m=2, initial_counts=np.array([3, 3]))


class TestAssignBudget:
    def test_uniform_importance_recovers_even_split(self):
        n, m0, m = 4, 8, 8
        ledger = BudgetLedger(m0=m0, m=m, initial_counts=np.full(n, 2))
        cols = np.full(n, 0.25)
        incr = assign_budget(cols, ledger, 1, capacities=np.full(n, 100))
        np.testing.assert_array_equal(incr, [2, 2, 2, 2])

    def test_hand_traced_pipeline(self):
        # N=2, m0=m=10, labeled (5,5), alpha=(0.8,0.2):
        # targets (16,4) - (5,5) = (11,-1) -> clamp (11,0) -> scale to 10 -> (10,0)
        ledger = BudgetLedger(m0=10, m=10, initial_counts=np.array([5, 5]))
        incr = assign_budget(np.array([0.8, 0.2]), ledger, 1, capacities=np.array([50, 50]))
        np.testing.assert_array_equal(incr, [10, 0])

    def test_sum_and_nonnegativity_forced(self):
        rng = np.random.default_rng(5)
        n, m = 5, 17
        ledger = BudgetLedger(m0=10, m=m, initial_counts=np.array([2, 2, 2, 2, 2]))
        for _ in range(20):
            cols = project_simplex(rng.random(n))
            incr = assign_budget(cols, ledger, 1, capacities=np.full(n, 40))
            assert incr.sum() == m
            assert np.all(incr >= 0)

    def test_capacity_respected(self):
        ledger = BudgetLedger(m0=4, m=6, initial_counts=np.array([2, 2]))
        incr = assign_budget(np.array([1.0, 0.0]), ledger, 1, capacities=np.array([3, 10]))
        assert incr.sum() == 6
        assert incr[0] <= 3

    def test_infeasible_rejected(self):
        ledger = BudgetLedger(m0=4, m=6, initial_counts=np.array([2, 2]))
        with pytest.raises(ValueError, match="infeasible"):
            assign_budget(np.array([0.5, 0.5]), ledger, 1, capacities=np.array([2, 3]))

    def test_paper_literal_mode(self):
        # raw = (alpha - prev) * m = (0.2, -0.2) * 10 -> clamp (2, 0) -> scale to 10
        ledger = BudgetLedger(m0=10, m=10, initial_counts=np.array([5, 5]))
        incr = assign_budget(np.array([0.7, 0.3]), ledger, 1,
                             capacities=np.array([50, 50]), mode="paper_literal",
                             prev_alpha_cols=np.array([0.5, 0.5]))
        np.testing.assert_array_equal(incr, [10, 0])

    def test_paper_literal_needs_previous(self):
        ledger = BudgetLedger(m0=10, m=10, initial_counts=np.array([5, 5]))
        with pytest.raises(ValueError, match="previous"):
            assign_budget(np.array([0.7, 0.3]), ledger, 1,
                          capacities=np.array([50, 50]), mode="paper_literal")

    def test_round_zero_rejected(self):
        ledger = BudgetLedger(m0=10, m=10, initial_counts=np.array([5, 5]))
        with pytest.raises(ValueError, match="round"):
            assign_budget(np.array([0.5, 0.5]), ledger, 0, capacities=np.array([9, 9]))
