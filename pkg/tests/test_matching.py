import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightmdetr.matching import hungarian_match
from lightmdetr.tensor import ContractError


def brute_force(cost):
    """Smallest total cost over all injective maps, ties broken lexicographically."""
    M, Q = cost.shape
    best, best_cols = None, None
    for cols in itertools.permutations(range(Q), M):  # lexicographic order
        total = sum(cost[i, c] for i, c in enumerate(cols))
        if best is None or total < best:
            best, best_cols = total, cols
    return best, list(best_cols)


def exact_cost(cost, pairs):
    return sum(cost[g, q] for q, g in sorted(pairs, key=lambda p: p[1]))


class TestOracle:
    def test_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            Q = int(rng.integers(1, 8))
            M = int(rng.integers(0, min(5, Q) + 1))
            cost = rng.normal(size=(M, Q)) * rng.choice([0.1, 1.0, 100.0])
            result = hungarian_match(cost)
            best, _ = brute_force(cost)
            assert exact_cost(cost, result.pairs) == best

    def test_integer_ties_pick_lexicographic_first(self):
        rng = np.random.default_rng(5)
        for _ in range(150):
            Q = int(rng.integers(1, 8))
            M = int(rng.integers(1, min(5, Q) + 1))
            cost = rng.integers(0, 3, size=(M, Q)).astype(float)
            result = hungarian_match(cost)
            _, cols = brute_force(cost)
            assert [q for q, _ in sorted(result.pairs, key=lambda p: p[1])] == cols

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5).flatmap(lambda m: st.tuples(st.just(m), st.integers(m, 7))), st.integers(0, 2**31))
    def test_injective_and_complete(self, shape, seed):
        M, Q = shape
        cost = np.random.default_rng(seed).uniform(-3, 3, size=(M, Q))
        result = hungarian_match(cost)
        queries = [q for q, _ in result.pairs]
        assert sorted(g for _, g in result.pairs) == list(range(M))
        assert len(set(queries)) == M
        assert result.unmatched_queries == set(range(Q)) - set(queries)
        assert result.total_cost == pytest.approx(exact_cost(cost, result.pairs), abs=0)


def test_empty_ground_truth():
    result = hungarian_match(np.zeros((0, 4)))
    assert result.pairs == [] and result.unmatched_queries == {0, 1, 2, 3} and result.total_cost == 0


def test_more_objects_than_queries():
    with pytest.raises(ContractError):
        hungarian_match(np.zeros((3, 2)))


def test_non_finite_cost():
    cost = np.zeros((2, 3))
    cost[1, 1] = np.nan
    with pytest.raises(ContractError):
        hungarian_match(cost)


def test_hand_example():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]])
    result = hungarian_match(cost)
    # row 0 -> 1 and row 1 -> 0 costs 3; every alternative is worse
    assert sorted(result.pairs) == [(0, 1), (1, 0)]
    assert result.total_cost == 3.0
