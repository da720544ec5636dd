"""Minimal-cost bipartite matching of ground-truth objects to queries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]  # (query_index, gt_index), sorted by gt_index
    total_cost: float
    unmatched_queries: set[int] = field(default_factory=set)

    @property
    def query_for_gt(self) -> dict[int, int]:
        return {g: q for q, g in self.pairs}


def _solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path Hungarian method for n rows <= m columns.

    Returns (col_of_row, u, v) with dual potentials such that
    ``cost[i, j] - u[i] - v[j] >= 0`` everywhere, equality on the assignment,
    and ``v[j] == 0`` for unassigned columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: 1-based row holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _cost_of(cost: np.ndarray, cols) -> float:
    total = 0.0
    for i, j in enumerate(cols):
        total += float(cost[i, j])
    return total


def hungarian_match(cost) -> MatchAssignment:
    """Globally minimal injective assignment of M ground truths to Q queries.

    ``cost`` is (M, Q).  Among equal-cost optima the assignment whose
    query list (ordered by ground-truth index) is lexicographically smallest
    wins, so results do not depend on solver internals.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    M, Q = cost.shape
    if M > Q:
        raise ContractError(f"cannot match {M} ground truths to {Q} queries")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")
    if M == 0:
        return MatchAssignment([], 0.0, set(range(Q)))
    assign, u, v = _solve(cost)
    best = _cost_of(cost, assign)
    tol = 1e-11 * max(1.0, float(np.abs(cost).max()) * M)

    # Lexicographic refinement.  State for row i: the still-free columns
    # ``avail``, an optimal assignment of rows i.. (global column ids) and
    # optimal duals (u over rows i.., v over ``avail``).  A column can be part
    # of some optimum only if its reduced cost under those duals is zero.
    avail = list(range(Q))
    chosen: list[int] = []
    for i in range(M):
        sub = cost[i:][:, avail]
        sub_opt = _cost_of(cost[i:], assign)
        current = int(assign[0])
        reduced = sub[0] - u[0] - v
        for pos, c in enumerate(avail):
            if c >= current:
                break
            if reduced[pos] > tol:
                continue
            rest_cols = avail[:pos] + avail[pos + 1:]
            rest = cost[i + 1:][:, rest_cols]
            if rest.shape[0]:
                r_assign, r_u, r_v = _solve(rest)
            else:
                r_assign, r_u, r_v = np.empty(0, np.int64), np.empty(0), np.zeros(len(rest_cols))
            if float(sub[0, pos]) + _cost_of(rest, r_assign) <= sub_opt + tol:
                current = c
                assign = np.array([c] + [rest_cols[j] for j in r_assign], dtype=np.int64)
                u = np.concatenate([[0.0], r_u])
                v = np.insert(r_v, pos, 0.0)
                break
        chosen.append(current)
        keep = [k for k, c in enumerate(avail) if c != current]
        avail = [avail[k] for k in keep]
        assign, u, v = assign[1:], u[1:], v[keep]

    pairs = [(q, g) for g, q in enumerate(chosen)]
    total = _cost_of(cost, chosen)
    if total > best + tol:
        raise AssertionError("lexicographic refinement lost optimality")
    return MatchAssignment(pairs, total, set(range(Q)) - set(chosen))
