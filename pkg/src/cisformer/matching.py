"""Minimum-cost bipartite assignment of ground-truth instances to prediction slots."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


class InfeasibleMatchError(ValueError):
    pass


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]  # (gt_index, prediction_index), sorted by gt_index
    total_cost: float

    @property
    def gt_indices(self) -> list[int]:
        return [g for g, _ in self.pairs]

    @property
    def pred_indices(self) -> list[int]:
        return [n for _, n in self.pairs]


def assignment_cost(cost: np.ndarray, cols) -> float:
    """Sum of ``cost[g, cols[g]]`` accumulated in row order."""
    total = 0.0
    for g, n in enumerate(cols):
        total += float(cost[g, n])
    return total


def _optimal_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def _lexicographic_refine(cost: np.ndarray, best: float) -> list[int]:
    """Lexicographically smallest column choice (row by row) among optimal assignments."""
    g, n = cost.shape
    tol = 1e-12 * max(1.0, abs(best))
    fixed: list[int] = []
    fixed_cost = 0.0
    for row in range(g):
        for col in range(n):
            if col in fixed:
                continue
            rest_rows = list(range(row + 1, g))
            rest_cols = [c for c in range(n) if c not in fixed and c != col]
            rest = _optimal_cost(cost[np.ix_(rest_rows, rest_cols)]) if rest_rows else 0.0
            if fixed_cost + float(cost[row, col]) + rest <= best + tol:
                fixed.append(col)
                fixed_cost += float(cost[row, col])
                break
    return fixed


def hungarian_match(cost_matrix) -> MatchAssignment:
    """Solve the ``G x N`` rectangular assignment problem (``G <= N``).

    Equal-cost optima are resolved toward the lexicographically smallest pair
    list, so the result does not depend on solver internals.  Ties can arise
    from distinct entries too (``a + d == b + c``), hence the refinement pass
    always runs; at these matrix sizes it costs a few small solves per row.
    """
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    g, n = cost.shape
    if g > n:
        raise InfeasibleMatchError(f"{g} ground-truth instances but only {n} predictions")
    if g == 0:
        return MatchAssignment([], 0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    cols = _lexicographic_refine(cost, assignment_cost(cost, [int(c) for c in cols[order]]))
    return MatchAssignment([(i, c) for i, c in enumerate(cols)], assignment_cost(cost, cols))

