"""Exact linear-assignment solver (Kuhn-Munkres with dual potentials).

Serves two roles: the exact optimal-transport oracle for equal-weight point
clouds, and the matcher behind the Hungarian-matched segmentation metric.
O(n^3) shortest-augmenting-path formulation; all comparisons are strict,
so ties resolve to the smallest column index and the result is
deterministic for identical input.
"""

from __future__ import annotations

import numpy as np


def solve(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimize sum_i cost[i, perm[i]] over permutations.

    Returns (perm, total_cost) where perm[i] is the column assigned to
    row i.  The matrix must be square with finite entries.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"solve: cost matrix must be square, got {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("solve: cost matrix has non-finite entries")
    n = c.shape[0]

    # 1-indexed duals and matching; column 0 is the virtual root.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)   # match[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    perm = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    total = float(c[np.arange(n), perm].sum())
    return perm, total


def brute_force(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Reference minimum over all permutations; factorial time, n <= 9 or so."""
    from itertools import permutations

    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    best_perm, best_cost = None, np.inf
    rows = np.arange(n)
    for p in permutations(range(n)):
        total = c[rows, list(p)].sum()
        if total < best_cost:
            best_cost = total
            best_perm = p
    return np.asarray(best_perm, dtype=np.int64), float(best_cost)
