"""Entropy-regularized optimal transport between weighted point clouds.

All iterations run in the log domain (logsumexp only, never linear kernel
scaling) so the small-epsilon regime stays stable.  Annealing follows a
geometric epsilon schedule from max(C) down to the target, a small fixed
number of sweeps per stage, then full sweeps at the target epsilon.

Two execution paths share the same updates:
  * a numpy path for plain clouds, with tolerance-based stopping, and
  * an unrolled autodiff path (fixed sweep count, static graph) used by
    training losses; gradients come from differentiating through the
    unrolled loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import assignment
from .autodiff import Tensor, concat

_WEIGHT_FLOOR = 1e-300  # keeps log(w) finite for zero-weight points


@dataclass
class PointCloud:
    """Weighted empirical measure: n points in R^d, weights on the simplex."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError(f"PointCloud: points must be (n, d) with n >= 1, got {self.points.shape}")
        if self.weights.shape != (self.points.shape[0],):
            raise ValueError("PointCloud: weights must be a vector matching the point count")
        if np.any(self.weights < 0):
            raise ValueError("PointCloud: weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"PointCloud: weights sum to {self.weights.sum()!r}, not 1")

    @classmethod
    def uniform(cls, points: np.ndarray) -> "PointCloud":
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass
class SinkhornConfig:
    max_iters: int = 500
    tolerance: float = 1e-9
    anneal: bool = True
    anneal_factor: float = 0.5
    stage_iters: int = 10
    unroll_iters: int = 50


@dataclass
class SinkhornResult:
    cost: float
    potentials_f: np.ndarray
    potentials_g: np.ndarray
    iterations: int
    converged: bool
    epsilon_schedule: list[float] = field(default_factory=list)
    divergence: float | None = None


@dataclass
class TransportPlan:
    plan: np.ndarray


def cost_matrix(a: PointCloud, b: PointCloud, p: int = 2) -> np.ndarray:
    """C[i, j] = ||a_i - b_j||^p with p in {1, 2}; p=2 is squared Euclidean."""
    if a.dim != b.dim:
        raise ValueError(f"cost_matrix: ambient dimensions differ, {a.dim} vs {b.dim}")
    if p not in (1, 2):
        raise ValueError(f"cost_matrix: exponent must be 1 or 2, got {p}")
    diff = a.points[:, None, :] - b.points[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    return sq if p == 2 else np.sqrt(sq)


def _epsilon_schedule(eps0: float, target: float, factor: float) -> list[float]:
    """Geometric ladder eps0 * factor^k while above target, then target."""
    schedule = []
    eps = eps0
    while eps > target:
        schedule.append(eps)
        eps *= factor
    schedule.append(target)
    return schedule


def _log_weights(w: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(w, _WEIGHT_FLOOR))


def _solve_numpy(C: np.ndarray, wa: np.ndarray, wb: np.ndarray, epsilon: float,
                 config: SinkhornConfig) -> SinkhornResult:
    """Alternating log-domain dual updates until the row marginals settle."""
    loga = _log_weights(wa)
    logb = _log_weights(wb)
    n, m = C.shape
    f = np.zeros(n)
    g = np.zeros(m)

    def lse(x, axis):
        mx = np.max(x, axis=axis, keepdims=True)
        return (mx + np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True))).squeeze(axis)

    def sweep(eps):
        nonlocal f, g
        f = -eps * lse(logb[None, :] + (g[None, :] - C) / eps, axis=1)
        g = -eps * lse(loga[:, None] + (f[:, None] - C) / eps, axis=0)

    def row_violation(eps):
        # column marginals are exact right after a g-update; rows may be off
        f_next = -eps * lse(logb[None, :] + (g[None, :] - C) / eps, axis=1)
        return float(np.max(wa * np.abs(np.exp((f - f_next) / eps) - 1.0)))

    if config.anneal:
        eps0 = float(np.max(C))
        schedule = _epsilon_schedule(eps0, epsilon, config.anneal_factor) \
            if eps0 > epsilon else [epsilon]
    else:
        schedule = [epsilon]

    iterations = 0
    for eps in schedule[:-1]:
        for _ in range(config.stage_iters):
            sweep(eps)
            iterations += 1

    converged = False
    while iterations < config.max_iters:
        sweep(epsilon)
        iterations += 1
        if row_violation(epsilon) < config.tolerance:
            converged = True
            break

    cost = float(np.dot(wa, f) + np.dot(wb, g))
    return SinkhornResult(cost=cost, potentials_f=f, potentials_g=g,
                          iterations=iterations, converged=converged,
                          epsilon_schedule=schedule)


def sinkhorn(a: PointCloud, b: PointCloud, epsilon: float,
             config: SinkhornConfig | None = None, p: int = 2) -> SinkhornResult:
    """Regularized OT value and dual potentials between two clouds."""
    if epsilon <= 0:
        raise ValueError(f"sinkhorn: epsilon must be positive, got {epsilon}")
    config = config or SinkhornConfig()
    C = cost_matrix(a, b, p)
    return _solve_numpy(C, a.weights, b.weights, epsilon, config)


def sinkhorn_divergence(a: PointCloud, b: PointCloud, epsilon: float,
                        config: SinkhornConfig | None = None, p: int = 2) -> float:
    """Debiased divergence: cross cost minus the mean of the two self costs."""
    cross = sinkhorn(a, b, epsilon, config, p)
    self_a = sinkhorn(a, a, epsilon, config, p)
    self_b = sinkhorn(b, b, epsilon, config, p)
    return cross.cost - 0.5 * (self_a.cost + self_b.cost)


def transport_plan(result: SinkhornResult, a: PointCloud, b: PointCloud,
                   epsilon: float, p: int = 2) -> TransportPlan:
    """Primal coupling implied by converged dual potentials."""
    if not result.converged:
        raise ValueError("transport_plan: Sinkhorn result did not converge")
    C = cost_matrix(a, b, p)
    logp = (result.potentials_f[:, None] + result.potentials_g[None, :] - C) / epsilon
    plan = a.weights[:, None] * b.weights[None, :] * np.exp(logp)
    return TransportPlan(plan=plan)


def exact_ot(a: PointCloud, b: PointCloud, p: int = 2) -> float:
    """Exact OT value for equal-weight clouds of equal size via assignment.

    Restricted to the case where the optimum is a permutation (n = m,
    uniform weights, n <= 64); used as the ground-truth oracle.
    """
    if a.n != b.n:
        raise ValueError(f"exact_ot: cloud sizes differ, {a.n} vs {b.n}")
    if a.n > 64:
        raise ValueError(f"exact_ot: oracle restricted to n <= 64, got {a.n}")
    uniform = np.full(a.n, 1.0 / a.n)
    if not (np.allclose(a.weights, uniform, atol=1e-12) and
            np.allclose(b.weights, uniform, atol=1e-12)):
        raise ValueError("exact_ot: oracle requires equal (uniform) weights")
    _, total = assignment.solve(cost_matrix(a, b, p))
    return total / a.n


# -- differentiable path -------------------------------------------------------


def pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    """Squared Euclidean cost tensor (B, n, m) from batched clouds (B, n, d)."""
    bsz, n, d = x.shape
    m = y.shape[1]
    xd = x.reshape(bsz, n, 1, d).broadcast_to((bsz, n, m, d))
    yd = y.reshape(bsz, 1, m, d).broadcast_to((bsz, n, m, d))
    diff = xd - yd
    return (diff * diff).sum(axis=3)


def sinkhorn_divergence_batch(x: Tensor, y: Tensor, epsilon: float,
                              config: SinkhornConfig | None = None,
                              weights_x: np.ndarray | None = None,
                              weights_y: np.ndarray | None = None,
                              ) -> tuple[Tensor, bool]:
    """Debiased divergence per batch element, differentiable w.r.t. the points.

    x: (B, n, d), y: (B, m, d).  Weights default to uniform and are shared
    across the batch.  When n == m the cross and both self problems are
    stacked into one (3B, n, n) solve so the whole batch shares a single
    unrolled graph.  Returns ((B,) tensor, all_converged flag).
    """
    if epsilon <= 0:
        raise ValueError(f"sinkhorn_divergence_batch: epsilon must be positive, got {epsilon}")
    config = config or SinkhornConfig()
    bsz, n, d = x.shape
    m = y.shape[1]
    if y.shape[0] != bsz or y.shape[2] != d:
        raise ValueError(f"sinkhorn_divergence_batch: incompatible shapes {x.shape} and {y.shape}")
    wa = np.full(n, 1.0 / n) if weights_x is None else np.asarray(weights_x, dtype=np.float64)
    wb = np.full(m, 1.0 / m) if weights_y is None else np.asarray(weights_y, dtype=np.float64)
    loga, logb = _log_weights(wa), _log_weights(wb)

    if n == m:
        C = concat([pairwise_sq_dists(x, y), pairwise_sq_dists(x, x),
                    pairwise_sq_dists(y, y)], axis=0)
        rows = np.concatenate([np.broadcast_to(loga, (bsz, n)),
                               np.broadcast_to(loga, (bsz, n)),
                               np.broadcast_to(logb, (bsz, m))], axis=0)
        cols = np.concatenate([np.broadcast_to(logb, (bsz, m)),
                               np.broadcast_to(loga, (bsz, n)),
                               np.broadcast_to(logb, (bsz, m))], axis=0)
        f, g, _, converged = _solve_unrolled_w(C, rows, cols, epsilon, config)
        vals = (f * Tensor(np.exp(rows))).sum(axis=1) + (g * Tensor(np.exp(cols))).sum(axis=1)
        div = vals[:bsz] - 0.5 * (vals[bsz:2 * bsz] + vals[2 * bsz:])
        return div, converged

    parts = []
    converged = True
    for (px, py, la_arr, lb_arr) in (
            (x, y, loga, logb), (x, x, loga, loga), (y, y, logb, logb)):
        C = pairwise_sq_dists(px, py)
        rows = np.broadcast_to(la_arr, (bsz, C.shape[1]))
        cols = np.broadcast_to(lb_arr, (bsz, C.shape[2]))
        f, g, _, conv = _solve_unrolled_w(C, rows, cols, epsilon, config)
        converged = converged and conv
        parts.append((f * Tensor(np.exp(rows))).sum(axis=1) +
                     (g * Tensor(np.exp(cols))).sum(axis=1))
    div = parts[0] - 0.5 * (parts[1] + parts[2])
    return div, converged


def _solve_unrolled_w(C: Tensor, logrows: np.ndarray, logcols: np.ndarray,
                      epsilon: float, config: SinkhornConfig,
                      ) -> tuple[Tensor, Tensor, int, bool]:
    """As _solve_unrolled but with per-batch-row log-weight matrices."""
    bsz, n, m = C.shape
    eps0 = float(np.max(C.data))
    if config.anneal and eps0 > epsilon:
        schedule = _epsilon_schedule(eps0, epsilon, config.anneal_factor)
    else:
        schedule = [epsilon]

    f = Tensor(np.zeros((bsz, n)))
    g = Tensor(np.zeros((bsz, m)))
    la = Tensor(logrows)
    lb = Tensor(logcols)

    def sweep(f, g, eps):
        t = lb.reshape(bsz, 1, m) + (g.reshape(bsz, 1, m) - C) * (1.0 / eps)
        f = -eps * t.logsumexp(axis=2)
        s = la.reshape(bsz, n, 1) + (f.reshape(bsz, n, 1) - C) * (1.0 / eps)
        g = -eps * s.logsumexp(axis=1)
        return f, g

    iterations = 0
    for eps in schedule[:-1]:
        for _ in range(config.stage_iters):
            f, g = sweep(f, g, eps)
            iterations += 1
    for _ in range(config.unroll_iters):
        f, g = sweep(f, g, epsilon)
        iterations += 1

    fd, gd = f.data, g.data
    t = logcols[:, None, :] + (gd[:, None, :] - C.data) / epsilon
    mx = np.max(t, axis=2, keepdims=True)
    f_next = -epsilon * (mx + np.log(np.sum(np.exp(t - mx), axis=2, keepdims=True))).squeeze(2)
    wrows = np.exp(logrows)
    violation = float(np.max(wrows * np.abs(np.exp((fd - f_next) / epsilon) - 1.0)))
    return f, g, iterations, violation < config.tolerance
