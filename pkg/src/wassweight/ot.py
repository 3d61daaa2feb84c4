"""Wasserstein distances between finite weighted point clouds.

Three routes:

* ``wasserstein_1d`` -- exact, by matching quantile functions.
* ``sliced_wasserstein`` -- average of 1-D distances over random directions.
* ``emd_exact`` -- exact Kantorovich problem with Euclidean ground cost,
  solved as an assignment problem or a sparse LP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist
from scipy.special import gammaln

from .errors import CapacityError, ConfigurationError, NumericError, ShapeError

DEFAULT_CAP = 512
MARGINAL_TOL = 1e-9


@dataclass(frozen=True)
class EmpiricalDistribution:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        w = np.asarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ShapeError(f"points must be a nonempty (n, d) array, got shape {pts.shape}")
        if w.shape != (pts.shape[0],):
            raise ShapeError(f"{pts.shape[0]} points but weights of shape {w.shape}")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise NumericError("distribution contains non-finite values")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigurationError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "EmpiricalDistribution":
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n) if n else np.zeros(0))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def translated(self, c) -> "EmpiricalDistribution":
        return EmpiricalDistribution(self.points + np.asarray(c, dtype=np.float64), self.weights)

    def scaled(self, a: float) -> "EmpiricalDistribution":
        return EmpiricalDistribution(self.points * a, self.weights)


def _as_dist(x) -> EmpiricalDistribution:
    return x if isinstance(x, EmpiricalDistribution) else EmpiricalDistribution.uniform(x)


@dataclass(frozen=True)
class TransportPlan:
    """Sparse coupling as parallel arrays of (source, target, mass)."""

    source: np.ndarray
    target: np.ndarray
    mass: np.ndarray

    def as_triples(self):
        return list(zip(self.source.tolist(), self.target.tolist(), self.mass.tolist()))

    def dense(self, n: int, m: int) -> np.ndarray:
        out = np.zeros((n, m))
        np.add.at(out, (self.source, self.target), self.mass)
        return out

    def marginal_error(self, a: np.ndarray, b: np.ndarray) -> float:
        row = np.bincount(self.source, weights=self.mass, minlength=a.size)
        col = np.bincount(self.target, weights=self.mass, minlength=b.size)
        return float(max(np.max(np.abs(row - a)), np.max(np.abs(col - b))))

    def check(self, a: np.ndarray, b: np.ndarray, tol: float = MARGINAL_TOL) -> None:
        if np.any(self.mass < 0):
            raise NumericError("transport plan has negative mass")
        err = self.marginal_error(a, b)
        if err > tol:
            raise NumericError(f"transport plan marginals off by {err:.3e} (tolerance {tol:.0e})")


def wasserstein_1d(x, y, p: float = 1.0) -> float:
    """Exact p-Wasserstein distance between two 1-D weighted distributions.

    Both supports are sorted, their CDFs merged at the union of breakpoints,
    and each resulting quantile slab contributes ``mass * |x_q - y_q|**p``.
    """
    x, y = _as_dist(x), _as_dist(y)
    if x.dim != 1 or y.dim != 1:
        raise ShapeError(f"wasserstein_1d needs 1-D inputs, got d={x.dim} and d={y.dim}")
    if p < 1:
        raise ConfigurationError("order p must be >= 1")
    xo = np.argsort(x.points[:, 0], kind="stable")
    yo = np.argsort(y.points[:, 0], kind="stable")
    xv, yv = x.points[xo, 0], y.points[yo, 0]
    u = np.cumsum(x.weights[xo])
    v = np.cumsum(y.weights[yo])
    u[-1] = v[-1] = 1.0
    levels = np.union1d(u, v)
    lo = np.concatenate(([0.0], levels[:-1]))
    mass = levels - lo
    mid = 0.5 * (lo + levels)
    ix = np.minimum(np.searchsorted(u, mid), xv.size - 1)
    iy = np.minimum(np.searchsorted(v, mid), yv.size - 1)
    total = float(np.sum(mass * np.abs(xv[ix] - yv[iy]) ** p))
    return total if p == 1 else total ** (1.0 / p)


def mean_abs_projection(d: int) -> float:
    """E|theta_1| for theta uniform on the unit sphere in R^d."""
    return float(np.exp(gammaln(d / 2.0) - gammaln((d + 1) / 2.0)) / np.sqrt(np.pi))


def random_directions(n: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((n, d))
    norms = np.linalg.norm(theta, axis=1, keepdims=True)
    # a zero draw has probability 0 but would poison the projection
    norms[norms == 0] = 1.0
    return theta / norms


def sliced_wasserstein(x, y, n_projections: int = 64, p: float = 1.0, seed: int = 0, calibrate: bool = True) -> float:
    """Mean 1-D Wasserstein distance over seeded random unit directions.

    With ``calibrate`` (default) the mean is divided by E|theta_1|, the average
    length a unit-sphere projection retains, so a pure translation by ``c``
    estimates ``|c|`` rather than roughly ``(2/pi)|c|`` in 2-D. In 1-D the
    constant is exactly 1. Ratios between distances, which is all the loss
    weighting uses, are unaffected.
    """
    x, y = _as_dist(x), _as_dist(y)
    if x.dim != y.dim:
        raise ShapeError(f"dimension mismatch: {x.dim} vs {y.dim}")
    if n_projections < 1:
        raise ConfigurationError("n_projections must be >= 1")
    theta = random_directions(n_projections, x.dim, seed)
    px = x.points @ theta.T
    py = y.points @ theta.T
    vals = np.array([
        wasserstein_1d(EmpiricalDistribution(px[:, k:k + 1], x.weights),
                       EmpiricalDistribution(py[:, k:k + 1], y.weights), p)
        for k in range(n_projections)
    ])
    est = float(np.mean(vals))
    if calibrate:
        est /= mean_abs_projection(x.dim)
    return est


def emd_exact(x, y, cap: int = DEFAULT_CAP) -> tuple[float, TransportPlan]:
    """Exact earth mover's distance with Euclidean ground cost.

    Equal-size uniform inputs go through ``linear_sum_assignment``; anything
    else is solved as the Kantorovich LP with HiGHS. Raises
    ``CapacityError`` above ``cap`` combined support points.
    """
    x, y = _as_dist(x), _as_dist(y)
    if x.dim != y.dim:
        raise ShapeError(f"dimension mismatch: {x.dim} vs {y.dim}")
    if x.n + y.n > cap:
        raise CapacityError(
            f"combined support {x.n + y.n} exceeds cap {cap}; subsample the inputs (see subsample())"
        )
    cost = cdist(x.points, y.points)
    if x.n == y.n and x.is_uniform and y.is_uniform:
        rows, cols = linear_sum_assignment(cost)
        mass = np.full(x.n, 1.0 / x.n)
        plan = TransportPlan(rows.astype(np.int64), cols.astype(np.int64), mass)
        value = float(np.sum(cost[rows, cols]) / x.n)
    else:
        plan, value = _emd_lp(cost, x.weights, y.weights)
    plan.check(x.weights, y.weights)
    return value, plan


def _emd_lp(cost, a, b):
    n, m = cost.shape
    # variable (i, j) lives at i * m + j
    rows_i = sparse.kron(sparse.identity(n), np.ones((1, m)))
    cols_j = sparse.kron(np.ones((1, n)), sparse.identity(m))
    a_eq = sparse.vstack([rows_i, cols_j]).tocsr()
    b_eq = np.concatenate([a, b])
    res = linprog(
        cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise NumericError(f"transport LP failed: {res.message}")
    flow = np.clip(res.x, 0.0, None)
    idx = np.flatnonzero(flow > 0.0)
    plan = TransportPlan((idx // m).astype(np.int64), (idx % m).astype(np.int64), flow[idx])
    return plan, float(np.dot(cost.ravel()[idx], flow[idx]))


def subsample(dist: EmpiricalDistribution, k: int, rng: np.random.Generator) -> EmpiricalDistribution:
    """Uniformly subsample ``k`` support points (without replacement), renormalising weights."""
    if dist.n <= k:
        return dist
    idx = np.sort(rng.choice(dist.n, size=k, replace=False))
    w = dist.weights[idx]
    return EmpiricalDistribution(dist.points[idx], w / w.sum())
