"""Square-root ODFs on the unit Hilbert sphere with the Fisher-Rao metric.

The public functions work on :class:`SqrtOdf` / :class:`TangentVec` values.
Underscore-prefixed kernels take plain arrays whose last axis is the sphere
index, so the same code serves single ODFs and whole voxel fields.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DegenerateInputError, DomainError, InvalidArgumentError, ValidationError
from .sphere import SphereGrid

HALF_PI = 0.5 * np.pi
# distances this close to pi/2 are treated as the cut locus of log
CUT_MARGIN = 1e-9
UNIT_TOL = 1e-8
# objective increases below this relative size are rounding noise
OBJECTIVE_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class SqrtOdf:
    values: np.ndarray
    grid: SphereGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.K,):
            raise InvalidArgumentError(f"expected {self.grid.K} values, got {v.shape}")
        if np.any(v < 0):
            raise ValidationError("square-root ODF values must be nonnegative")
        if abs(_norm(v, self.grid.quad_weights) - 1.0) > UNIT_TOL:
            raise ValidationError("square-root ODF must have unit L2 norm")
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, grid):
        return cls(np.full(grid.K, 1.0 / np.sqrt(4.0 * np.pi)), grid)


@dataclass(frozen=True, eq=False)
class TangentVec:
    values: np.ndarray
    base: SqrtOdf

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.base.values.shape:
            raise InvalidArgumentError("tangent vector and base point differ in length")
        if abs(_dot(v, self.base.values, self.base.grid.quad_weights)) > UNIT_TOL:
            raise ValidationError("tangent vector is not orthogonal to its base point")
        object.__setattr__(self, "values", v)

    @property
    def grid(self):
        return self.base.grid

    def norm(self):
        return _norm(self.values, self.grid.quad_weights)


# -- array kernels -----------------------------------------------------------

def _dot(a, b, w):
    return (a * b) @ w


def _norm(a, w):
    return np.sqrt(np.maximum(_dot(a, a, w), 0.0))


def _project(raw, w):
    v = np.maximum(raw, 0.0)
    n = _norm(v, w)
    if np.any(n == 0):
        raise DegenerateInputError("vector is identically zero after clamping negatives")
    return v / n[..., None] if np.ndim(n) else v / n


def _dist(p, q, w):
    # half-angle form: arccos of the inner product loses ~1e-8 near zero
    return 2.0 * np.arctan2(_norm(p - q, w), _norm(p + q, w))


def _log(b, t, w):
    c = _dot(b, t, w)
    u = t - c[..., None] * b if np.ndim(c) else t - c * b
    un = _norm(u, w)
    theta = np.arctan2(un, c)
    scale = np.where(un > 0, theta / np.where(un > 0, un, 1.0), 0.0)
    return u * (scale[..., None] if np.ndim(scale) else scale)


def _exp(b, xi, w):
    n = _norm(xi, w)
    nn = np.where(n > 1e-12, n, 1.0)
    if np.ndim(n):
        raw = np.cos(n)[..., None] * b + (np.sin(n) / nn)[..., None] * xi
        raw = np.where((n > 1e-12)[..., None], raw, b)
    else:
        raw = np.cos(n) * b + np.sin(n) / nn * xi if n > 1e-12 else b
    return _project(raw, w)


# -- public operations ---------------------------------------------------------

def _same_grid(a, b):
    if not a.same_as(b):
        raise InvalidArgumentError("square-root ODFs live on different sphere grids")


def _same_base(a, b):
    if a.base is not b.base:
        _same_grid(a.grid, b.grid)
        if not np.array_equal(a.base.values, b.base.values):
            raise InvalidArgumentError("tangent vectors have different base points")


def fr_inner(a, b):
    """Fisher-Rao inner product of two tangent vectors at the same base point."""
    _same_base(a, b)
    return float(_dot(a.values, b.values, a.grid.quad_weights))


def odf_dot(p, q):
    _same_grid(p.grid, q.grid)
    return float(_dot(p.values, q.values, p.grid.quad_weights))


def geodesic_dist(p, q):
    """Great-circle distance ``arccos <p, q>`` in [0, pi]."""
    _same_grid(p.grid, q.grid)
    return float(_dist(p.values, q.values, p.grid.quad_weights))


def project_to_manifold(raw, grid):
    """Clamp negatives to zero and rescale to unit norm."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (grid.K,):
        raise InvalidArgumentError(f"expected {grid.K} values, got {raw.shape}")
    return SqrtOdf(_project(raw, grid.quad_weights), grid)


def exp_map(base, xi):
    """Exponential map; tangent norms are restricted to [0, pi/2]."""
    if xi.base is not base:
        _same_base(xi, TangentVec(np.zeros_like(base.values), base))
    n = xi.norm()
    if n > HALF_PI + 1e-12:
        raise DomainError(f"tangent norm {n:.6g} exceeds pi/2")
    if n < 1e-12:
        return base
    return SqrtOdf(_exp(base.values, xi.values, base.grid.quad_weights), base.grid)


def log_map(base, target):
    """Logarithm map; undefined at distance pi/2 and beyond."""
    _same_grid(base.grid, target.grid)
    w = base.grid.quad_weights
    if _dist(base.values, target.values, w) >= HALF_PI - CUT_MARGIN:
        raise DomainError("target lies on or beyond the cut locus (distance >= pi/2)")
    v = _log(base.values, target.values, w)
    # remove the rounding-level component along base
    v = v - _dot(v, base.values, w) * base.values
    return TangentVec(v, base)


def sample_tangent_gaussian(base, sigma, seed):
    """Draw a centered Gaussian tangent vector with covariance ``sigma^2 Id``.

    The covariance is the identity with respect to the Fisher-Rao inner
    product: coordinate k has variance ``sigma^2 / w_k``. The component along
    ``base`` is then projected out, so ``E ||xi||^2 = sigma^2 (K - 1)``.
    Uses a counter-based Philox stream keyed by ``seed``.
    """
    if sigma < 0:
        raise InvalidArgumentError("sigma must be nonnegative")
    w = base.grid.quad_weights
    rng = np.random.Generator(np.random.Philox(seed))
    return TangentVec(_tangent_noise(base.values, w, sigma, rng), base)


def _tangent_noise(base_values, w, sigma, rng):
    z = rng.standard_normal(base_values.shape) * (sigma / np.sqrt(w))
    c = _dot(z, base_values, w)
    return z - (c[..., None] if np.ndim(c) else c) * base_values


def _objective(mean, points, weights, w):
    d = _dist(mean[None], points, w)
    return np.sum(weights * d * d, axis=0)


def karcher_mean_arrays(points, weights, w, tol=1e-8, max_iter=100):
    """Weighted Karcher means, vectorized over a batch.

    ``points`` is (n, M, K) and ``weights`` (n, M): M independent problems of n
    points each. Returns ``(means (M, K), residuals (M,), iterations (M,))``.
    The iteration is ``mean <- exp_mean(tau * sum_i w_i log_mean(p_i) / sum w)``
    with tau = 1, halved while the weighted squared-distance sum increases.
    """
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n, M, _ = points.shape
    if np.any(weights < 0):
        raise InvalidArgumentError("Karcher weights must be nonnegative")
    total = weights.sum(axis=0)
    if np.any(total <= 0):
        raise InvalidArgumentError("Karcher weights must have a positive sum")
    wn = weights / total
    for i in range(n):
        for j in range(i + 1, n):
            dij = _dist(points[i], points[j], w)
            bad = np.flatnonzero(dij >= HALF_PI - CUT_MARGIN)
            if bad.size:
                raise DomainError(f"inputs {i} and {j} are pi/2 apart (problem {bad[0]})")

    mean = points[np.argmax(weights, axis=0), np.arange(M)]
    residual = np.full(M, np.inf)
    iters = np.zeros(M, dtype=int)
    active = np.ones(M, dtype=bool)
    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        mu = mean[idx]
        pts = points[:, idx]
        ww = wn[:, idx]
        g = np.sum(ww[..., None] * _log(mu[None], pts, w), axis=0)
        g -= _dot(g, mu, w)[..., None] * mu
        r = _norm(g, w)
        residual[idx] = r
        done = r <= tol
        active[idx[done]] = False
        if it == max_iter:
            break
        step = ~done
        if not np.any(step):
            continue
        sidx = idx[step]
        mu, g, pts, ww = mu[step], g[step], pts[:, step], ww[:, step]
        f0 = _objective(mu, pts, ww, w) * (1.0 + OBJECTIVE_SLACK)
        tau = np.ones(len(sidx))
        cand = _exp(mu, g, w)
        for _ in range(30):
            worse = _objective(cand, pts, ww, w) > f0
            if not np.any(worse):
                break
            tau[worse] *= 0.5
            cand[worse] = _exp(mu[worse], tau[worse, None] * g[worse], w)
        mean[sidx] = cand
        iters[sidx] = it + 1
    if np.any(active):
        k = int(np.flatnonzero(active)[0])
        raise ConvergenceError(
            f"Karcher mean did not converge in {max_iter} iterations "
            f"(problem {k}, residual {residual[k]:.3g})", residual=float(residual[k]), index=k)
    return mean, residual, iters


def weighted_karcher_mean(points, weights=None, tol=1e-8, max_iter=100):
    """Weighted Karcher (Frechet) mean of square-root ODFs.

    Returns the point whose weighted mean log-map residual is below ``tol``.
    Inputs must be pairwise closer than pi/2.
    """
    if not points:
        raise InvalidArgumentError("need at least one point")
    grid = points[0].grid
    for p in points[1:]:
        _same_grid(grid, p.grid)
    weights = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(points),):
        raise InvalidArgumentError("need one weight per point")
    arr = np.stack([p.values for p in points])[:, None, :]
    mean, _, _ = karcher_mean_arrays(arr, weights[:, None], grid.quad_weights, tol, max_iter)
    return SqrtOdf(mean[0], grid)


def karcher_residual(mean, points, weights):
    """Norm of ``sum_i w_i log_mean(p_i) / sum_j w_j`` (zero at the Karcher mean)."""
    w = mean.grid.quad_weights
    weights = np.asarray(weights, dtype=np.float64)
    g = sum(wi * _log(mean.values, p.values, w) for wi, p in zip(weights, points)) / weights.sum()
    g = g - _dot(g, mean.values, w) * mean.values
    return float(_norm(g, w))
