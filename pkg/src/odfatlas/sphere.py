"""Discrete unit sphere: icosphere directions with spherical-Voronoi weights."""
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch
from scipy.spatial import ConvexHull, SphericalVoronoi, cKDTree

from ._torch import acos_sq, tensor
from .errors import InvalidArgumentError

MAX_LEVEL = 5

# squared geodesic distance below which a query snaps to its nearest node
_NODE_SNAP = 1e-14


@dataclass(frozen=True, eq=False)
class SphereGrid:
    """Unit directions on S^2 with quadrature weights (steradians).

    A hemisphere grid (``antipodal_symmetric=True``) stores one direction of
    each antipodal pair; its weights sum to 2*pi and integrals are doubled.
    """

    directions: np.ndarray
    weights: np.ndarray
    antipodal_symmetric: bool = False

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3 or d.shape[0] < 6:
            raise InvalidArgumentError(f"need K >= 6 directions of shape (K, 3), got {d.shape}")
        if w.shape != (d.shape[0],):
            raise InvalidArgumentError("weights must have one entry per direction")
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-12):
            raise InvalidArgumentError("directions must be unit vectors")
        if np.any(w <= 0):
            raise InvalidArgumentError("quadrature weights must be positive")
        d.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "weights", w)

    @property
    def K(self):
        return self.directions.shape[0]

    @property
    def factor(self):
        return 2.0 if self.antipodal_symmetric else 1.0

    @cached_property
    def quad_weights(self):
        """Weights with the hemisphere doubling folded in."""
        w = self.weights * self.factor
        w.flags.writeable = False
        return w

    @cached_property
    def _extended(self):
        # candidate nodes for interpolation; antipodes are identified on hemisphere grids
        if self.antipodal_symmetric:
            dirs = np.vstack([self.directions, -self.directions])
            owner = np.concatenate([np.arange(self.K), np.arange(self.K)])
        else:
            dirs = self.directions
            owner = np.arange(self.K)
        return dirs, owner, cKDTree(dirs)

    def same_as(self, other):
        return self is other or (
            self.antipodal_symmetric == other.antipodal_symmetric
            and np.array_equal(self.directions, other.directions)
            and np.array_equal(self.weights, other.weights)
        )


def _icosahedron():
    g = (1.0 + 5.0 ** 0.5) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-g, g):
            verts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    v = np.array(verts)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def icosphere(level):
    """Vertices and triangular faces of the ``level``-times subdivided icosahedron."""
    verts = list(_icosahedron())
    faces = ConvexHull(np.array(verts)).simplices
    for _ in range(level):
        cache = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                cache[key] = len(verts)
                verts.append(m / np.linalg.norm(m))
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new)
    return np.array(verts), np.asarray(faces)


def _upper_representatives(d, tol=1e-12):
    z, y, x = d[:, 2], d[:, 1], d[:, 0]
    return (z > tol) | ((np.abs(z) <= tol) & ((y > tol) | ((np.abs(y) <= tol) & (x > 0))))


def make_sphere_grid(level=2, hemisphere=False):
    """Icosphere grid with ``10 * 4**level + 2`` directions.

    Weights are the areas of the spherical Voronoi cells of the vertices. With
    ``hemisphere=True`` only one vertex of each antipodal pair is kept.
    """
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_LEVEL:
        raise InvalidArgumentError(f"level must be an integer in 0..{MAX_LEVEL}, got {level!r}")
    d, _ = icosphere(int(level))
    w = SphericalVoronoi(d, radius=1.0).calculate_areas()
    if hemisphere:
        keep = _upper_representatives(d)
        d, w = d[keep], w[keep]
    return SphereGrid(d, w, antipodal_symmetric=hemisphere)


def quad_integrate(grid, values):
    """Quadrature of ``values`` (K, or (..., K)) over the sphere."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1:] != (grid.K,):
        raise InvalidArgumentError(f"expected {grid.K} values, got shape {values.shape}")
    return values @ grid.quad_weights


def uniform_values(grid):
    return np.full(grid.K, 1.0 / np.sqrt(4.0 * np.pi))


def nearest_nodes(grid, queries):
    """Indices into the extended node set of the 4 nearest nodes per query."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    _, idx = grid._extended[2].query(q, k=4)
    return idx.reshape(np.shape(queries)[:-1] + (4,))


def interp_weights(grid, queries, idx=None):
    """Differentiable interpolation weights for ``queries`` (..., 3) tensor.

    Returns ``(owner, w)``: value indices (..., 3) and normalized weights
    (..., 3). Weights are ``1/d_i^2 - 1/d_4^2`` with ``d`` the geodesic distance
    to the i-th nearest node; subtracting the 4th neighbour makes the weights
    vanish continuously when the neighbour set changes.
    """
    if idx is None:
        idx = nearest_nodes(grid, queries.detach().numpy())
    dirs, owner, _ = grid._extended
    nodes = tensor(dirs)[torch.from_numpy(idx)]
    c = (nodes * queries.unsqueeze(-2)).sum(-1)
    d2 = acos_sq(c)
    near = d2[..., :3]
    inv = 1.0 / near.clamp(min=1e-30) - 1.0 / d2[..., 3:4]
    w = inv / inv.sum(-1, keepdim=True)
    snap = near[..., :1] < _NODE_SNAP
    onehot = torch.zeros_like(w)
    onehot[..., 0] = 1.0
    w = torch.where(snap, onehot, w)
    return torch.from_numpy(owner[idx[..., :3]]), w


def interpolate_on_sphere(grid, values, query):
    """Evaluate the function sampled by ``values`` at unit direction(s) ``query``.

    Inverse squared geodesic distance weighting over the three nearest grid
    directions, offset by the fourth (see :func:`interp_weights`); exact at
    grid directions, a partition of unity, and continuous in ``query``.
    """
    values = np.asarray(values, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if values.shape != (grid.K,):
        raise InvalidArgumentError(f"expected {grid.K} values, got shape {values.shape}")
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > 1e-9):
        raise InvalidArgumentError("query must be a unit vector")
    with torch.no_grad():
        owner, w = interp_weights(grid, tensor(q))
        out = (w * tensor(values)[owner]).sum(-1).numpy()
    return float(out) if out.ndim == 0 else out
