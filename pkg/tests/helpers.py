"""Shared builders for the test suite."""
from functools import lru_cache

import numpy as np

from odfatlas.diffeo import DiffeoFlow, Lattice3
from odfatlas.manifold import SqrtOdf
from odfatlas.sphere import make_sphere_grid
from odfatlas.transport import OdfField

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


@lru_cache(maxsize=None)
def grid(level, hemisphere=False):
    return make_sphere_grid(level, hemisphere=hemisphere)


def random_odf(g, rng, floor=0.05):
    """Strictly positive random square-root ODF."""
    v = rng.uniform(floor, 1.0, g.K)
    return SqrtOdf(v / np.sqrt((v * v) @ g.quad_weights), g)


def near_odf(base, rng, eps):
    """Perturb-and-project: a positive ODF close to ``base``."""
    g = base.grid
    v = np.maximum(base.values * (1.0 + eps * rng.standard_normal(g.K)), 1e-3)
    return SqrtOdf(v / np.sqrt((v * v) @ g.quad_weights), g)


def smooth_field(lattice, g, rng, n_bumps=3, mask=None):
    """Spatially smooth positive ODF field built from a few Gaussian blobs."""
    x = lattice.positions() / np.asarray(lattice.spacing)
    dims = np.asarray(lattice.dims)
    vals = np.full(lattice.dims + (g.K,), 0.3)
    for _ in range(n_bumps):
        c = rng.uniform(0.3, 0.7, 3) * (dims - 1)
        mu = rng.standard_normal(3)
        mu /= np.linalg.norm(mu)
        spatial = np.exp(-((x - c) ** 2).sum(-1) / (2 * (0.3 * dims.min()) ** 2))
        lobe = np.exp(4.0 * ((g.directions @ mu) ** 2 - 1.0))
        vals += spatial[..., None] * lobe
    vals /= np.sqrt((vals * vals) @ g.quad_weights)[..., None]
    mask = np.ones(lattice.dims, bool) if mask is None else mask
    return OdfField(lattice, g, vals, mask)


def linear_flow(lattice, A, center=None):
    """Flow of the affine map ``x -> c + A (x - c)`` with analytic inverse."""
    x = lattice.positions()
    c = (np.asarray(lattice.dims) - 1) * np.asarray(lattice.spacing) / 2 if center is None else center
    A = np.asarray(A, dtype=np.float64)
    phi = c + (x - c) @ A.T
    phi_inv = c + (x - c) @ np.linalg.inv(A).T
    return DiffeoFlow.from_maps(lattice, phi, phi_inv)


def cube(n, h=1.0):
    return Lattice3((n, n, n), (h, h, h))


# -- momentum conservation oracle -------------------------------------------------

CONSERVATION_LATTICE = Lattice3((33, 33, 33), (0.75, 0.75, 0.75))
CONSERVATION_SIGMA = 4.0


def conservation_problem(seed=1, amplitude=0.6, width=0.3):
    """Smooth initial momentum and 10 smooth test fields on a fine lattice.

    The momentum is a sum of three Gaussian blobs scaled so the peak velocity
    is ``amplitude`` mm per unit time.
    """
    from odfatlas.diffeo import KernelSpec, VectorField3, apply_kernel

    lat = CONSERVATION_LATTICE
    k = KernelSpec(CONSERVATION_SIGMA)
    rng = np.random.default_rng(seed)
    x = lat.positions()
    h = lat.spacing[0]
    c = (np.asarray(lat.dims) - 1) * h / 2
    L = (lat.dims[0] - 1) * h
    m = np.zeros(lat.dims + (3,))
    for _ in range(3):
        cc = c + rng.uniform(-L / 8, L / 8, 3)
        s = L * width
        m += rng.normal(size=3) * np.exp(-((x - cc) ** 2).sum(-1) / (2 * s * s))[..., None]
    m = VectorField3(lat, m)
    m = m * (amplitude / np.abs(apply_kernel(m, k).values).max())
    tests = [(rng.normal(size=3), c + rng.uniform(-L / 6, L / 6, 3), L / 7) for _ in range(10)]
    return lat, k, m, tests


def _test_field(p, a, cc, s):
    return a * np.exp(-((p - cc) ** 2).sum(-1) / (2 * s * s))[..., None]


def conservation_defect(flow, momenta, m0, tests, t):
    """Relative defect of ``<m_t, u> = <m_0, (D phi_t)^-1 u(phi_t)>`` over the test fields.

    Both sides are evaluated with the lattice L2 pairing; the defect is
    ``||lhs - rhs|| / ||rhs||`` over the vector of test fields.
    """
    from odfatlas.diffeo import jacobian_matrices

    lat = flow.lattice
    x = lat.positions()
    vol = lat.voxel_volume
    J = jacobian_matrices(flow.forward[t], lat.spacing)
    phi = x + flow.forward[t]
    lhs, rhs = [], []
    for a, cc, s in tests:
        lhs.append(vol * np.sum(momenta[t].values * _test_field(x, a, cc, s)))
        w = np.linalg.solve(J, _test_field(phi, a, cc, s)[..., None])[..., 0]
        rhs.append(vol * np.sum(m0.values * w))
    lhs, rhs = np.array(lhs), np.array(rhs)
    return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))


# -- registration problems --------------------------------------------------------

def fd_problem(seed, n=8, level=1, h=2.0, sigma_v=3.0, sigma2=0.05, m_peak=0.4):
    """Random registration problem plus a nonzero momentum and a perturbation.

    Returns ``(prob, m0, dm)``; the perturbation is a smooth random field.
    """
    from odfatlas.diffeo import KernelSpec, VectorField3, apply_kernel
    from odfatlas.registration import RegProblem

    rng = np.random.default_rng(seed)
    lat = Lattice3((n, n, n), (h, h, h))
    g = grid(level)
    k = KernelSpec(sigma_v)
    mask = lat.interior(1)
    src = smooth_field(lat, g, rng, mask=mask)
    tgt = smooth_field(lat, g, rng, mask=mask)
    alpha = rng.uniform(0.5, 1.5, lat.dims)

    def rand_field(peak):
        m = apply_kernel(VectorField3(lat, rng.standard_normal(lat.dims + (3,))), KernelSpec(1.5))
        return m * (peak / np.abs(apply_kernel(m, k).values).max())

    prob = RegProblem(src, tgt, k, sigma2, weight_map=alpha, timesteps=5)
    return prob, rand_field(m_peak), rand_field(1.0)


def fd_relative_error(prob, m, dm, eps=1e-5):
    from odfatlas.diffeo import inner
    from odfatlas.registration import energy_gradient, matching_energy

    an = inner(energy_gradient(m, prob), dm)
    fd = (sum(matching_energy(m + dm * eps, prob)) - sum(matching_energy(m - dm * eps, prob))) / (2 * eps)
    return abs(an - fd) / abs(fd)


# -- analytic ODF fields -----------------------------------------------------------

def rot(axis, deg):
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R = np.eye(3)
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


class AnalyticField:
    """Square-root ODF field given in closed form in position and direction."""

    def __init__(self, lattice, rng, n=3):
        self.lattice = lattice
        dims = np.asarray(lattice.dims, dtype=float)
        self.centers = [rng.uniform(0.3, 0.7, 3) * (dims - 1) * lattice.spacing for _ in range(n)]
        mus = rng.standard_normal((n, 3))
        self.mus = mus / np.linalg.norm(mus, axis=1, keepdims=True)
        self.width = 0.35 * dims.min() * min(lattice.spacing)

    def density(self, x, s):
        # x (..., 3) mm, s (..., K, 3) directions
        p = np.full(s.shape[:-1], 0.3 / (4 * np.pi))
        for c, mu in zip(self.centers, self.mus):
            a = np.exp(-((x - c) ** 2).sum(-1) / (2 * self.width ** 2))
            p = p + a[..., None] * (8 / (4 * np.pi * np.sinh(8))) * np.cosh(8 * (s @ mu))
        return p

    def sqrt_odf(self, x, s, g):
        psi = np.sqrt(self.density(x, s))
        return psi / np.sqrt((psi * psi) @ g.quad_weights)[..., None]

    def field(self, g, mask=None):
        x = self.lattice.positions()
        s = np.broadcast_to(g.directions, x.shape[:-1] + g.directions.shape)
        mask = np.ones(self.lattice.dims, bool) if mask is None else mask
        return OdfField(self.lattice, g, self.sqrt_odf(x, s, g), mask)
