"""Synthetic cohorts drawn from the generative model of the atlas.

planted atlas -> random smooth momenta -> geodesic flows -> group action ->
per-voxel tangent Gaussian noise pushed through the exponential map.
"""
from dataclasses import dataclass

import numpy as np
import torch

from ._torch import tensor
from .diffeo import KernelSpec, Lattice3, VectorField3, diffeo_metric, geodesic_shoot, jacobian_det, kernel_operator
from .errors import FlowInstabilityError, FoldedMapError, InvalidArgumentError
from .manifold import HALF_PI, _exp, _norm, _tangent_noise
from .sphere import make_sphere_grid
from .transport import OdfField, act

PHANTOMS = ("crossing_x", "bending_tract", "uniform")
VMF_KAPPA = 8.0
MASK_MARGIN = 2
# ground-truth flows must keep |D phi_1| above this
MIN_PLANTED_DET = 0.2
FOLD_RETRIES = 3


def vmf_axial(dirs, mu, kappa=VMF_KAPPA):
    """Antipodally symmetric von Mises-Fisher density ``(f(mu) + f(-mu)) / 2``.

    ``mu`` is (..., 3), ``dirs`` is (K, 3); returns (..., K).
    """
    c = kappa / (4.0 * np.pi * np.sinh(kappa))
    return c * np.cosh(kappa * (mu @ dirs.T))


def _tract_weights(kind, lattice):
    n = np.asarray(lattice.dims, dtype=np.float64)
    idx = lattice.positions() / np.asarray(lattice.spacing)
    c = (n - 1) / 2
    r = max(1.5, 0.2 * n.min())
    if kind == "crossing_x":
        w1 = np.exp(-((idx[..., 1] - c[1]) ** 2 + (idx[..., 2] - c[2]) ** 2) / (2 * r * r))
        w2 = np.exp(-((idx[..., 0] - c[0]) ** 2 + (idx[..., 2] - c[2]) ** 2) / (2 * r * r))
        mu1 = np.broadcast_to([1.0, 0.0, 0.0], idx.shape)
        mu2 = np.broadcast_to([0.0, 1.0, 0.0], idx.shape)
        return [(w1, mu1), (w2, mu2)]
    # bending_tract: quarter circle in the xy-plane around the (0, 0) corner
    R = 0.55 * min(n[0], n[1])
    rho = np.hypot(idx[..., 0], idx[..., 1])
    theta = np.arctan2(idx[..., 1], idx[..., 0])
    w = np.exp(-((rho - R) ** 2 + (idx[..., 2] - c[2]) ** 2) / (2 * r * r))
    mu = np.stack([-np.sin(theta), np.cos(theta), np.zeros_like(theta)], axis=-1)
    return [(w, mu)]


def phantom_density(kind, lattice, dirs):
    """Unnormalized phantom ODF densities at arbitrary directions, (dims..., len(dirs))."""
    if kind not in PHANTOMS:
        raise InvalidArgumentError(f"unknown phantom {kind!r}; choose from {PHANTOMS}")
    dirs = np.asarray(dirs, dtype=np.float64)
    iso = np.full(lattice.dims + (len(dirs),), 1.0 / (4.0 * np.pi))
    if kind == "uniform":
        return iso
    tracts = _tract_weights(kind, lattice)
    p = 0.0
    wmax = np.zeros(lattice.dims)
    for w, mu in tracts:
        p = p + w[..., None] * vmf_axial(dirs, mu)
        wmax = np.maximum(wmax, w)
    return p + (1.0 - wmax)[..., None] * iso


def make_phantom(kind, lattice, grid):
    """Phantom ODF field on a foreground box inset by two voxels.

    ``crossing_x`` has tracts along x and y meeting at the center (equal vMF
    mixture there); ``bending_tract`` follows a quarter circle; ``uniform`` is
    isotropic. Tracts fade into isotropic ODFs with a Gaussian profile.
    """
    p = phantom_density(kind, lattice, grid.directions)
    psi = np.sqrt(p)
    psi /= np.sqrt((psi * psi) @ grid.quad_weights)[..., None]
    return OdfField(lattice, grid, psi, lattice.interior(MASK_MARGIN))


def _seed_rng(*keys):
    entropy = [int(k) for k in np.hstack([np.ravel(k) for k in keys])]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def sample_momentum_grf(lattice, kernel, scale, seed):
    """Smooth random momentum with diffeomorphic metric exactly ``scale``.

    White noise smoothed once by the kernel (a surrogate for a GRF whose
    covariance is the kernel itself), then rescaled.
    """
    if scale < 0:
        raise InvalidArgumentError("scale must be nonnegative")
    if scale == 0:
        return VectorField3.zeros(lattice)
    z = _seed_rng(seed).standard_normal(lattice.dims + (3,))
    with torch.no_grad():
        m = kernel_operator(kernel, lattice)(tensor(z)).numpy()
    m = VectorField3(lattice, m)
    return m * (scale / diffeo_metric(m, kernel))


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int = 5
    dims: tuple = (16, 16, 16)
    spacing: tuple = (3.0, 3.0, 3.0)
    grid_level: int = 2
    momentum_scale: float = 0.0
    noise_sigma: float = 0.0
    phantom: str = "crossing_x"
    seed: int = 0
    sigma_vpi: float = 5.0
    timesteps: int = 10

    def __post_init__(self):
        if self.n_subjects < 1:
            raise InvalidArgumentError("n_subjects must be >= 1")
        if self.momentum_scale < 0 or self.noise_sigma < 0:
            raise InvalidArgumentError("momentum_scale and noise_sigma must be nonnegative")
        if self.phantom not in PHANTOMS:
            raise InvalidArgumentError(f"unknown phantom {self.phantom!r}")

    @property
    def lattice(self):
        return Lattice3(self.dims, self.spacing)


@dataclass
class Cohort:
    spec: CohortSpec
    atlas: OdfField
    subjects: list
    flows: list
    momenta: list


def add_tangent_noise(field, sigma, seed):
    """Perturb every foreground ODF by ``exp(xi)`` with ``xi ~ N(0, sigma^2 Id)``."""
    if sigma == 0:
        return field
    w = field.grid.quad_weights
    fg = field.values[field.mask]
    xi = _tangent_noise(fg, w, sigma, _seed_rng(seed, 1))
    # keep inside the injectivity radius of exp
    n = _norm(xi, w)
    xi *= np.minimum(1.0, HALF_PI / np.maximum(n, 1e-300))[:, None]
    values = field.values.copy()
    values[field.mask] = _exp(fg, xi, w)
    return OdfField(field.lattice, field.grid, values, field.mask)


def _planted_flow(spec, kernel, seed):
    scale = spec.momentum_scale
    for attempt in range(FOLD_RETRIES + 1):
        m0 = sample_momentum_grf(spec.lattice, kernel, scale, seed)
        try:
            flow, _ = geodesic_shoot(m0, kernel, spec.timesteps)
            if jacobian_det(flow).min() > MIN_PLANTED_DET:
                return m0, flow
        except (FlowInstabilityError, FoldedMapError):
            pass
        scale *= 0.5
    raise FoldedMapError(f"planted flow folds after {FOLD_RETRIES} scale halvings (seed {seed})")


def make_subject(spec, atlas, index, kernel=None):
    kernel = kernel or KernelSpec(spec.sigma_vpi)
    m0, flow = _planted_flow(spec, kernel, (spec.seed, index))
    deformed = act(flow, atlas)
    return add_tangent_noise(deformed, spec.noise_sigma, (spec.seed, index)), flow, m0


def generate_cohort(spec):
    """Planted atlas plus ``n_subjects`` deformed, noisy observations.

    Subject ``i`` draws from streams keyed by ``(seed, i)`` only, so the cohort
    is reproducible and independent of evaluation order.
    """
    grid = make_sphere_grid(spec.grid_level)
    atlas = make_phantom(spec.phantom, spec.lattice, grid)
    subjects, flows, momenta = [], [], []
    for i in range(spec.n_subjects):
        s, f, m = make_subject(spec, atlas, i)
        subjects.append(s)
        flows.append(f)
        momenta.append(m)
    return Cohort(spec, atlas, subjects, flows, momenta)
