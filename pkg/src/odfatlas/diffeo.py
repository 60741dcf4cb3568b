"""Vector fields on a 3-D lattice, Gaussian RKHS kernels, flows and geodesic shooting.

Positions and displacements are in mm. A lattice point with index ``(i, j, k)``
sits at ``(i, j, k) * spacing``. Flows store displacements ``phi_t(x) - x`` so
the identity map is represented exactly.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

from ._torch import det3, jacobian, tensor, tricubic, trilinear
from .errors import FlowInstabilityError, FoldedMapError, InvalidArgumentError

DEFAULT_T = 10
KERNEL_TRUNCATION = 4.0
CFL_FRACTION = 0.5
INVERSE_TOLERANCE = 0.1


@dataclass(frozen=True)
class Lattice3:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(h) for h in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise InvalidArgumentError("dims and spacing need three entries")
        if min(dims) < 4:
            raise InvalidArgumentError(f"every dimension must be >= 4, got {dims}")
        if min(spacing) <= 0:
            raise InvalidArgumentError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    @property
    def min_spacing(self):
        return min(self.spacing)

    def positions(self):
        axes = [np.arange(n) * h for n, h in zip(self.dims, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def interior(self, margin=1):
        """Boolean mask that is False within ``margin`` voxels of the boundary."""
        m = np.zeros(self.dims, dtype=bool)
        m[margin:-margin, margin:-margin, margin:-margin] = True
        return m

    @cached_property
    def _shell_mask(self):
        return torch.from_numpy(self.interior(1).astype(np.float64))[..., None]


def _check_lattice(*objs):
    lat = objs[0].lattice
    for o in objs[1:]:
        if o.lattice != lat:
            raise InvalidArgumentError(f"lattice mismatch: {lat} vs {o.lattice}")
    return lat


@dataclass(frozen=True, eq=False)
class VectorField3:
    """Dense field of 3-vectors, values shaped ``dims + (3,)``.

    The one-voxel boundary shell is forced to zero on construction.
    """

    lattice: Lattice3
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != self.lattice.dims + (3,):
            raise InvalidArgumentError(f"expected shape {self.lattice.dims + (3,)}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("vector field has non-finite entries")
        v *= self.lattice.interior(1)[..., None]
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, lattice):
        return cls(lattice, np.zeros(lattice.dims + (3,)))

    def __add__(self, other):
        _check_lattice(self, other)
        return VectorField3(self.lattice, self.values + other.values)

    def __sub__(self, other):
        _check_lattice(self, other)
        return VectorField3(self.lattice, self.values - other.values)

    def __mul__(self, c):
        return VectorField3(self.lattice, self.values * float(c))

    __rmul__ = __mul__


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic Gaussian kernel ``k * Id_3`` with standard deviation ``sigma_v`` mm."""

    sigma_v: float
    role: str = "subject"

    def __post_init__(self):
        if not self.sigma_v > 0:
            raise InvalidArgumentError(f"sigma_v must be positive, got {self.sigma_v}")
        if self.role not in ("subject", "atlas_prior"):
            raise InvalidArgumentError(f"unknown kernel role {self.role!r}")

    def taps(self, spacing):
        """Per-axis 1-D taps, truncated at 4 sigma and normalized to unit sum."""
        out = []
        for h in spacing:
            s = self.sigma_v / h
            r = int(np.ceil(KERNEL_TRUNCATION * s))
            x = np.arange(-r, r + 1, dtype=np.float64)
            g = np.exp(-(x ** 2) / (2.0 * s * s))
            out.append(g / g.sum())
        return out


def smooth(values, taps):
    """Separable zero-padded convolution of a (nx, ny, nz, C) tensor."""
    out = values
    for axis, g in enumerate(taps):
        r = (len(g) - 1) // 2
        w = tensor(g).reshape(1, 1, -1)
        moved = out.movedim(axis, -1)
        shape = moved.shape
        conv = torch.nn.functional.conv1d(moved.reshape(-1, 1, shape[-1]), w, padding=r)
        out = conv.reshape(shape).movedim(-1, axis)
    return out


def kernel_operator(k, lattice):
    """Return ``m -> P G P m`` on tensors, with G the Gaussian and P the shell mask."""
    taps = k.taps(lattice.spacing)
    mask = lattice._shell_mask

    def apply(m):
        return smooth(m * mask, taps) * mask

    return apply


def l2_inner(a, b, lattice):
    """``<a, b>_2`` on tensors: voxel-volume weighted sum."""
    return lattice.voxel_volume * torch.sum(a * b)


def apply_kernel(m, k):
    """Velocity ``k_V m`` of a momentum field (per-component Gaussian smoothing)."""
    with torch.no_grad():
        v = kernel_operator(k, m.lattice)(tensor(m.values))
    return VectorField3(m.lattice, v.numpy())


def inner(a, b):
    _check_lattice(a, b)
    return float(a.lattice.voxel_volume * np.sum(a.values * b.values))


def diffeo_metric(m0, k):
    """Diffeomorphic metric ``sqrt(<m0, k_V m0>_2)``."""
    v = apply_kernel(m0, k)
    return float(np.sqrt(max(inner(m0, v), 0.0)))


@dataclass(frozen=True, eq=False)
class DiffeoFlow:
    """Time-sampled maps ``phi_t`` and inverses at ``t = 0, 1/T, ..., 1``.

    ``forward[t]`` and ``inverse[t]`` are displacement fields (mm) of shape
    ``dims + (3,)``, so that ``phi_t(x) = x + forward[t](x)``.
    """

    lattice: Lattice3
    forward: np.ndarray
    inverse: np.ndarray
    velocities: list = field(default=None, repr=False)

    def __post_init__(self):
        f = np.asarray(self.forward, dtype=np.float64)
        b = np.asarray(self.inverse, dtype=np.float64)
        shape = self.lattice.dims + (3,)
        if f.ndim != 5 or f.shape[1:] != shape or f.shape != b.shape or f.shape[0] < 2:
            raise InvalidArgumentError(f"flow arrays must be (T+1,) + {shape}")
        object.__setattr__(self, "forward", f)
        object.__setattr__(self, "inverse", b)

    @property
    def T(self):
        return self.forward.shape[0] - 1

    def maps(self):
        return self.lattice.positions()[None] + self.forward

    def inverse_maps(self):
        return self.lattice.positions()[None] + self.inverse

    def inverted(self):
        """The flow with the roles of ``phi`` and ``phi^-1`` swapped."""
        return DiffeoFlow(self.lattice, self.inverse, self.forward)

    def final(self):
        return self.forward[-1], self.inverse[-1]

    @classmethod
    def identity(cls, lattice, T=1):
        z = np.zeros((T + 1,) + lattice.dims + (3,))
        return cls(lattice, z, z.copy())

    @classmethod
    def from_maps(cls, lattice, phi, phi_inv):
        """Single-step flow from analytic end maps (position arrays in mm)."""
        x = lattice.positions()
        z = np.zeros_like(x)
        return cls(lattice, np.stack([z, phi - x]), np.stack([z, phi_inv - x]))

    def inverse_defect(self, t=None):
        """Max-norm of ``phi_t(phi_t^-1(x)) - x`` in mm (worst over t by default)."""
        ts = range(self.T + 1) if t is None else [t]
        h = _spacing_t(self.lattice)
        x = _positions_t(self.lattice)
        worst = 0.0
        with torch.no_grad():
            for s in ts:
                ui = tensor(self.inverse[s])
                d = ui + tricubic(tensor(self.forward[s]), (x + ui) / h)
                worst = max(worst, float(d.abs().max()))
        return worst


def _positions_t(lattice):
    return tensor(lattice.positions())


def _spacing_t(lattice):
    return torch.tensor(lattice.spacing, dtype=torch.float64)


def _cfl(v, dt, lattice, step):
    speed = float(v.detach().norm(dim=-1).max()) * dt
    if speed >= CFL_FRACTION * lattice.min_spacing:
        raise FlowInstabilityError(
            f"timestep {step}: displacement {speed:.4g} mm exceeds "
            f"{CFL_FRACTION} * min spacing", timestep=step)


def _backward_characteristics(vs, x, h, dt):
    # phi_t^-1(x): follow -v from time t back to 0
    y = x
    for v in reversed(vs):
        y = y - dt * trilinear(v, y / h)
    return y - x


def flow_core(velocity, n_steps, lattice):
    """Euler integration of ``d/dt phi = v_t(phi)`` on tensors.

    ``velocity(t, fwd, inv)`` returns ``v_t`` given the current displacement
    tensors; it is called once per step so geodesic shooting can close the loop
    through the momentum. Returns lists ``(fwd, inv, vs)``.
    """
    dt = 1.0 / n_steps
    h = _spacing_t(lattice)
    x = _positions_t(lattice)
    zero = torch.zeros_like(x)
    fwd, inv, vs = [zero], [zero], []
    for t in range(n_steps):
        v = velocity(t, fwd[t], inv[t])
        _cfl(v, dt, lattice, t)
        vs.append(v)
        fwd.append(fwd[t] + dt * trilinear(v, (x + fwd[t]) / h))
        inv.append(_backward_characteristics(vs, x, h, dt))
    return fwd, inv, vs


def transport_momentum(m0, inv_disp, lattice):
    """``|D phi^-1| (D phi^-1)^T m0 o phi^-1`` on tensors."""
    h = _spacing_t(lattice)
    J = jacobian(inv_disp, lattice.spacing)
    m = tricubic(m0, (_positions_t(lattice) + inv_disp) / h)
    mt = det3(J)[..., None] * torch.einsum("...ca,...c->...a", J, m)
    return mt * lattice._shell_mask


def shoot_core(m0, k, lattice, T):
    """Geodesic shooting on tensors. Returns ``(fwd, inv, vs, ms)``."""
    K = kernel_operator(k, lattice)
    ms = []

    def velocity(t, fwd, inv):
        m = m0 * lattice._shell_mask if t == 0 else transport_momentum(m0, inv, lattice)
        ms.append(m)
        return K(m)

    fwd, inv, vs = flow_core(velocity, T, lattice)
    ms.append(transport_momentum(m0, inv[-1], lattice))
    return fwd, inv, vs, ms


def _to_flow(lattice, fwd, inv, vs):
    flow = DiffeoFlow(
        lattice,
        np.stack([f.detach().numpy() for f in fwd]),
        np.stack([b.detach().numpy() for b in inv]),
        [VectorField3(lattice, v.detach().numpy()) for v in vs],
    )
    return flow


def _check_inverse(flow):
    tol = INVERSE_TOLERANCE * flow.lattice.min_spacing
    for t in range(flow.T + 1):
        d = flow.inverse_defect(t)
        if d >= tol:
            raise FlowInstabilityError(f"timestep {t}: inverse map inconsistent by {d:.3g} mm",
                                       timestep=t)


def integrate_flow(v, T=None):
    """Integrate a velocity sequence (list of ``VectorField3``, or one field held constant)."""
    if isinstance(v, VectorField3):
        v = [v]
    if not v:
        raise InvalidArgumentError("need at least one velocity field")
    lattice = _check_lattice(*v)
    T = len(v) if T is None else int(T)
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    if len(v) not in (1, T):
        raise InvalidArgumentError(f"got {len(v)} velocity fields for T={T}")
    vt = [tensor(f.values) for f in v]
    with torch.no_grad():
        fwd, inv, vs = flow_core(lambda t, f, b: vt[t if len(vt) > 1 else 0], T, lattice)
    flow = _to_flow(lattice, fwd, inv, vs)
    _check_inverse(flow)
    return flow


def geodesic_shoot(m0, k, T=DEFAULT_T):
    """Shoot the geodesic flow determined by initial momentum ``m0``.

    Returns ``(flow, momenta)`` where ``momenta[t]`` is ``m_t`` for
    ``t = 0..T`` as given by the momentum conservation law.
    """
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    lattice = m0.lattice
    with torch.no_grad():
        fwd, inv, vs, ms = shoot_core(tensor(m0.values), k, lattice, int(T))
    flow = _to_flow(lattice, fwd, inv, vs)
    _check_inverse(flow)
    return flow, [VectorField3(lattice, m.numpy()) for m in ms]


def jacobian_matrices(disp, spacing):
    with torch.no_grad():
        return jacobian(tensor(disp), spacing).numpy()


def jacobian_det(flow, t=None):
    """``|D phi_t|`` on the lattice (default ``t = T``)."""
    t = flow.T if t is None else t
    J = jacobian_matrices(flow.forward[t], flow.lattice.spacing)
    det = np.linalg.det(J)
    bad = np.argwhere(det <= 0)
    if len(bad):
        raise FoldedMapError(f"non-positive Jacobian determinant at voxel {tuple(bad[0])}",
                             voxel=tuple(bad[0]))
    return det
