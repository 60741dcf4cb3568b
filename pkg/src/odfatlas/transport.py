"""ODF fields and the diffeomorphic group action (warp, reorientation, rescaling)."""
from dataclasses import dataclass

import numpy as np
import torch

from ._torch import det3, jacobian, tensor, trilinear
from .diffeo import DiffeoFlow, Lattice3
from .errors import FoldedMapError, InvalidArgumentError, ValidationError
from .manifold import UNIT_TOL, SqrtOdf
from .sphere import SphereGrid, interp_weights, uniform_values

# determinant below which the local affine map counts as folded
MIN_DET = 1e-8


@dataclass(frozen=True, eq=False)
class OdfField:
    """One square-root ODF per voxel.

    ``values`` has shape ``dims + (K,)``. Background voxels (``mask`` False)
    are overwritten with the uniform ODF on construction; foreground voxels are
    validated against the square-root ODF invariants.
    """

    lattice: Lattice3
    grid: SphereGrid
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        m = np.array(self.mask, dtype=bool)
        if v.shape != self.lattice.dims + (self.grid.K,):
            raise InvalidArgumentError(
                f"expected values of shape {self.lattice.dims + (self.grid.K,)}, got {v.shape}")
        if m.shape != self.lattice.dims:
            raise InvalidArgumentError(f"mask shape {m.shape} does not match lattice {self.lattice.dims}")
        v[~m] = uniform_values(self.grid)
        fg = v[m]
        if not np.all(np.isfinite(fg)):
            raise ValidationError(f"non-finite ODF value at voxel {_first_voxel(m, ~np.all(np.isfinite(fg), -1))}")
        neg = np.any(fg < 0, axis=-1)
        if np.any(neg):
            raise ValidationError(f"negative ODF value at voxel {_first_voxel(m, neg)}")
        bad = np.abs((fg * fg) @ self.grid.quad_weights - 1.0) > 2 * UNIT_TOL
        if np.any(bad):
            raise ValidationError(f"ODF at voxel {_first_voxel(m, bad)} does not have unit norm")
        v.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @classmethod
    def uniform(cls, lattice, grid, mask=None):
        mask = np.ones(lattice.dims, dtype=bool) if mask is None else mask
        return cls(lattice, grid, np.broadcast_to(uniform_values(grid), lattice.dims + (grid.K,)), mask)

    def odf(self, voxel):
        return SqrtOdf(self.values[tuple(voxel)], self.grid)

    def compatible(self, other):
        return self.lattice == other.lattice and self.grid.same_as(other.grid)


def _first_voxel(mask, bad_among_fg):
    return tuple(int(i) for i in np.argwhere(mask)[np.flatnonzero(bad_among_fg)[0]])


def check_compatible(*fields):
    for f in fields[1:]:
        if not fields[0].compatible(f):
            raise InvalidArgumentError("ODF fields differ in lattice or sphere grid")


@dataclass
class ActReport:
    """Quality diagnostics of one group action."""

    degenerate_voxels: int
    mean_norm_defect: float


def direction_scale(A_inv, directions):
    """Reoriented directions and density factors for a local affine map.

    For ``B = A^-1`` returns ``s' = B s / |B s|`` and
    ``scale = sqrt(det(B) / |B s|^3)`` for every row ``s`` of ``directions``.
    """
    B = np.asarray(A_inv, dtype=np.float64)
    s = np.asarray(directions, dtype=np.float64)
    Bs = s @ B.T
    n = np.linalg.norm(Bs, axis=-1)
    return Bs / n[:, None], np.sqrt(np.linalg.det(B) / n ** 3)


def _affine_at(fwd, lattice, pts):
    J = jacobian(fwd, lattice.spacing)
    return trilinear(J.reshape(lattice.dims + (9,)), pts).reshape(pts.shape[:-1] + (3, 3))


def act_core(values, fwd, inv, lattice, grid, sel, check_folds=True):
    """Group action on tensors, evaluated at flat voxel indices ``sel``.

    ``values`` is (nx, ny, nz, K); ``fwd``/``inv`` are the displacement
    tensors of ``phi_1`` and ``phi_1^-1``. Returns ``(out, raw_norm)`` where
    ``out`` (M, K) is projected to the manifold and ``raw_norm`` (M,) is the
    norm before projection (zero marks a degenerate voxel, which gets the
    uniform ODF). Differentiable with respect to all tensor inputs.
    """
    h = torch.tensor(lattice.spacing, dtype=torch.float64)
    x = tensor(lattice.positions()).reshape(-1, 3)[sel]
    pts = (x + inv.reshape(-1, 3)[sel]) / h
    A = _affine_at(fwd, lattice, pts)
    detA = det3(A)
    if check_folds:
        dmin = float(detA.detach().min()) if detA.numel() else 1.0
        if not dmin > MIN_DET:
            k = int(torch.argmin(detA.detach()))
            vox = tuple(int(i) for i in np.unravel_index(int(sel[k]), lattice.dims))
            raise FoldedMapError(f"local affine map is singular (det {dmin:.3g}) at voxel {vox}", voxel=vox)
    B = torch.linalg.inv(A)
    s = tensor(grid.directions)
    Bs = torch.einsum("mab,kb->mka", B, s)
    n = Bs.norm(dim=-1)
    scale = torch.sqrt((1.0 / detA)[:, None] / n ** 3)
    owner, w = interp_weights(grid, Bs / n[..., None])
    blend = trilinear(values, pts)
    M, K = blend.shape
    sampled = torch.gather(blend, 1, owner.reshape(M, -1)).reshape(M, K, 3)
    raw = torch.relu(scale * (w * sampled).sum(-1))
    qw = tensor(grid.quad_weights)
    norm = torch.sqrt((raw * raw) @ qw)
    ok = norm > 0
    safe = torch.where(ok, norm, torch.ones_like(norm))
    uni = torch.full_like(raw, 1.0 / np.sqrt(4.0 * np.pi))
    out = torch.where(ok[:, None], raw / safe[:, None], uni)
    return out, norm


def local_affine(flow, voxel):
    """Jacobian of ``phi_1`` evaluated at ``phi_1^-1(x)`` for lattice voxel ``x``."""
    lattice = flow.lattice
    idx = tuple(int(i) for i in voxel)
    if any(i < 1 or i > n - 2 for i, n in zip(idx, lattice.dims)):
        raise InvalidArgumentError(f"voxel {idx} is not interior")
    fwd, inv = (tensor(a) for a in flow.final())
    h = torch.tensor(lattice.spacing, dtype=torch.float64)
    flat = np.ravel_multi_index(idx, lattice.dims)
    with torch.no_grad():
        x = tensor(lattice.positions()).reshape(-1, 3)[flat]
        A = _affine_at(fwd, lattice, ((x + inv.reshape(-1, 3)[flat]) / h)[None])[0].numpy()
    if not np.linalg.det(A) > MIN_DET:
        raise FoldedMapError(f"local affine map is singular at voxel {idx}", voxel=idx)
    return A


def _warp_mask(mask, inv, lattice):
    pos = (lattice.positions() + inv) / np.asarray(lattice.spacing)
    idx = np.clip(np.rint(pos).astype(int), 0, np.asarray(lattice.dims) - 1)
    return mask[idx[..., 0], idx[..., 1], idx[..., 2]]


def act_with_report(flow, field):
    """``flow . field`` together with an :class:`ActReport`."""
    if flow.lattice != field.lattice:
        raise InvalidArgumentError("flow and field lattices differ")
    lattice, grid = field.lattice, field.grid
    fwd, inv = flow.final()
    mask = _warp_mask(field.mask, inv, lattice)
    sel = np.flatnonzero(mask)
    values = np.broadcast_to(uniform_values(grid), lattice.dims + (grid.K,)).copy()
    with torch.no_grad():
        out, norm = act_core(tensor(field.values), tensor(fwd), tensor(inv), lattice, grid, sel)
    norm = norm.numpy()
    values.reshape(-1, grid.K)[sel] = out.numpy()
    report = ActReport(int(np.sum(norm == 0)), float(np.mean(np.abs(norm - 1.0))) if sel.size else 0.0)
    return OdfField(lattice, grid, values, mask), report


def act(flow, field):
    """Apply ``flow`` to an ODF field: warp, reorient by ``A^-1`` and rescale.

    At each foreground voxel ``x`` with ``A`` the Jacobian of ``phi_1`` at
    ``phi_1^-1(x)``, the output is
    ``psi(A^-1 s / |A^-1 s|, phi_1^-1(x)) * sqrt(det A^-1 / |A^-1 s|^3)``,
    reprojected to unit norm. The mask is warped by nearest neighbour.
    """
    return act_with_report(flow, field)[0]


def pullback(flow, field):
    """``phi_1^-1 . field``: the action of the inverse flow."""
    return act(flow.inverted(), field)


def field_distances(a, b):
    """Per-voxel geodesic distance between two compatible fields."""
    check_compatible(a, b)
    # chord form: exact zero for identical ODFs and no acos precision loss near 1
    diff = a.values - b.values
    chord = np.sqrt(np.einsum("...k,...k,k->...", diff, diff, a.grid.quad_weights))
    return 2.0 * np.arcsin(np.minimum(0.5 * chord, 1.0))


def identity_flow(lattice, T=1):
    return DiffeoFlow.identity(lattice, T)
