"""Shared torch kernels used by the differentiable forward model.

All tensors are float64 on CPU. Intra-op threading is pinned to one thread so
reductions are bitwise reproducible; concurrency happens across subjects.
"""
import numpy as np
import torch

torch.set_num_threads(1)

DTYPE = torch.float64

# below this 1 - cos(theta), acos(c)**2 is evaluated by its Taylor series
_SERIES_CUTOFF = 1e-4


def tensor(a):
    if isinstance(a, torch.Tensor):
        return a
    a = np.ascontiguousarray(a, dtype=np.float64)
    if not a.flags.writeable:
        a = a.copy()
    return torch.from_numpy(a)


def acos_sq(c):
    """Smooth ``arccos(c)**2`` for c in [-1, 1].

    ``arccos`` has an infinite derivative at 1 but its square does not; near 1
    the series ``2x + x^2/3 + 8x^3/45`` in ``x = 1 - c`` is used instead.
    """
    x = (1.0 - c).clamp(min=0.0)
    near = x < _SERIES_CUTOFF
    xs = torch.where(near, x, torch.zeros_like(x))
    series = xs * (2.0 + xs * (1.0 / 3.0 + xs * (8.0 / 45.0)))
    cf = torch.where(near, torch.zeros_like(c), c).clamp(-1.0, 1.0)
    return torch.where(near, series, torch.arccos(cf) ** 2)


def chord_to_angle_sq(q):
    """Squared great-circle angle from the squared chord ``q = |a - b|^2`` of unit vectors.

    ``(2 asin(sqrt(q) / 2))**2``, with the series ``q + q^2/12 + q^3/90`` near
    zero so the value is exactly zero for identical inputs and smooth in ``q``.
    """
    q = q.clamp(0.0, 4.0)
    near = q < _SERIES_CUTOFF
    qs = torch.where(near, q, torch.zeros_like(q))
    series = qs * (1.0 + qs * (1.0 / 12.0 + qs * (1.0 / 90.0)))
    qf = torch.where(near, torch.ones_like(q), q)
    return torch.where(near, series, 4.0 * torch.asin(0.5 * torch.sqrt(qf)) ** 2)


def trilinear(field, pts):
    """Sample ``field`` (nx, ny, nz, C) at voxel coordinates ``pts`` (..., 3).

    Coordinates are clamped to the lattice, i.e. border values are replicated
    outside. Differentiable in both arguments.
    """
    nx, ny, nz, C = field.shape
    dims = torch.tensor([nx, ny, nz], dtype=pts.dtype)
    p = torch.minimum(pts.clamp(min=0.0), dims - 1)
    i0 = torch.floor(p.detach()).long()
    i0 = torch.minimum(i0, torch.tensor([nx - 2, ny - 2, nz - 2]).clamp(min=0))
    f = p - i0.to(p.dtype)
    flat = field.reshape(-1, C)
    lead = pts.shape[:-1]
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0:1], f[..., 1:2], f[..., 2:3]
    out = 0.0
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                idx = ((ix + dx) * ny + (iy + dy)) * nz + (iz + dz)
                out = out + (wx * wy * wz) * flat[idx.reshape(-1)].reshape(*lead, C)
    return out


def jacobian(disp, spacing):
    """Jacobian ``I + D(disp)`` of the map ``x + disp(x)``, shape (nx, ny, nz, 3, 3).

    Central differences inside, one-sided on the boundary shell.
    ``J[..., c, a] = d phi_c / d x_a``.
    """
    cols = []
    for a in range(3):
        cols.append(torch.gradient(disp, spacing=float(spacing[a]), dim=a, edge_order=1)[0])
    D = torch.stack(cols, dim=-1)
    return D + torch.eye(3, dtype=disp.dtype)


def det3(J):
    return (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )


def _keys(t):
    # Keys cubic convolution weights (a = -1/2) for fractional offset t in [0, 1)
    t2, t3 = t * t, t * t * t
    return (
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    )


def tricubic(field, pts):
    """Keys cubic-convolution sampling of ``field`` (nx, ny, nz, C) at ``pts`` (..., 3).

    Third-order accurate for smooth fields; neighbour indices are clamped at
    the border. Differentiable in both arguments.
    """
    nx, ny, nz, C = field.shape
    dims = torch.tensor([nx, ny, nz], dtype=pts.dtype)
    p = torch.minimum(pts.clamp(min=0.0), dims - 1)
    i0 = torch.floor(p.detach()).long()
    f = p - i0.to(p.dtype)
    flat = field.reshape(-1, C)
    lead = pts.shape[:-1]
    wx, wy, wz = (_keys(f[..., a : a + 1]) for a in range(3))
    ix = [(i0[..., 0] + o).clamp(0, nx - 1) for o in (-1, 0, 1, 2)]
    iy = [(i0[..., 1] + o).clamp(0, ny - 1) for o in (-1, 0, 1, 2)]
    iz = [(i0[..., 2] + o).clamp(0, nz - 1) for o in (-1, 0, 1, 2)]
    out = 0.0
    for a in range(4):
        for b in range(4):
            base = (ix[a] * ny + iy[b]) * nz
            wab = wx[a] * wy[b]
            for c in range(4):
                vals = flat[(base + iz[c]).reshape(-1)].reshape(*lead, C)
                out = out + (wab * wz[c]) * vals
    return out
