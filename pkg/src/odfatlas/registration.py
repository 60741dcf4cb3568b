"""Diffeomorphic registration of ODF fields by geodesic shooting.

The cost of an initial momentum ``m0`` is ``<m0, K m0>_2`` plus
``(1 / sigma^2) * sum_x alpha(x) * vol * dist(phi_1 . source, target)^2`` over
the target foreground. Gradients come from reverse-mode differentiation of the
discrete forward model (shooting, group action, distance).
"""
from dataclasses import dataclass, field

import numpy as np
import torch

from ._torch import chord_to_angle_sq, tensor
from .diffeo import DEFAULT_T, KernelSpec, VectorField3, geodesic_shoot, kernel_operator, shoot_core
from .errors import DomainError, FlowInstabilityError, FoldedMapError, InvalidArgumentError, StepSizeError
from .transport import OdfField, act_core, check_compatible

DEFAULT_MAX_ITER = 50
DEFAULT_TOL = 1e-4
ARMIJO_C = 1e-4
MAX_HALVINGS = 20
# smallest admissible <psi, psi'> at a foreground voxel (cut locus guard)
MIN_DOT = 1e-9
# gradient L2 norm treated as zero
GRAD_EPS = 1e-9
# first trial step moves the velocity by this fraction of a voxel
FIRST_STEP_VOXELS = 0.5
# squared distance treated as an exact match (rounding level)
MATCHED_SQ = 1e-14


@dataclass(frozen=True, eq=False)
class RegProblem:
    source: OdfField
    target: OdfField
    kernel: KernelSpec
    sigma2: float = 1.0
    weight_map: np.ndarray = None
    timesteps: int = DEFAULT_T

    def __post_init__(self):
        check_compatible(self.source, self.target)
        if not self.sigma2 > 0:
            raise InvalidArgumentError(f"sigma2 must be positive, got {self.sigma2}")
        if self.timesteps < 1:
            raise InvalidArgumentError("timesteps must be >= 1")
        if self.weight_map is not None:
            w = np.asarray(self.weight_map, dtype=np.float64)
            if w.shape != self.lattice.dims:
                raise InvalidArgumentError(f"weight map shape {w.shape} does not match lattice")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise InvalidArgumentError("weight map must be finite and nonnegative")
            object.__setattr__(self, "weight_map", w)

    @property
    def lattice(self):
        return self.source.lattice


@dataclass
class RegResult:
    m0: VectorField3
    flow: object
    objective_trace: list = field(default_factory=list)
    final_data_term: float = 0.0
    iterations: int = 0

    @property
    def initial_data_term(self):
        return self.objective_trace[0][2]


class _Objective:
    """Cached tensors of one registration problem."""

    def __init__(self, prob):
        self.prob = prob
        lat = prob.lattice
        self.lattice = lat
        self.sel = np.flatnonzero(prob.target.mask)
        self.src = tensor(prob.source.values)
        self.tgt = tensor(prob.target.values.reshape(-1, prob.target.grid.K)[self.sel])
        alpha = np.ones(lat.dims) if prob.weight_map is None else prob.weight_map
        self.alpha = tensor(alpha.reshape(-1)[self.sel])
        self.qw = tensor(prob.source.grid.quad_weights)
        self.K = kernel_operator(prob.kernel, lat)
        self.vol = lat.voxel_volume

    def terms(self, m, check_folds=True):
        fwd, inv, _, _ = shoot_core(m, self.prob.kernel, self.lattice, self.prob.timesteps)
        out, _ = act_core(self.src, fwd[-1], inv[-1], self.lattice, self.prob.source.grid, self.sel,
                          check_folds=check_folds)
        dot = (out * self.tgt) @ self.qw
        low = dot.detach() <= MIN_DOT
        if bool(low.any()):
            k = int(torch.nonzero(low)[0])
            vox = tuple(int(i) for i in np.unravel_index(int(self.sel[k]), self.lattice.dims))
            raise DomainError(f"matched ODFs are pi/2 apart at voxel {vox}")
        prior = self.vol * torch.sum(m * self.K(m))
        diff = out - self.tgt
        sq = chord_to_angle_sq((diff * diff) @ self.qw)
        self.max_sq = float(sq.detach().max()) if sq.numel() else 0.0
        data = (self.vol / self.prob.sigma2) * torch.sum(self.alpha * sq)
        return prior, data

    def value(self, m_np):
        with torch.no_grad():
            p, d = self.terms(tensor(m_np))
        return float(p), float(d)

    def trial(self, m_np):
        """Cost terms at ``m_np`` plus a callable returning the L2 gradient there."""
        m = tensor(np.array(m_np, dtype=np.float64)).requires_grad_(True)
        p, d = self.terms(m)

        def grad():
            (p + d).backward()
            g = m.grad.numpy() / self.vol
            return g * self.lattice.interior(1)[..., None]

        return float(p.detach()), float(d.detach()), grad

    def value_and_grad(self, m_np):
        p, d, grad = self.trial(m_np)
        return p, d, grad()


def _as_field(prob, m0):
    if m0 is None:
        return np.zeros(prob.lattice.dims + (3,))
    if m0.lattice != prob.lattice:
        raise InvalidArgumentError("momentum lattice does not match the problem")
    return np.array(m0.values)


def matching_energy(m0, prob):
    """``(prior, data)`` cost terms of initial momentum ``m0``."""
    return _Objective(prob).value(_as_field(prob, m0))


def energy_gradient(m0, prob):
    """L2 gradient of the total cost with respect to ``m0``.

    ``<energy_gradient(m0), dm>_2`` is the directional derivative along ``dm``.
    """
    _, _, g = _Objective(prob).value_and_grad(_as_field(prob, m0))
    return VectorField3(prob.lattice, g)


def _l2(a, b, vol):
    return vol * float(np.sum(a * b))


def register(prob, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL, log=None):
    """Steepest descent on ``m0`` with Armijo backtracking, starting at zero.

    Stops when the relative decrease of the total cost drops below ``tol``,
    when the gradient vanishes, or after ``max_iter`` iterations.
    """
    if max_iter < 1:
        raise InvalidArgumentError("max_iter must be >= 1")
    obj = _Objective(prob)
    lat = prob.lattice
    vol = lat.voxel_volume
    m = np.zeros(lat.dims + (3,))
    prior, data, g = obj.value_and_grad(m)
    # at m0 = 0 the prior vanishes, so an exact match is the global minimum
    matched = obj.max_sq <= MATCHED_SQ
    E = prior + data
    trace = [(0, prior, data)]
    step = None
    it = 0
    for it in range(1, max_iter + 1):
        gg = _l2(g, g, vol)
        if (it == 1 and matched) or np.sqrt(gg) <= GRAD_EPS:
            break
        if step is None:
            with torch.no_grad():
                kg = obj.K(tensor(g)).norm(dim=-1).max()
            step = FIRST_STEP_VOXELS * lat.min_spacing / max(float(kg), 1e-300)
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            trial = m - step * g
            try:
                tp, td, tgrad = obj.trial(trial)
            except (FlowInstabilityError, FoldedMapError, DomainError):
                step *= 0.5
                continue
            if tp + td <= E - ARMIJO_C * step * gg:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if it == 1:
                raise StepSizeError("line search failed on the first iteration")
            break
        m = trial
        prior, data, g = tp, td, tgrad()
        E_new = prior + data
        trace.append((it, prior, data))
        if log is not None:
            log(it, prior, data, step)
        rel = (E - E_new) / max(abs(E), 1e-300)
        E = E_new
        step *= 2.0
        if rel < tol:
            break
    m0 = VectorField3(lat, m)
    flow, _ = geodesic_shoot(m0, prob.kernel, prob.timesteps)
    return RegResult(m0=m0, flow=flow, objective_trace=trace, final_data_term=trace[-1][2],
                     iterations=it)


def squared_residuals(flow, source, target):
    """``dist(phi_1 . source, target)^2`` at each target-foreground voxel.

    Uses the same discrete action as the registration data term. Returns a
    field of shape ``dims`` that is zero on the target background.
    """
    check_compatible(source, target)
    lat = target.lattice
    sel = np.flatnonzero(target.mask)
    fwd, inv = flow.final()
    with torch.no_grad():
        out, _ = act_core(tensor(source.values), tensor(fwd), tensor(inv), lat, source.grid, sel)
        tgt = tensor(target.values.reshape(-1, target.grid.K)[sel])
        diff = out - tgt
        sq = chord_to_angle_sq((diff * diff) @ tensor(target.grid.quad_weights))
    r = np.zeros(lat.n_voxels)
    r[sel] = sq.numpy()
    return r.reshape(lat.dims)
