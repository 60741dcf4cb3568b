"""EM estimation of an ODF atlas from a cohort of subject fields.

Each iteration registers the current atlas to every subject, averages the
pulled-back subjects with Jacobian weights (weighted Karcher mean), updates the
noise variance, and re-registers the hyperatlas to that average with a
Jacobian-sum weight map to obtain the new atlas.
"""
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffeo import DEFAULT_T, KernelSpec, VectorField3, diffeo_metric, jacobian_det
from .errors import ConvergenceError, InvalidArgumentError, OdfAtlasError
from .manifold import karcher_mean_arrays
from .registration import DEFAULT_MAX_ITER, DEFAULT_TOL, RegProblem, register, squared_residuals
from .transport import OdfField, act, check_compatible, field_distances, pullback

# registrations never see a noise variance below this
SIGMA2_FLOOR = 1e-12

DIAGNOSTIC_COLUMNS = ("iteration", "mean_metric", "std_metric", "sigma2", "mean_odf_residual", "wall_seconds")


@dataclass(frozen=True)
class AtlasConfig:
    sigma_v: float = 8.0
    sigma_vpi: float = 5.0
    em_iters: int = 10
    reg_max_iter: int = DEFAULT_MAX_ITER
    reg_tol: float = DEFAULT_TOL
    karcher_tol: float = 1e-8
    karcher_max_iter: int = 200
    timesteps: int = DEFAULT_T
    seed: int = 0
    stop_rel_change: float = 0.01
    workers: int = 0

    def __post_init__(self):
        if not self.sigma_v > self.sigma_vpi > 0:
            raise InvalidArgumentError("need sigma_v > sigma_vpi > 0")
        if self.em_iters < 1 or self.reg_max_iter < 1 or self.timesteps < 1:
            raise InvalidArgumentError("em_iters, reg_max_iter and timesteps must be >= 1")
        if not self.karcher_tol > 0 or not self.reg_tol > 0:
            raise InvalidArgumentError("tolerances must be positive")

    @property
    def subject_kernel(self):
        return KernelSpec(self.sigma_vpi, "subject")

    @property
    def atlas_kernel(self):
        return KernelSpec(self.sigma_v, "atlas_prior")

    def n_workers(self):
        env = os.environ.get("ODFATLAS_THREADS")
        if env:
            return max(1, int(env))
        return self.workers if self.workers > 0 else 1


@dataclass
class SubjectFit:
    m0: VectorField3
    flow: object
    data_term: float
    jac_det: np.ndarray


@dataclass
class IterationDiagnostics:
    iteration: int
    mean_metric: float
    std_metric: float
    sigma2: float
    mean_odf_residual: float
    wall_seconds: float

    def row(self):
        return tuple(getattr(self, c) for c in DIAGNOSTIC_COLUMNS)


@dataclass
class AtlasState:
    hyperatlas: OdfField
    m0: VectorField3
    sigma2: float
    atlas: OdfField
    psi_bar: OdfField = None
    per_subject: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    subject_ids: list = field(default_factory=list)

    @classmethod
    def initial(cls, hyperatlas):
        return cls(hyperatlas, VectorField3.zeros(hyperatlas.lattice), 1.0, hyperatlas)


class EMError(OdfAtlasError):
    """Wraps a failure inside the EM loop; ``state`` keeps the completed iterations."""

    def __init__(self, message, iteration, cause, state):
        super().__init__(message)
        self.iteration = iteration
        self.cause = cause
        self.state = state


def _ordered(subjects):
    """Subjects as ``(ids, fields)`` sorted by id; lists are keyed by position."""
    if isinstance(subjects, dict):
        ids = sorted(subjects)
        return ids, [subjects[k] for k in ids]
    return list(range(len(subjects))), list(subjects)


def _annotate(err, prefix):
    err.args = (f"{prefix}: {err.args[0] if err.args else ''}",) + tuple(err.args[1:])
    return err


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def estep_register_all(state, subjects, cfg):
    """Register the current atlas to every subject; fills ``state.per_subject``."""
    ids, fields = _ordered(subjects)
    check_compatible(state.atlas, *fields)
    kernel = cfg.subject_kernel

    def one(i):
        prob = RegProblem(state.atlas, fields[i], kernel, max(state.sigma2, SIGMA2_FLOOR),
                          timesteps=cfg.timesteps)
        try:
            res = register(prob, cfg.reg_max_iter, cfg.reg_tol)
            return SubjectFit(res.m0, res.flow, res.final_data_term, jacobian_det(res.flow))
        except OdfAtlasError as e:
            raise _annotate(e, f"subject {ids[i]}")

    state.per_subject = _map(one, range(len(fields)), cfg.n_workers())
    state.subject_ids = ids
    return state.per_subject


def compute_psi_bar(per_subject, subjects, cfg, mask=None):
    """Jacobian-weighted Karcher mean of the pulled-back subjects, voxel by voxel."""
    _, fields = _ordered(subjects)
    if len(per_subject) != len(fields):
        raise InvalidArgumentError("need one fit per subject")
    ref = fields[0]
    mask = ref.lattice.interior(1) if mask is None else mask
    sel = np.flatnonzero(mask)
    pulled = np.stack([pullback(f.flow, s).values.reshape(-1, ref.grid.K)[sel]
                       for f, s in zip(per_subject, fields)])
    weights = np.stack([f.jac_det.reshape(-1)[sel] for f in per_subject])
    try:
        mean, _, _ = karcher_mean_arrays(pulled, weights, ref.grid.quad_weights,
                                         cfg.karcher_tol, cfg.karcher_max_iter)
    except ConvergenceError as e:
        vox = tuple(int(i) for i in np.unravel_index(int(sel[e.index]), ref.lattice.dims))
        raise ConvergenceError(f"Karcher mean failed at voxel {vox} (residual {e.residual:.3g})",
                               residual=e.residual, index=vox) from e
    values = np.broadcast_to(ref.values[0, 0, 0], ref.values.shape).copy()
    values.reshape(-1, ref.grid.K)[sel] = mean
    return OdfField(ref.lattice, ref.grid, values, mask)


def update_sigma2(state, subjects):
    """Maximum-likelihood noise variance of the residual tangent vectors.

    ``sigma2 = sum_i sum_x vol * dist_i(x)^2 / ((K - 1) * sum_i N_i)`` with
    ``N_i`` the foreground size of subject ``i``: the per-degree-of-freedom
    mean of the squared residuals, in the units of the registration data term.
    """
    _, fields = _ordered(subjects)
    vol = state.atlas.lattice.voxel_volume
    total, count = 0.0, 0
    for fit, subj in zip(state.per_subject, fields):
        r = squared_residuals(fit.flow, state.atlas, subj)
        total += vol * float(np.sum(r[subj.mask]))
        count += int(subj.mask.sum())
    dof = state.atlas.grid.K - 1
    return total / (dof * count) if count else 0.0


def mstep_update_atlas(state, cfg):
    """Weighted registration of the hyperatlas to ``psi_bar``; returns ``(m0, atlas)``."""
    alpha = np.sum([f.jac_det for f in state.per_subject], axis=0)
    sigma2 = max(state.sigma2, SIGMA2_FLOOR)
    prob = RegProblem(state.hyperatlas, state.psi_bar, cfg.atlas_kernel, sigma2,
                      weight_map=alpha, timesteps=cfg.timesteps)
    res = register(prob, cfg.reg_max_iter, cfg.reg_tol)
    return res.m0, act(res.flow, state.hyperatlas)


def _diagnostics(state, subjects, cfg, it, wall):
    _, fields = _ordered(subjects)
    metrics = np.array([diffeo_metric(f.m0, cfg.subject_kernel) for f in state.per_subject])
    res = []
    for fit, subj in zip(state.per_subject, fields):
        r = squared_residuals(fit.flow, state.atlas, subj)
        res.append(np.sqrt(r[subj.mask]))
    return IterationDiagnostics(it, float(metrics.mean()), float(metrics.std()), float(state.sigma2),
                                float(np.mean(np.concatenate(res))), wall)


def run_em(subjects, hyperatlas, cfg, on_iteration=None):
    """Full EM loop starting from ``m0 = 0`` (atlas = hyperatlas) and ``sigma2 = 1``.

    Runs ``cfg.em_iters`` iterations or stops early once the mean diffeomorphic
    metric of the subject momenta changes by less than ``cfg.stop_rel_change``.
    """
    ids, fields = _ordered(subjects)
    if len(fields) < 2:
        raise InvalidArgumentError("need at least two subjects")
    check_compatible(hyperatlas, *fields)
    subjects = dict(zip(ids, fields))
    state = AtlasState.initial(hyperatlas)
    for it in range(1, cfg.em_iters + 1):
        t0 = time.perf_counter()
        try:
            estep_register_all(state, subjects, cfg)
            state.psi_bar = compute_psi_bar(state.per_subject, subjects, cfg, hyperatlas.mask)
            state.sigma2 = update_sigma2(state, subjects)
            diag = _diagnostics(state, subjects, cfg, it, 0.0)
            state.m0, state.atlas = mstep_update_atlas(state, cfg)
        except OdfAtlasError as e:
            raise EMError(f"EM iteration {it}: {e}", it, e, state) from e
        diag.wall_seconds = time.perf_counter() - t0
        state.diagnostics.append(diag)
        if on_iteration is not None:
            on_iteration(state, diag)
        if it >= 2:
            prev = state.diagnostics[-2].mean_metric
            if abs(diag.mean_metric - prev) <= cfg.stop_rel_change * abs(prev):
                break
    return state


def mean_distance(a, b, mask=None):
    """Mean per-voxel geodesic distance between two fields over ``mask``."""
    d = field_distances(a, b)
    mask = a.mask & b.mask if mask is None else mask
    return float(d[mask].mean())
