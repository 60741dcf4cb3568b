import numpy as np
import pytest

import odfatlas.atlas as atlas_mod
from odfatlas.atlas import (
    AtlasConfig, AtlasState, EMError, SubjectFit, compute_psi_bar, estep_register_all, mean_distance,
    mstep_update_atlas, run_em, update_sigma2)
from odfatlas.diffeo import VectorField3, diffeo_metric, jacobian_det
from odfatlas.errors import FoldedMapError, InvalidArgumentError
from odfatlas.manifold import SqrtOdf, geodesic_dist, log_map
from odfatlas.registration import RegProblem, register
from odfatlas.synth import CohortSpec, generate_cohort
from odfatlas.transport import act, identity_flow, pullback

SPEC = CohortSpec(n_subjects=3, dims=(8, 8, 8), grid_level=1, momentum_scale=40.0, noise_sigma=0.01, seed=5)
CFG = AtlasConfig(em_iters=2, reg_max_iter=3, reg_tol=1e-3, timesteps=4)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(SPEC)


def identity_fits(subjects):
    lat = subjects[0].lattice
    flow = identity_flow(lat)
    return [SubjectFit(VectorField3.zeros(lat), flow, 0.0, jacobian_det(flow)) for _ in subjects]


def test_config_validation(monkeypatch):
    with pytest.raises(InvalidArgumentError):
        AtlasConfig(sigma_v=5.0, sigma_vpi=5.0)
    with pytest.raises(InvalidArgumentError):
        AtlasConfig(em_iters=0)
    cfg = AtlasConfig(workers=3)
    monkeypatch.delenv("ODFATLAS_THREADS", raising=False)
    assert cfg.n_workers() == 3
    monkeypatch.setenv("ODFATLAS_THREADS", "2")
    assert cfg.n_workers() == 2
    assert AtlasConfig().subject_kernel.sigma_v == 5.0 and AtlasConfig().atlas_kernel.sigma_v == 8.0


# -- E-step ------------------------------------------------------------------------------------

def test_estep_identical_subjects(cohort):
    state = AtlasState.initial(cohort.atlas)
    fits = estep_register_all(state, [cohort.atlas] * 3, CFG)
    metrics = [diffeo_metric(f.m0, CFG.subject_kernel) for f in fits]
    assert np.mean(metrics) < 1e-6
    assert state.subject_ids == [0, 1, 2]


def test_estep_deterministic_across_workers(cohort):
    runs = []
    for workers in (1, 3):
        state = AtlasState.initial(cohort.atlas)
        state.sigma2 = 0.01
        cfg = AtlasConfig(em_iters=1, reg_max_iter=2, timesteps=4, workers=workers)
        runs.append(estep_register_all(state, cohort.subjects, cfg))
    for a, b in zip(*runs):
        assert np.array_equal(a.m0.values, b.m0.values)
        assert np.array_equal(a.flow.forward, b.flow.forward)
        assert a.data_term == b.data_term


@pytest.mark.slow
def test_estep_recovers_planted_metrics():
    # noise-free cohort, data-dominated registration
    spec = CohortSpec(n_subjects=3, dims=(12, 12, 12), grid_level=1, momentum_scale=300.0, seed=11)
    c = generate_cohort(spec)
    state = AtlasState.initial(c.atlas)
    state.sigma2 = 1e-4
    cfg = AtlasConfig(reg_max_iter=40, reg_tol=1e-5, timesteps=10)
    fits = estep_register_all(state, c.subjects, cfg)
    k = cfg.subject_kernel
    got = np.mean([diffeo_metric(f.m0, k) for f in fits])
    planted = np.mean([diffeo_metric(m, k) for m in c.momenta])
    assert abs(got / planted - 1) < 0.2


def test_estep_error_names_subject(cohort, monkeypatch):
    def boom(prob, *a, **k):
        raise FoldedMapError("folded")

    monkeypatch.setattr(atlas_mod, "register", boom)
    state = AtlasState.initial(cohort.atlas)
    with pytest.raises(FoldedMapError, match="subject 0"):
        estep_register_all(state, {0: cohort.subjects[0], 1: cohort.subjects[1]}, CFG)


# -- Karcher field -----------------------------------------------------------------------------

def test_psi_bar_identical_subjects(cohort):
    s = cohort.subjects[0]
    out = compute_psi_bar(identity_fits([s] * 3), [s] * 3, CFG, mask=s.mask)
    assert np.max(np.abs(out.values - s.values)) < 1e-10


def test_psi_bar_two_subject_midpoints(cohort):
    a, b = cohort.subjects[0], cohort.subjects[1]
    mask = a.mask & b.mask
    cfg = AtlasConfig(karcher_tol=1e-12)
    out = compute_psi_bar(identity_fits([a, b]), [a, b], cfg, mask=mask)
    w = a.grid.quad_weights
    for v in np.argwhere(mask)[::7]:
        v = tuple(v)
        p, q = a.values[v], b.values[v]
        th = np.arccos(min(1.0, (p * q) @ w))
        mid = (p + q) * np.sin(th / 2) / np.sin(th) if th > 0 else p
        assert np.max(np.abs(out.values[v] - mid)) < 1e-8


def test_cross_term_vanishes(cohort):
    state = AtlasState.initial(cohort.atlas)
    state.sigma2 = 0.01
    cfg = AtlasConfig(reg_max_iter=2, timesteps=4)
    fits = estep_register_all(state, cohort.subjects, cfg)
    psi_bar = compute_psi_bar(fits, cohort.subjects, cfg, mask=cohort.atlas.mask)
    pulled = [pullback(f.flow, s) for f, s in zip(fits, cohort.subjects)]
    g = cohort.atlas.grid
    rng = np.random.default_rng(0)
    vox = np.argwhere(cohort.atlas.mask)
    for i in rng.choice(len(vox), 100):
        v = tuple(vox[i])
        base = SqrtOdf(psi_bar.values[v], g)
        dets = [f.jac_det[v] for f in fits]
        s = sum(d * log_map(base, SqrtOdf(p.values[v], g)).values for d, p in zip(dets, pulled))
        assert np.sqrt((s * s) @ g.quad_weights) <= 10 * cfg.karcher_tol * sum(dets)


# -- sigma2 ----------------------------------------------------------------------------------------

def test_sigma2_zero_for_exact_match(cohort):
    state = AtlasState.initial(cohort.atlas)
    # identity action reproduces the field up to rounding
    state.per_subject = identity_fits([cohort.atlas])
    assert update_sigma2(state, [cohort.atlas]) < 1e-20
    state.per_subject = identity_fits([cohort.atlas] * 3)
    assert update_sigma2(state, [cohort.atlas] * 3) < 1e-20


def test_sigma2_matches_two_pass_recomputation(cohort):
    state = AtlasState.initial(cohort.atlas)
    state.sigma2 = 0.01
    cfg = AtlasConfig(reg_max_iter=2, timesteps=4)
    estep_register_all(state, cohort.subjects, cfg)
    got = update_sigma2(state, cohort.subjects)
    g = cohort.atlas.grid
    vol = cohort.atlas.lattice.voxel_volume
    total, count = 0.0, 0
    for fit, subj in zip(state.per_subject, cohort.subjects):
        warped = act(fit.flow, cohort.atlas)
        for v in np.argwhere(subj.mask):
            v = tuple(v)
            d = geodesic_dist(SqrtOdf(warped.values[v], g), SqrtOdf(subj.values[v], g))
            total += vol * d * d
            count += 1
    expect = total / ((g.K - 1) * count)
    assert abs(got - expect) <= 1e-10 * expect


# -- M-step ------------------------------------------------------------------------------------------

def test_mstep_psi_bar_equal_hyperatlas(cohort):
    state = AtlasState.initial(cohort.atlas)
    state.per_subject = identity_fits(cohort.subjects)
    state.psi_bar = cohort.atlas
    state.sigma2 = 0.01
    m0, new = mstep_update_atlas(state, CFG)
    assert np.all(m0.values == 0)
    assert np.max(np.abs(new.values - cohort.atlas.values)) < 1e-10


def test_mstep_identity_flows_equal_rescaled_registration(cohort):
    state = AtlasState.initial(cohort.atlas)
    state.per_subject = identity_fits(cohort.subjects)
    state.psi_bar = cohort.subjects[0]
    state.sigma2 = 0.03
    cfg = AtlasConfig(reg_max_iter=4, reg_tol=1e-8, timesteps=4)
    m0, _ = mstep_update_atlas(state, cfg)
    n = len(cohort.subjects)
    plain = RegProblem(cohort.atlas, state.psi_bar, cfg.atlas_kernel, state.sigma2 / n, timesteps=4)
    ref = register(plain, 4, 1e-8)
    assert np.max(np.abs(m0.values - ref.m0.values)) < 1e-6


# -- full loop ------------------------------------------------------------------------------------------

def test_run_em_identical_cohort():
    spec = CohortSpec(n_subjects=3, dims=(8, 8, 8), grid_level=1, seed=2)
    c = generate_cohort(spec)
    state = run_em(c.subjects, c.atlas, AtlasConfig(em_iters=1, reg_max_iter=3, timesteps=4))
    assert len(state.diagnostics) == 1
    assert mean_distance(state.atlas, c.subjects[0]) < 1e-3
    assert state.sigma2 < 1e-6


def test_run_em_diagnostics_and_recomputation(cohort):
    state = run_em(cohort.subjects, cohort.atlas, CFG)
    assert 1 <= len(state.diagnostics) <= CFG.em_iters
    assert [d.iteration for d in state.diagnostics] == list(range(1, len(state.diagnostics) + 1))
    last = state.diagnostics[-1]
    assert last.sigma2 == state.sigma2 >= 0
    assert all(d.wall_seconds > 0 for d in state.diagnostics)
    assert np.all(np.isfinite(state.atlas.values))


def test_run_em_subject_order_invariant(cohort):
    ids = ["s2", "s0", "s1"]
    a = run_em(dict(zip(ids, cohort.subjects)), cohort.atlas, CFG)
    b = run_em({k: s for k, s in reversed(list(zip(ids, cohort.subjects)))}, cohort.atlas, CFG)
    for da, db in zip(a.diagnostics, b.diagnostics):
        for col in ("mean_metric", "std_metric", "sigma2", "mean_odf_residual"):
            assert abs(getattr(da, col) - getattr(db, col)) <= 1e-10
    assert np.array_equal(a.atlas.values, b.atlas.values)


def test_run_em_error_keeps_partial_state(cohort, monkeypatch):
    calls = {"n": 0}
    real = atlas_mod.mstep_update_atlas

    def flaky(state, cfg):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FoldedMapError("folded in M-step")
        return real(state, cfg)

    monkeypatch.setattr(atlas_mod, "mstep_update_atlas", flaky)
    cfg = AtlasConfig(em_iters=3, reg_max_iter=2, timesteps=4, stop_rel_change=0.0)
    with pytest.raises(EMError) as e:
        run_em(cohort.subjects, cohort.atlas, cfg)
    assert e.value.iteration == 2
    assert isinstance(e.value.cause, FoldedMapError)
    assert len(e.value.state.diagnostics) == 1


def test_run_em_needs_two_subjects(cohort):
    with pytest.raises(InvalidArgumentError):
        run_em([cohort.subjects[0]], cohort.atlas, CFG)
