import math
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import scipy.special
import scipy.stats

from exemplar_diffusion.experiment import ExperimentConfig, run_calibration
from exemplar_diffusion.geometry import BBox, iou
from exemplar_diffusion.sampler import Detection, SamplerConfig, sample
from exemplar_diffusion.synthworld import OracleDenoiser, OracleParams, make_dataset
from exemplar_diffusion.uncertainty import (
    ConfidenceRegion,
    EnsembleError,
    InsufficientSamplesError,
    SceneCoverage,
    best_match,
    box_corners,
    calibration,
    calibration_error,
    chi2_cdf,
    chi2_quantile,
    fit_corner_stats,
    gamma_p,
    mahalanobis,
    match_to_exemplar,
    regularize,
    run_ensemble,
    scene_coverage,
)
from oracles import chi2_quantile_mp


def det(b, score=0.9):
    return Detection(BBox(*b, 0, score), 0, score)


# chi-square -----------------------------------------------------------------


@pytest.mark.parametrize("alpha,dof,ref", [(0.95, 2, 5.9915), (0.95, 4, 9.4877)])
def test_chi2_reference_values(alpha, dof, ref):
    q = chi2_quantile(alpha, dof)
    assert abs(q - ref) < 1e-3
    assert abs(q - chi2_quantile_mp(alpha, dof)) < 1e-8
    assert chi2_cdf(ref, dof) == pytest.approx(alpha, abs=1e-5)


@pytest.mark.parametrize("dof", [1, 2, 3, 4, 7, 30])
@pytest.mark.parametrize("alpha", [0.01, 0.5, 0.9, 0.99, 0.999])
def test_chi2_against_scipy(alpha, dof):
    assert chi2_quantile(alpha, dof) == pytest.approx(scipy.stats.chi2.ppf(alpha, dof), abs=1e-7)


def test_gamma_p_against_scipy():
    for a in (0.5, 1.0, 2.5, 10.0, 50.0):
        for x in (1e-3, 0.1, 1.0, 3.0, 10.0, 60.0, 200.0):
            assert gamma_p(a, x) == pytest.approx(scipy.special.gammainc(a, x), abs=1e-13)


def test_chi2_lower_limit_and_monotone():
    assert chi2_quantile(1e-12, 2) < 1e-9
    alphas = np.linspace(0.01, 0.99, 40)
    qs = [chi2_quantile(a, 3) for a in alphas]
    assert all(b > a for a, b in zip(qs, qs[1:]))
    by_dof = [chi2_quantile(0.9, k) for k in range(1, 12)]
    assert all(b > a for a, b in zip(by_dof, by_dof[1:]))


@pytest.mark.parametrize("alpha,dof", [(0.0, 2), (1.0, 2), (0.5, 0)])
def test_chi2_domain(alpha, dof):
    with pytest.raises(ValueError):
        chi2_quantile(alpha, dof)


# Mahalanobis ----------------------------------------------------------------


def test_mahalanobis_examples():
    mu = np.array([0.3, 0.4])
    assert mahalanobis(mu, mu, np.eye(2)) == 0.0
    assert mahalanobis(mu + [1, 0], mu, np.eye(2)) == pytest.approx(1.0, abs=1e-12)
    assert mahalanobis(mu + [2, 1], mu, np.diag([4.0, 1.0])) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_mahalanobis_affine_invariance():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        L = rng.normal(size=(2, 2))
        cov = L @ L.T + 0.1 * np.eye(2)
        A = rng.normal(size=(2, 2))
        while abs(np.linalg.det(A)) < 0.2:
            A = rng.normal(size=(2, 2))
        b, x, mu = rng.normal(size=(3, 2))
        d1 = mahalanobis(x, mu, cov)
        d2 = mahalanobis(A @ x + b, A @ mu + b, A @ cov @ A.T)
        worst = max(worst, abs(d1 - d2))
    assert worst < 1e-8


def test_non_psd_rejected():
    with pytest.raises(ValueError):
        mahalanobis([0, 0], [1, 1], np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_regularize_singular():
    cov, degenerate = regularize(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert degenerate and np.linalg.eigvalsh(cov)[0] > 0
    cov, degenerate = regularize(np.zeros((2, 2)))
    assert degenerate and np.all(np.linalg.eigvalsh(cov) > 0)
    cov, degenerate = regularize(np.eye(2))
    assert not degenerate and np.array_equal(cov, np.eye(2))


# regions --------------------------------------------------------------------


def test_region_membership_matches_quantile():
    rng = np.random.default_rng(1)
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    reg = ConfidenceRegion([0.0, 0.0], cov, 0.95)
    for x in rng.normal(size=(200, 2)) * 3:
        assert reg.contains(x) == (mahalanobis(x, [0, 0], cov) ** 2 <= chi2_quantile(0.95, 2))


def test_ellipse_axes_ratio_and_json():
    reg = ConfidenceRegion([0.5, 0.5], np.diag([4.0, 1.0]) * 1e-4, 0.95)
    axes, angle = reg.ellipse()
    assert axes[0] / axes[1] == pytest.approx(2.0, abs=1e-12)
    assert axes[0] == pytest.approx(math.sqrt(4e-4 * chi2_quantile(0.95, 2)))
    assert abs(math.sin(angle)) < 1e-12
    j = reg.to_json()
    assert set(j) == {"center", "axes", "angle_rad", "alpha"}


def test_region_coverage_self_consistent():
    """A region fitted from M=100 Gaussian samples covers fresh draws at about alpha."""
    rng = np.random.default_rng(2)
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    chol = np.linalg.cholesky(cov)
    hits = []
    for _ in range(400):
        pts = rng.normal(size=(100, 2)) @ chol.T
        reg = ConfidenceRegion(pts.mean(axis=0), np.cov(pts, rowvar=False), 0.95)
        fresh = rng.normal(size=(50, 2)) @ chol.T
        hits.extend(reg.contains(x) for x in fresh)
    # finite-sample estimate of the covariance costs a little coverage
    assert abs(np.mean(hits) - 0.95) < 0.01


# matching and ensembles -------------------------------------------------------


EXEMPLAR = BBox(0.5, 0.5, 0.2, 0.2)


def test_match_every_member_exact():
    members = [[det(EXEMPLAR.as_array())] for _ in range(5)]
    matched = match_to_exemplar(members, EXEMPLAR)
    assert len(matched) == 5 and len({d.box for d in matched}) == 1


def test_match_none_raises():
    with pytest.raises(InsufficientSamplesError):
        match_to_exemplar([[det([0.1, 0.1, 0.05, 0.05])]] * 3, EXEMPLAR)


@pytest.mark.parametrize("seed", range(30))
def test_match_equals_bruteforce(seed):
    rng = np.random.default_rng(seed)
    members = []
    for _ in range(6):
        dets = []
        for _ in range(int(rng.integers(0, 6))):
            arr = EXEMPLAR.as_array() + rng.normal(0, 0.05, 4)
            arr[2:] = np.abs(arr[2:]) + 0.01
            dets.append(det(arr, float(rng.uniform())))
        members.append(dets)
    want = []
    for dets in members:
        ok = [d for d in dets if iou(d.box, EXEMPLAR) >= 0.5]
        if ok:
            want.append(max(ok, key=lambda d: d.score))
    if len(want) < 2:
        with pytest.raises(InsufficientSamplesError):
            match_to_exemplar(members, EXEMPLAR)
    else:
        assert match_to_exemplar(members, EXEMPLAR) == want


def test_fit_stats_symmetric_psd():
    rng = np.random.default_rng(3)
    matched = [det(EXEMPLAR.as_array() + rng.normal(0, 0.01, 4)) for _ in range(40)]
    st = fit_corner_stats(matched)
    for c in (st.cov_ul, st.cov_br):
        assert np.max(np.abs(c - c.T)) <= 1e-12
        assert np.linalg.eigvalsh(c)[0] >= -1e-10
    ul, br = box_corners(np.array([d.box.as_array() for d in matched]))
    assert np.allclose(st.mu_ul, ul.mean(axis=0)) and np.allclose(st.cov_br, np.cov(br, rowvar=False))
    with pytest.raises(InsufficientSamplesError):
        fit_corner_stats(matched[:1])


@pytest.fixture(scope="module")
def arc_scene():
    ds = make_dataset("grid_arc", 1, 4, seed=11)
    return ds.scenes[0], OracleDenoiser(OracleParams(), entropy=0.5)


def test_ensemble_seeds_and_size(arc_scene, cosine):
    scene, den = arc_scene
    cfg = SamplerConfig(n=60, n_star=30)
    members = run_ensemble(scene, [scene.objects[0].box], den, cfg, 4, 100, cosine)
    assert len(members) == 4
    assert members[2] == sample(scene, [scene.objects[0].box], den, replace(cfg, seed=102), cosine)
    with pytest.raises(ValueError):
        run_ensemble(scene, [], den, cfg, 1, 0, cosine)


def test_ensemble_forced_identical_seeds_degenerate(arc_scene, cosine):
    scene, den = arc_scene
    ex = scene.objects[0].box
    members = run_ensemble(scene, [ex], den, SamplerConfig(n=60, n_star=30), 2, 7, cosine, seed_fn=lambda b, i: b)
    assert members[0] == members[1]
    st = fit_corner_stats(match_to_exemplar(members, ex))
    assert st.degenerate


def test_ensemble_concurrent_equals_sequential(arc_scene, cosine):
    scene, den = arc_scene
    cfg = SamplerConfig(n=60, n_star=30)
    ex = [scene.objects[1].box]
    seq = run_ensemble(scene, ex, den, cfg, 6, 3, cosine)
    with ThreadPoolExecutor(4) as pool:
        par = run_ensemble(scene, ex, den, cfg, 6, 3, cosine, executor=pool)
    assert seq == par


def test_ensemble_error_names_member(cosine):
    class FailsOnSeed:
        def start(self, scene, rng):
            def step(props):
                raise RuntimeError("bad")
            return step

    with pytest.raises(EnsembleError) as info:
        run_ensemble(None, [], FailsOnSeed(), SamplerConfig(n=2), 3, 0, cosine)
    assert info.value.member == 0


# calibration ----------------------------------------------------------------


def test_calibration_error_arithmetic():
    assert calibration_error(0.95, 0.83) == 12.0
    assert calibration_error(0.95, 1.0) == 5.0
    r = calibration([SceneCoverage("a", 83, 100), None], 0.95)
    assert r.calibration_error == 12.0 and r.skipped == 1 and r.median_coverage == 0.83


def test_calibration_needs_a_region():
    with pytest.raises(InsufficientSamplesError):
        calibration([None, None])


def test_zero_noise_full_coverage():
    ds = make_dataset("grid_arc", 4, 4, seed=2)
    cfg = ExperimentConfig(
        sampler=SamplerConfig(n=60, n_star=30),
        oracle=OracleParams(detector_noise=0.0),
        num_exemplars=1,
    )
    res, ellipses = run_calibration(ds, cfg, ensemble=5)
    assert res.median_coverage == 1.0 and res.calibration_error == 5.0
    assert all(s.coverage == 1.0 for s in res.scenes)
    assert set(ellipses) == {s.scene_id for s in ds.scenes}


def test_scene_coverage_counts_pairs():
    gts = [EXEMPLAR, BBox(0.2, 0.2, 0.1, 0.1)]
    rng = np.random.default_rng(4)
    members = []
    for _ in range(30):
        a = EXEMPLAR.as_array() + rng.normal(0, 0.004, 4)
        members.append([det(a), det(gts[1].as_array() + [0.5, 0, 0, 0], 0.8)])
    # every prediction for object 1 is far off, so none of them is a match
    assert scene_coverage("s", members, gts, [0]) is None
    members = [[m[0], det(gts[1].as_array())] for m in members]
    cov = scene_coverage("s", members, gts, [0])
    assert (cov.covered, cov.total) == (30, 30)


def test_best_match_prefers_score():
    a, b = det(EXEMPLAR.as_array(), 0.3), det(EXEMPLAR.as_array() + [0.01, 0, 0, 0], 0.8)
    assert best_match([a, b], EXEMPLAR) is b
