import numpy as np
import pytest

from psvq import gridref, metrics
from psvq.engine import AuxArrays, batch_trajectories
from psvq.metrics import (AgreementReport, ci_intersection, compare_maps,
                          cur, mahalanobis_map_summary, nrmse_fit,
                          nrmse_fit_batch, posterior_sample_map,
                          two_directional_mahalanobis)
from psvq.physics import TissueParams, simulate_trajectory
from psvq.posterior import (GaussianPosterior, PosteriorMap,
                            assemble_covariance, from_covariance)


def _gauss(bounds, mu, sig, rho=0.0):
    cov = np.array([[sig[0] ** 2, rho * sig[0] * sig[1]],
                    [rho * sig[0] * sig[1], sig[1] ** 2]])
    return from_covariance(np.asarray(mu, dtype=float), cov, bounds)


def test_nrmse_fit(rng):
    s = rng.standard_normal(20)
    assert nrmse_fit(s, s) == 0.0
    assert nrmse_fit(s, 1.1 * s) == pytest.approx(10.0)
    batch = nrmse_fit_batch(np.stack([s, s]), np.stack([s, 1.1 * s]))
    assert batch == pytest.approx([0.0, 10.0])


def test_ci_intersection(bounds):
    a = _gauss(bounds, [0.10, 40.0], [0.01, 5.0])
    b = _gauss(bounds, [0.11, 41.0], [0.01, 5.0])
    assert ci_intersection(a, b) == (True, True)
    far = _gauss(bounds, [0.25, 41.0], [0.001, 5.0])
    assert ci_intersection(a, far) == (False, True)


def test_two_directional_mahalanobis_identical(bounds):
    a = _gauss(bounds, [0.10, 40.0], [0.005, 4.0], rho=-0.5)
    m1, m2 = two_directional_mahalanobis(a, a, n_samples=4000, seed=1)
    # draws from a Gaussian measured under itself: median |M| ~ 1.18
    expect = np.sqrt(2 * np.log(2))
    assert np.median(m1) == pytest.approx(expect, rel=0.1)
    assert np.median(m2) == pytest.approx(expect, rel=0.1)


def test_two_directional_mahalanobis_disjoint(bounds):
    a = _gauss(bounds, [0.05, 20.0], [0.002, 2.0])
    b = _gauss(bounds, [0.25, 80.0], [0.002, 2.0])
    m1, _ = two_directional_mahalanobis(a, b, n_samples=500, seed=1)
    assert np.median(m1) > metrics.M_THRESHOLD


def test_mahalanobis_accepts_grid_posterior(bounds, pools2, aux,
                                            schedule_cw):
    spec = gridref.GridSpec(bounds=bounds, counts=(24, 24))
    d = gridref.build_dictionary(spec, aux, schedule_cw, pools2)
    s = simulate_trajectory(pools2, TissueParams(0.11, 37.0), aux,
                            schedule_cw).values
    gp = gridref.grid_posterior(s, d, sigma_m=0.01)
    fit = gridref.gaussian_fit(gp)
    m1, m2 = two_directional_mahalanobis(gp, fit, n_samples=2000, seed=2)
    assert np.median(m1) < metrics.M_THRESHOLD
    assert np.median(m2) < metrics.M_THRESHOLD


def test_map_summary_matches_scalar_path(bounds, rng):
    n = 5
    mu_a = np.column_stack([rng.uniform(0.05, 0.2, n),
                            rng.uniform(20, 70, n)])
    mu_b = mu_a + rng.normal(0, [0.002, 1.0], (n, 2))
    cov_a = np.stack([np.diag([0.005, 3.0]) ** 2] * n)
    cov_b = np.stack([np.diag([0.004, 2.5]) ** 2] * n)
    out = mahalanobis_map_summary(mu_a, cov_a, mu_b, cov_b,
                                  n_samples=4000, seed=0, chunk=2)
    for i in range(n):
        a = from_covariance(mu_a[i], cov_a[i], bounds)
        b = from_covariance(mu_b[i], cov_b[i], bounds)
        m1, m2 = two_directional_mahalanobis(a, b, n_samples=4000, seed=7)
        assert out["m1_median"][i] == pytest.approx(np.median(m1), rel=0.15)
        assert out["m2_median"][i] == pytest.approx(np.median(m2), rel=0.15)


def _pmap(bounds, rng, n=16, shape=(4, 4)):
    mu = np.column_stack([rng.uniform(0.05, 0.25, n),
                          rng.uniform(10, 90, n)])
    sigma = np.column_stack([np.full(n, 0.004), np.full(n, 3.0)])
    rho = np.full(n, -0.3)
    return PosteriorMap(mu=mu, sigma=sigma, rho=rho, clamp=np.zeros(n),
                        bounds=bounds, grid_shape=shape)


def test_posterior_sample_map(bounds, rng):
    pmap = _pmap(bounds, rng)
    pmap.mu[3] = np.nan
    draws = posterior_sample_map(pmap, seed=1)
    assert np.isnan(draws[3]).all()
    ok = np.isfinite(draws[:, 0])
    assert np.all((draws[ok] >= bounds.lows) & (draws[ok] <= bounds.highs))
    # deterministic under the seed
    assert np.array_equal(draws[ok], posterior_sample_map(pmap, seed=1)[ok])


def test_cur_separates_rois(bounds, rng):
    pmap = _pmap(bounds, rng, n=40, shape=(5, 8))
    pmap.mu[:20, 0] = 0.14
    pmap.mu[20:, 0] = 0.08
    pmap.sigma[:, 0] = 0.002
    c = cur(0, np.arange(20), np.arange(20, 40), pmap, seed=0)
    assert c > 4.0  # contrast far above the pooled uncertainty
    with pytest.raises(ValueError):
        cur(0, np.arange(0), np.arange(20, 40), pmap)


def test_compare_maps_and_report_io(bounds, rng, tmp_path):
    n = 10
    pmap = _pmap(bounds, rng, n=n, shape=(2, 5))
    ref = gridref.ReferenceResult(
        mu=pmap.mu + rng.normal(0, [0.001, 0.5], (n, 2)),
        cov=pmap.covariances() * 1.1,
        map_theta=pmap.mu.copy(),
        sigma_m=np.full(n, 0.01),
        nrmse=rng.uniform(0.5, 1.5, n))
    nrmse_nn = rng.uniform(0.5, 1.5, n)
    rep = compare_maps(pmap, ref, nrmse_nn, np.arange(n), n_samples=500)
    s = rep.summary()
    assert s["ci_intersect_pct"] == [100.0, 100.0]
    assert s["m1_median"] < metrics.M_THRESHOLD
    assert 0.0 <= s["m2_gt4_pct"] <= 100.0
    rep.to_csv(tmp_path / "agree.csv")
    rep.to_json(tmp_path / "agree.json")
    lines = (tmp_path / "agree.csv").read_text().strip().splitlines()
    assert len(lines) == n + 1
    assert lines[0].startswith("voxel,")
