import numpy as np
import pytest

from psvq import gridref
from psvq.engine import AuxArrays, batch_trajectories
from psvq.gridref import (Dictionary, GridSpec, build_dictionary,
                          dictionary_key, estimate_sigma, freeform_region,
                          gaussian_fit, grid_moments, grid_posterior,
                          group_voxels, likelihood_map,
                          posterior_from_likelihood, reference_for_group,
                          sample_grid, squared_residuals)
from psvq.physics import AuxParams, TissueParams, simulate_trajectory
from psvq.posterior import assemble_covariance


@pytest.fixture
def spec(bounds):
    return GridSpec(bounds=bounds, counts=(24, 24))


@pytest.fixture
def dictionary(spec, pools2, aux, schedule_cw):
    return build_dictionary(spec, aux, schedule_cw, pools2)


def test_grid_spec_axes(bounds):
    spec = GridSpec(bounds=bounds, counts=(10, 20))
    f_axis, k_axis = spec.axes()
    # endpoint-inclusive: the corners of the bounds box are nodes
    assert f_axis[0] == bounds.f[0] and f_axis[-1] == bounds.f[1]
    assert k_axis[0] == bounds.k[0] and k_axis[-1] == bounds.k[1]
    assert spec.nodes().shape == (200, 2)
    # f-major raster: k varies fastest
    assert np.allclose(spec.nodes()[:20, 0], f_axis[0])
    log_spec = GridSpec(bounds=bounds, counts=(10, 20), spacing="log_k")
    _, k_log = log_spec.axes()
    assert np.allclose(np.diff(np.log(k_log)), np.diff(np.log(k_log))[0])
    with pytest.raises(ValueError):
        GridSpec(bounds=bounds, counts=(1, 10))
    with pytest.raises(ValueError):
        GridSpec(bounds=bounds, counts=(10, 10), spacing="sqrt")
    assert GridSpec.from_json(spec.to_json()) == spec


def test_dictionary_matches_scalar(dictionary, spec, pools2, aux,
                                   schedule_cw):
    nodes = spec.nodes()
    for i in (0, 117, nodes.shape[0] - 1):
        ref = simulate_trajectory(pools2, TissueParams(*nodes[i]), aux,
                                  schedule_cw).values
        assert np.linalg.norm(dictionary.trajectories[i] - ref) < 1e-10


def test_dictionary_key_sensitivity(spec, pools2, aux, schedule_cw, bounds):
    k0 = dictionary_key(spec, aux, schedule_cw, pools2)
    assert k0 == dictionary_key(spec, aux, schedule_cw, pools2)
    aux2 = AuxParams(t1_water=aux.t1_water + 0.01, t2_water=aux.t2_water,
                     b0_shift=aux.b0_shift, b1_scale=aux.b1_scale)
    assert k0 != dictionary_key(spec, aux2, schedule_cw, pools2)
    spec2 = GridSpec(bounds=bounds, counts=(25, 24))
    assert k0 != dictionary_key(spec2, aux, schedule_cw, pools2)
    # sub-quantum perturbations hash identically
    aux3 = AuxParams(t1_water=aux.t1_water + 1e-9, t2_water=aux.t2_water,
                     b0_shift=aux.b0_shift, b1_scale=aux.b1_scale)
    assert k0 == dictionary_key(spec, aux3, schedule_cw, pools2)


def test_dictionary_cache(spec, pools2, aux, schedule_cw, tmp_path):
    d1 = build_dictionary(spec, aux, schedule_cw, pools2,
                          cache_dir=str(tmp_path))
    assert len(list(tmp_path.iterdir())) == 1
    d2 = build_dictionary(spec, aux, schedule_cw, pools2,
                          cache_dir=str(tmp_path))
    assert np.array_equal(d1.trajectories, d2.trajectories)
    assert np.array_equal(d1.raw, d2.raw)


def test_squared_residuals_exact(rng):
    a = rng.standard_normal((5, 12))
    b = rng.standard_normal((7, 12))
    r2 = squared_residuals(a, b)
    brute = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    assert np.allclose(r2, brute, atol=1e-10)


def test_posterior_from_likelihood_stable():
    logl = np.array([[0.0, -1e6], [-1e6, -1e6]])
    mass = posterior_from_likelihood(logl)
    assert mass.sum() == pytest.approx(1.0)
    assert mass[0, 0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        posterior_from_likelihood(np.full((2, 2), -np.inf))


def test_noiseless_map_recovers_truth(dictionary, spec, pools2, aux,
                                      schedule_cw):
    f_axis, k_axis = spec.axes()
    truth = np.array([f_axis[9], k_axis[14]])  # exactly on a node
    s = simulate_trajectory(pools2, TissueParams(*truth), aux,
                            schedule_cw).values
    post = grid_posterior(s, dictionary)
    assert post.map_index == (9, 14)
    # sigma floored for a noiseless signal
    assert post.sigma_m == pytest.approx(gridref.SIGMA_FLOOR)


def test_estimate_sigma_recovers_noise(dictionary, pools2, aux, schedule_cw,
                                       rng):
    truth = np.array([0.11, 37.0])
    raw_len = dictionary.trajectories.shape[1]
    s = simulate_trajectory(pools2, TissueParams(*truth), aux,
                            schedule_cw).values
    noise = 0.01 * rng.standard_normal(raw_len)
    s_noisy = s + noise
    s_noisy /= np.linalg.norm(s_noisy)
    est = estimate_sigma(s_noisy, dictionary)
    assert 0.3 * 0.01 < est < 3.0 * 0.01


def test_grid_moments_and_gaussian_fit(dictionary, pools2, aux, schedule_cw):
    s = simulate_trajectory(pools2, TissueParams(0.11, 37.0), aux,
                            schedule_cw).values
    post = grid_posterior(s, dictionary, sigma_m=0.01)
    mean, cov = grid_moments(post)
    assert np.all(np.linalg.eigvalsh(cov) > 0)
    fit = gaussian_fit(post)
    assert np.allclose(fit.mu, mean)
    assert np.allclose(assemble_covariance(fit), cov, rtol=1e-8)


def test_point_mass_covariance_is_cell(dictionary, spec):
    # a posterior concentrated in one cell keeps the cell's own spread
    mass = np.zeros(spec.counts)
    mass[5, 7] = 1.0
    post = gridref.GridPosterior(spec=spec, mass=mass, map_index=(5, 7),
                                 sigma_m=1e-4)
    _, cov = grid_moments(post)
    assert np.allclose(cov, np.diag(spec.cell_sizes() ** 2) / 12.0)


def test_freeform_region_mass(dictionary, pools2, aux, schedule_cw):
    s = simulate_trajectory(pools2, TissueParams(0.11, 37.0), aux,
                            schedule_cw).values
    post = grid_posterior(s, dictionary, sigma_m=0.02)
    region = freeform_region(post, level=0.95)
    assert post.mass[region].sum() >= 0.95
    # removing the last-added cell drops below the level: minimal region
    order = np.argsort(-post.mass.ravel(), kind="stable")
    take = region.sum()
    assert post.mass.ravel()[order[:take - 1]].sum() < 0.95


def test_sample_grid_moments(dictionary, pools2, aux, schedule_cw, rng):
    s = simulate_trajectory(pools2, TissueParams(0.11, 37.0), aux,
                            schedule_cw).values
    post = grid_posterior(s, dictionary, sigma_m=0.02)
    draws = sample_grid(post, 20000, rng)
    mean, cov = grid_moments(post)
    assert np.allclose(draws.mean(axis=0), mean,
                       atol=3 * np.sqrt(np.diag(cov) / 20000) + 1e-9)
    assert np.allclose(np.cov(draws.T), cov, rtol=0.1)


def test_group_voxels(pools2):
    aux = AuxArrays(t1_water=[1.0, 1.2, 1.0, 1.2], t2_water=0.07,
                    b0_shift=0.0, b1_scale=1.0)
    groups = group_voxels(aux, pools2)
    assert len(groups) == 2
    sets = sorted(tuple(idx) for _, idx in groups)
    assert sets == [(0, 2), (1, 3)]
    covered = np.sort(np.concatenate([idx for _, idx in groups]))
    assert np.array_equal(covered, np.arange(4))


def test_reference_for_group_matches_scalar_path(dictionary, pools2, aux,
                                                 schedule_cw, rng):
    thetas = np.array([[0.08, 30.0], [0.2, 60.0], [0.05, 80.0]])
    aux_b = AuxArrays.from_aux(aux, 3)
    raw = batch_trajectories(pools2, thetas, aux_b, schedule_cw, raw=True)
    raw += 0.01 * rng.standard_normal(raw.shape)
    signals = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    res = reference_for_group(signals, dictionary, chunk=2)
    for i in range(3):
        post = grid_posterior(signals[i], dictionary)
        mean, cov = grid_moments(post)
        assert np.allclose(res.mu[i], mean, rtol=1e-10)
        assert np.allclose(res.cov[i], cov, rtol=1e-8)
        assert np.allclose(res.map_theta[i], post.map_theta)
        assert res.sigma_m[i] == pytest.approx(post.sigma_m)


def test_grid_posterior_roundtrip(dictionary, pools2, aux, schedule_cw,
                                  tmp_path):
    s = simulate_trajectory(pools2, TissueParams(0.11, 37.0), aux,
                            schedule_cw).values
    post = grid_posterior(s, dictionary, sigma_m=0.02)
    path = tmp_path / "gp.psvq"
    gridref.save_grid_posterior(path, post)
    back = gridref.load_grid_posterior(path)
    assert back.spec == post.spec
    assert back.map_index == post.map_index
    assert back.mass.sum() == pytest.approx(1.0)
    assert np.allclose(back.mass, post.mass, atol=1e-6)
