import numpy as np
import pytest

from psvq.engine import AuxArrays, batch_trajectories
from psvq.physics import (AuxParams, TissueParams, simulate_raw,
                          simulate_trajectory, trajectory_jacobian)


def _aux_batch(rng, n, fixed=False):
    kw = {}
    if fixed:
        kw = dict(fixed_f=rng.uniform(0.05, 0.15, n),
                  fixed_k=rng.uniform(20.0, 50.0, n))
    return AuxArrays(t1_water=rng.uniform(0.8, 2.0, n),
                     t2_water=rng.uniform(0.04, 0.1, n),
                     b0_shift=rng.uniform(-0.3, 0.3, n),
                     b1_scale=rng.uniform(0.8, 1.2, n), **kw)


def _aux_params(aux, i, pools=None):
    fixed = ()
    if aux.fixed_f is not None and pools is not None:
        fixed = ((pools[1], TissueParams(f=aux.fixed_f[i], k=aux.fixed_k[i])),)
    return AuxParams(t1_water=aux.t1_water[i], t2_water=aux.t2_water[i],
                     b0_shift=aux.b0_shift[i], b1_scale=aux.b1_scale[i],
                     fixed_pools=fixed)


def test_matches_scalar_two_pool(pools2, schedule_cw, rng):
    n = 8
    theta = np.column_stack([rng.uniform(0.01, 0.25, n),
                             rng.uniform(5.0, 90.0, n)])
    aux = _aux_batch(rng, n)
    s = batch_trajectories(pools2, theta, aux, schedule_cw)
    for i in range(n):
        ref = simulate_trajectory(pools2, TissueParams(*theta[i]),
                                  _aux_params(aux, i), schedule_cw).values
        assert np.linalg.norm(s[i] - ref) < 1e-10


def test_matches_scalar_three_pool(pools3, schedule_pulsed, rng):
    n = 5
    theta = np.column_stack([rng.uniform(0.0005, 0.01, n),
                             rng.uniform(100.0, 800.0, n)])
    aux = _aux_batch(rng, n, fixed=True)
    s = batch_trajectories(pools3, theta, aux, schedule_pulsed)
    for i in range(n):
        ref = simulate_trajectory(pools3, TissueParams(*theta[i]),
                                  _aux_params(aux, i, pools3),
                                  schedule_pulsed).values
        assert np.linalg.norm(s[i] - ref) < 1e-10


def test_raw_matches_scalar(pools2, schedule_cw, rng):
    theta = np.array([[0.1, 40.0], [0.02, 75.0]])
    aux = _aux_batch(rng, 2)
    z = batch_trajectories(pools2, theta, aux, schedule_cw, raw=True)
    for i in range(2):
        ref = simulate_raw(pools2, TissueParams(*theta[i]),
                           _aux_params(aux, i), schedule_cw)
        assert np.linalg.norm(z[i] - ref) < 1e-10


def test_jacobian_matches_scalar(pools2, schedule_cw, rng):
    n = 4
    theta = np.column_stack([rng.uniform(0.01, 0.25, n),
                             rng.uniform(5.0, 90.0, n)])
    aux = _aux_batch(rng, n)
    s, jac = batch_trajectories(pools2, theta, aux, schedule_cw,
                                jacobian=True)
    for i in range(n):
        ref = trajectory_jacobian(pools2, TissueParams(*theta[i]),
                                  _aux_params(aux, i), schedule_cw)
        assert np.linalg.norm(jac[i] - ref) / np.linalg.norm(ref) < 1e-9


def test_jacobian_pulsed_three_pool(pools3, schedule_pulsed, rng):
    theta = np.array([[0.003, 300.0]])
    aux = _aux_batch(rng, 1, fixed=True)
    s, jac = batch_trajectories(pools3, theta, aux, schedule_pulsed,
                                jacobian=True)
    ref = trajectory_jacobian(pools3, TissueParams(0.003, 300.0),
                              _aux_params(aux, 0, pools3), schedule_pulsed)
    assert np.linalg.norm(jac[0] - ref) / np.linalg.norm(ref) < 1e-9


def test_input_validation(pools2, schedule_cw, rng):
    aux = _aux_batch(rng, 3)
    theta = np.array([[0.1, 40.0]])
    with pytest.raises(ValueError):
        batch_trajectories(pools2, theta, aux, schedule_cw)
    aux1 = _aux_batch(rng, 1)
    with pytest.raises(ValueError):
        batch_trajectories(pools2, theta, aux1, schedule_cw,
                           jacobian=True, raw=True)


def test_aux_arrays_broadcast_and_take():
    aux = AuxArrays(t1_water=np.array([1.0, 1.2, 1.4]), t2_water=0.07,
                    b0_shift=0.0, b1_scale=1.0)
    assert aux.n_voxels == 3
    assert aux.t2_water.shape == (3,)
    sub = aux.take(np.array([2, 0]))
    assert np.array_equal(sub.t1_water, [1.4, 1.0])
    assert sub.fixed_f is None


def test_from_aux_roundtrip(pools3):
    ap = AuxParams(t1_water=1.1, t2_water=0.06, b0_shift=0.1, b1_scale=0.9,
                   fixed_pools=((pools3[1], TissueParams(f=0.08, k=25.0)),))
    aux = AuxArrays.from_aux(ap, n=4)
    assert aux.n_voxels == 4
    assert np.allclose(aux.fixed_f, 0.08)
    assert np.allclose(aux.fixed_k, 25.0)
