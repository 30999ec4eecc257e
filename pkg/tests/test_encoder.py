import numpy as np
import pytest

from psvq import encoder
from psvq.encoder import (AuxRanges, LOGSIG_MAX, LOGSIG_MIN, backward,
                          build_input, encode, encode_map, forward,
                          head_grads_from_params, heads_to_params,
                          init_weights, load_weights, save_weights)


def test_init_is_deterministic(bounds):
    w1 = init_weights(34, bounds, seed=3)
    w2 = init_weights(34, bounds, seed=3)
    assert np.array_equal(w1.flat(), w2.flat())
    w3 = init_weights(34, bounds, seed=4)
    assert not np.array_equal(w1.flat(), w3.flat())
    # width heads start at a moderate log sigma, the rest at zero bias
    assert np.allclose(w1.layers[-1][1][2:4], -4.0)
    assert np.allclose(w1.layers[-1][1][[0, 1, 4]], 0.0)


def test_flat_roundtrip(bounds, rng):
    w = init_weights(10, bounds, seed=0, hidden=(16, 16))
    vec = rng.standard_normal(w.flat().size)
    w.set_flat(vec)
    assert np.array_equal(w.flat(), vec)
    with pytest.raises(ValueError):
        w.set_flat(vec[:-1])


def test_forward_shapes_and_validation(bounds, rng):
    w = init_weights(10, bounds, seed=0, hidden=(16, 16))
    x = rng.standard_normal((7, 10))
    heads, cache = forward(w, x)
    assert heads.shape == (7, 5)
    assert len(cache) == 4
    with pytest.raises(ValueError):
        forward(w, rng.standard_normal((7, 11)))


def test_heads_to_params_ranges(bounds, rng):
    heads = rng.standard_normal((50, 5)) * 10.0
    mu, logsig, angle = heads_to_params(heads, bounds)
    assert np.all((mu > bounds.lows) & (mu < bounds.highs))
    assert np.all((logsig >= LOGSIG_MIN) & (logsig <= LOGSIG_MAX))
    assert np.all(np.abs(angle) <= np.pi / 2)


def test_backward_matches_finite_difference(bounds, rng):
    w = init_weights(8, bounds, seed=1, hidden=(12,))
    x = rng.standard_normal((3, 8))
    contract = rng.standard_normal((3, 5))
    _, cache = forward(w, x)
    grads = backward(w, cache, contract)
    flat_g = np.concatenate([a.ravel() for wb in grads for a in wb])
    f0 = w.flat()
    h = 1e-6
    idx = rng.permutation(f0.size)[:40]
    for i in idx:
        for sgn, store in ((1, "p"), (-1, "m")):
            v = f0.copy()
            v[i] += sgn * h
            w.set_flat(v)
            heads, _ = forward(w, x)
            val = np.sum(heads * contract)
            if sgn == 1:
                fp = val
            else:
                fm = val
        fd = (fp - fm) / (2 * h)
        assert abs(flat_g[i] - fd) < 1e-5 * max(1.0, abs(fd))
    w.set_flat(f0)


def test_frozen_layers_get_zero_grads(bounds, rng):
    w = init_weights(8, bounds, seed=1, hidden=(12,))
    w.frozen = frozenset({0})
    x = rng.standard_normal((3, 8))
    _, cache = forward(w, x)
    grads = backward(w, cache, np.ones((3, 5)))
    assert not np.any(grads[0][0])
    assert not np.any(grads[0][1])
    assert np.any(grads[1][0])


def test_head_grads_chain_rule(bounds, rng):
    heads = rng.standard_normal((6, 5))
    heads[:, 2:4] = rng.uniform(-6.0, 1.0, (6, 2))  # inside the clip range
    g_mu = rng.standard_normal((6, 2))
    g_ls = rng.standard_normal((6, 2))
    g_an = rng.standard_normal(6)
    g = head_grads_from_params(heads, g_mu, g_ls, g_an, bounds)
    h = 1e-6
    for col in range(5):
        hp = heads.copy(); hp[:, col] += h
        hm = heads.copy(); hm[:, col] -= h
        val = []
        for hh in (hp, hm):
            mu, ls, an = heads_to_params(hh, bounds)
            val.append(np.sum(mu * g_mu) + np.sum(ls * g_ls) + np.sum(an * g_an))
        fd = (val[0] - val[1]) / (2 * h)
        assert g[:, col].sum() == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_clip_modes(bounds):
    heads = np.zeros((2, 5))
    heads[0, 2] = LOGSIG_MIN - 3.0   # saturated below the floor
    heads[1, 3] = LOGSIG_MAX + 1.0   # saturated above the ceiling
    g_ls = np.array([[-1.0, 0.0], [0.0, 1.0]])  # gradients pointing back inside
    zero = np.zeros((2, 2))
    g_exact = head_grads_from_params(heads, zero, g_ls, np.zeros(2), bounds,
                                     clip_mode="exact")
    assert g_exact[0, 2] == 0.0 and g_exact[1, 3] == 0.0
    g_rest = head_grads_from_params(heads, zero, g_ls, np.zeros(2), bounds,
                                    clip_mode="restoring")
    assert g_rest[0, 2] == -1.0 and g_rest[1, 3] == 1.0
    # gradients pushing further out stay blocked in restoring mode
    g_out = head_grads_from_params(heads, zero, -g_ls, np.zeros(2), bounds,
                                   clip_mode="restoring")
    assert g_out[0, 2] == 0.0 and g_out[1, 3] == 0.0
    with pytest.raises(ValueError):
        head_grads_from_params(heads, zero, g_ls, np.zeros(2), bounds,
                               clip_mode="bogus")


def test_aux_ranges_scaling():
    r = AuxRanges()
    cols = r.scale(0.2, 0.3, -1.0, 1.5)
    assert np.allclose(cols, [0.0, 1.0, 0.0, 1.0])
    assert r == AuxRanges.from_json(r.to_json())


def test_build_input_concat(rng):
    traj = rng.standard_normal((4, 30))
    aux = rng.standard_normal((4, 4))
    s1 = rng.standard_normal((4, 2))
    assert build_input(traj, None).shape == (4, 30)
    assert build_input(traj, aux).shape == (4, 34)
    assert build_input(traj, aux, s1).shape == (4, 36)


def test_encode_consistency(bounds, rng):
    w = init_weights(30, bounds, seed=2, hidden=(16, 16))
    x = rng.standard_normal((5, 30))
    mu, logsig, angle = encode_map(w, x)
    post = encode(w, x[2])
    assert np.allclose(post.mu, mu[2])
    assert np.allclose(post.eig_logsig, logsig[2])
    assert post.angle == pytest.approx(angle[2])


def test_weights_roundtrip(bounds, tmp_path):
    w = init_weights(30, bounds, seed=9, hidden=(16, 16))
    w.frozen = frozenset({1})
    path = tmp_path / "weights.psvq"
    save_weights(path, w)
    back = load_weights(path)
    assert np.array_equal(back.flat(), w.flat())
    assert back.bounds == w.bounds
    assert back.seed == 9
    assert back.frozen == frozenset({1})
