import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import expit

from landmark_maxent import grbm as gr
from landmark_maxent.errors import CapabilityError


def _model(Nv, Nh, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return gr.GrbmModel(scale * rng.standard_normal((Nv, Nh)), 0.3 * rng.standard_normal(Nh),
                        0.3 * rng.standard_normal(Nv), rng.uniform(0.5, 1.5, Nv))


def _naive_energy(m, v, h):
    E = 0.0
    for i in range(m.n_visible):
        E += (v[i] - m.c[i]) ** 2 / (2 * m.sigma[i] ** 2)
        for a in range(m.n_hidden):
            E -= v[i] / m.sigma[i] ** 2 * m.W[i, a] * h[a]
    for a in range(m.n_hidden):
        E -= m.b[a] * h[a]
    return E


# ---------------------------------------------------------------- energy and conditionals


def test_energy_zero_at_rest():
    m = _model(3, 2).__class__(np.zeros((3, 2)), np.array([0.4, -0.2]), np.array([1.0, 2, 3]), np.ones(3))
    assert gr.grbm_energy(m, m.c, np.zeros(2)) == 0.0
    m0 = gr.GrbmModel(np.zeros((3, 2)), np.zeros(2), np.array([1.0, 2, 3]), np.ones(3))
    for h in gr.hidden_states(2):
        assert gr.grbm_energy(m0, m0.c, h) == 0.0


@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 4))
def test_energy_matches_double_loop(seed, Nv, Nh):
    m = _model(Nv, Nh, seed)
    rng = np.random.default_rng(seed + 1)
    v = rng.standard_normal(Nv)
    h = (rng.random(Nh) < 0.5).astype(float)
    assert gr.grbm_energy(m, v, h) == pytest.approx(_naive_energy(m, v, h), abs=1e-12)


def test_hidden_probs_without_coupling():
    m = gr.GrbmModel(np.zeros((2, 3)), np.array([0.5, -1.0, 2.0]), np.zeros(2), np.ones(2))
    for v in np.random.default_rng(0).standard_normal((5, 2)):
        np.testing.assert_allclose(gr.hidden_probs(m, v), expit(m.b), rtol=0, atol=1e-15)


def test_visible_mean_with_hidden_off():
    m = _model(3, 2)
    mu, sd = gr.visible_params(m, np.zeros(2))
    np.testing.assert_array_equal(mu, m.c)
    np.testing.assert_array_equal(sd, m.sigma)


def test_conditionals_match_joint_enumeration():
    m = _model(2, 2, seed=3)
    H = gr.hidden_states(2)
    v = np.array([0.4, -0.7])
    w = np.exp(-np.array([_naive_energy(m, v, h) for h in H]))
    p_joint = (H * w[:, None]).sum(axis=0) / w.sum()
    np.testing.assert_allclose(gr.hidden_probs(m, v), p_joint, rtol=0, atol=1e-12)
    # p(v | h): compare the Gaussian conditional with the normalized joint slice
    h = np.array([1.0, 0.0])
    mu, sd = gr.visible_params(m, h)
    Z, _ = integrate.dblquad(lambda y, x: math.exp(-_naive_energy(m, [x, y], h)), -15, 15, -15, 15,
                             epsabs=1e-13, epsrel=1e-12)
    x = np.array([0.1, 0.2])
    log_joint = -_naive_energy(m, x, h) - math.log(Z)
    log_gauss = float(np.sum(-0.5 * ((x - mu) / sd) ** 2 - np.log(sd * math.sqrt(2 * math.pi))))
    assert log_joint == pytest.approx(log_gauss, abs=1e-10)


# ---------------------------------------------------------------- free energy and partition function


def test_free_energy_single_uncoupled_unit():
    m = gr.GrbmModel(np.zeros((2, 1)), np.array([0.7]), np.array([0.1, -0.2]), np.array([0.5, 2.0]))
    v = np.array([0.3, 0.4])
    quad = ((v - m.c) ** 2 / (2 * m.sigma**2)).sum()
    assert gr.free_energy(m, v) == pytest.approx(quad - math.log1p(math.exp(0.7)), abs=1e-15)


def test_free_energy_matches_enumeration_nh5():
    m = _model(3, 5, seed=4)
    for v in np.random.default_rng(1).standard_normal((5, 3)):
        direct = -math.log(sum(math.exp(-_naive_energy(m, v, h)) for h in itertools.product((0, 1), repeat=5)))
        assert gr.free_energy(m, v) == pytest.approx(direct, abs=1e-10)


def test_free_energy_minimum_without_hidden_units():
    m = gr.GrbmModel(np.zeros((2, 0)), np.zeros(0), np.array([0.3, -1.2]), np.array([1.0, 0.5]))
    from scipy.optimize import minimize

    res = minimize(lambda v: gr.free_energy(m, v), np.zeros(2), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(res.x, m.c, atol=1e-6)


def test_log_partition_factorizes_without_coupling():
    b = np.array([0.2, -0.4, 1.1])
    sigma = np.array([0.5, 1.5])
    m = gr.GrbmModel(np.zeros((2, 3)), b, np.array([1.0, -1.0]), sigma)
    closed = np.log1p(np.exp(b)).sum() + np.log(np.sqrt(2 * np.pi) * sigma).sum()
    assert gr.exact_log_partition(m) == pytest.approx(closed, abs=1e-12)


def test_log_partition_without_hidden_units():
    sigma = np.array([0.5, 1.5])
    m = gr.GrbmModel(np.zeros((2, 0)), np.zeros(0), np.zeros(2), sigma)
    assert gr.exact_log_partition(m) == pytest.approx(np.log(np.sqrt(2 * np.pi) * sigma).sum(), abs=1e-14)


def test_log_partition_matches_frozen_quadrature(frozen):
    o = frozen["grbm_1x1"]
    m = gr.GrbmModel([[o["W"]]], [o["b"]], [o["c"]], [o["sigma"]])
    assert gr.exact_log_partition(m) == pytest.approx(o["log_z"], abs=1e-8)


def test_log_partition_chunking_is_consistent():
    m = _model(2, 9, seed=5)
    assert gr.exact_log_partition(m, chunk=7) == pytest.approx(gr.exact_log_partition(m), abs=1e-12)


def test_enumeration_cap():
    with pytest.raises(CapabilityError):
        gr.exact_log_partition(_model(1, 21))


def test_density_integrates_to_one_2d():
    m = gr.normalize(_model(2, 3, seed=6))
    val, _ = integrate.dblquad(lambda y, x: math.exp(gr.log_density(m, np.array([x, y]))), -12, 12, -12, 12,
                               epsabs=1e-11)
    assert val == pytest.approx(1.0, abs=1e-7)


def test_exact_moments_against_mixture_enumeration():
    m = _model(2, 3, seed=7)
    H = np.array(list(itertools.product((0, 1), repeat=3)), dtype=float)
    # marginal weight of h after integrating v: exp(b.h + |c + W h|^2/(2 s^2) - |c|^2/(2 s^2))
    lw = H @ m.b + (((m.c + H @ m.W.T) ** 2 - m.c**2) / (2 * m.sigma**2)).sum(axis=1)
    p = np.exp(lw - lw.max())
    p /= p.sum()
    means = m.c + H @ m.W.T
    mean = p @ means
    cov = sum(pk * np.outer(mk - mean, mk - mean) for pk, mk in zip(p, means)) + np.diag(m.sigma**2)
    em, ec = gr.exact_visible_moments(m)
    np.testing.assert_allclose(em, mean, atol=1e-12)
    np.testing.assert_allclose(ec, cov, atol=1e-12)


def test_gibbs_moments_within_mc_error():
    m = _model(2, 3, seed=8)
    V = gr.gibbs_sample(m, 2000, n_chains=200, seed=1, thin=10).reshape(-1, 2)
    mean, cov = gr.exact_visible_moments(m)
    n_eff = len(V) / 2
    assert np.all(np.abs(V.mean(axis=0) - mean) < 3 * np.sqrt(np.diag(cov) / n_eff))


def test_json_round_trip():
    m = gr.normalize(_model(2, 3))
    back = gr.GrbmModel.from_json(m.to_json())
    assert back.log_norm == m.log_norm
    np.testing.assert_array_equal(back.W, m.W)


def test_invalid_sigma_rejected():
    with pytest.raises(ValueError):
        gr.GrbmModel(np.zeros((1, 1)), [0.0], [0.0], [0.0])


# ---------------------------------------------------------------- initialization and training


def test_standard_initialization():
    m = gr.init_params(4, 6, np.random.default_rng(0))
    assert np.abs(m.W).max() <= math.sqrt(6 / 10)
    assert not m.c.any() and np.all(m.sigma == 0.5)
    np.testing.assert_allclose(m.b, -0.5 * np.linalg.norm(m.W, axis=0) + math.log(0.1))


def test_defaults():
    cfg = gr.GrbmConfig()
    assert (cfg.n_steps, cfg.batch_size, cfg.lr_start, cfg.lr_end, cfg.momentum) == (200_000, 200, 2e-3, 2e-5, 0.0)


def test_zero_steps_returns_initialization(rng):
    X = rng.standard_normal((100, 2))
    cfg = gr.GrbmConfig(n_steps=0, seed=4)
    m, trace = gr.train_pcd(X, X, cfg)
    ref = gr.init_params(2, cfg.n_hidden, gr.spawn_generators(4, 3)[0])
    np.testing.assert_array_equal(m.W, ref.W)
    np.testing.assert_array_equal(m.b, ref.b)
    assert trace.status == "initialized"


def test_momentum_not_supported(rng):
    with pytest.raises(ValueError):
        gr.train_pcd(rng.standard_normal((10, 2)), rng.standard_normal((10, 2)), gr.GrbmConfig(momentum=0.5))


def test_gradient_estimate_backend_consistency():
    """The NumPy gradient and one kernel step move parameters the same way."""
    from landmark_maxent import kernels

    m = _model(2, 3, seed=9)
    rng = np.random.default_rng(0)
    V = rng.standard_normal((8, 2))
    vneg = rng.standard_normal((8, 2))
    g, _ = gr.gradient_estimate(m, V, vneg.copy(), np.random.default_rng(1))
    W, b, c, logsig = m.W.copy(), m.b.copy(), m.c.copy(), np.log(m.sigma)
    r1 = np.random.default_rng(1)
    Uh = r1.random((1, 8, 3))
    Nz = r1.standard_normal((1, 8, 2))
    kernels.pcd_steps(W, b, c, logsig, V, np.arange(8, dtype=np.int64)[None, :], vneg.copy(), Uh, Nz,
                      np.array([1.0]), 0, np.zeros(1))
    np.testing.assert_allclose(W - m.W, g["W"], atol=1e-12)
    np.testing.assert_allclose(b - m.b, g["b"], atol=1e-12)
    np.testing.assert_allclose(c - m.c, g["c"], atol=1e-12)


def test_stationarity_rule():
    flat = [1.0, 1.01, 0.99, 1.0, 1.02, 0.98]
    assert gr.stationarity(flat, 6, noise=0.05)[0] is True
    ramp = list(np.linspace(0, 1, 6))
    assert gr.stationarity(ramp, 6, noise=0.05)[0] is False
    assert gr.stationarity([1.0], 6, noise=0.1) == (None, None)


@pytest.mark.slow
def test_planted_gaussian_likelihood_close_to_entropy():
    rng = np.random.default_rng(3)
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    X = rng.multivariate_normal(np.zeros(2), cov, 12000)
    train, test = X[:10000], X[10000:]
    model, trace = gr.train_pcd(train, test, gr.GrbmConfig(n_hidden=4, n_steps=20000, eval_every=500))
    true_ll = -0.5 * np.log(np.linalg.det(2 * np.pi * np.e * cov))
    assert abs(gr.log_likelihood(model, test) - true_ll) < 0.05 * abs(true_ll)
    assert trace.status == "finished"
