import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from landmark_maxent import cubic as cb
from landmark_maxent import kernels

py = kernels.get_backend("python")
try:
    cy = kernels.get_backend("cython")
except ImportError:  # extension not built in this environment
    cy = None

needs_cy = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def _metropolis_inputs(seed, r, C, T, thin):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((r, r))
    J = A @ A.T / r + np.eye(r)
    Q = cb.symmetrize(0.2 * rng.standard_normal((r, r, r)))
    h = 0.3 * rng.standard_normal(r)
    lo, hi = np.full(r, -3.0), np.full(r, 3.0)
    x = rng.uniform(-1, 1, (C, r))
    U = rng.random((T, C, r))
    L = np.log1p(-rng.random((T, C, r)))
    out = np.zeros((T // thin if thin else 0, C, r))
    return x, h, J, Q, lo, hi, U, L, thin, out


@needs_cy
@given(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 4), st.integers(1, 40), st.sampled_from([0, 1, 3]))
def test_metropolis_backends_agree(seed, r, C, T, thin):
    a = _metropolis_inputs(seed, r, C, T, thin)
    b = tuple(np.copy(v) if isinstance(v, np.ndarray) else v for v in a)
    na = py.metropolis_sweeps(*a)
    nb = cy.metropolis_sweeps(*b)
    assert na == nb
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(a[-1], b[-1], rtol=0, atol=1e-12)


def _pcd_inputs(seed, Nv, Nh, T, B, train_sigma):
    rng = np.random.default_rng(seed)
    W = 0.3 * rng.standard_normal((Nv, Nh))
    b = 0.1 * rng.standard_normal(Nh)
    c = 0.1 * rng.standard_normal(Nv)
    logsig = np.log(rng.uniform(0.5, 1.5, Nv))
    data = rng.standard_normal((50, Nv))
    idx = rng.integers(0, 50, (T, B)).astype(np.int64)
    vneg = rng.standard_normal((B, Nv))
    Uh = rng.random((T, B, Nh))
    Nz = rng.standard_normal((T, B, Nv))
    lr = np.linspace(1e-2, 1e-3, T)
    return [W, b, c, logsig, data, idx, vneg, Uh, Nz, lr, train_sigma, np.zeros(T)]


@needs_cy
@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 5), st.integers(1, 20), st.integers(1, 8),
       st.sampled_from([0, 1]))
def test_pcd_backends_agree(seed, Nv, Nh, T, B, train_sigma):
    a = _pcd_inputs(seed, Nv, Nh, T, B, train_sigma)
    b = [np.copy(v) if isinstance(v, np.ndarray) else v for v in a]
    py.pcd_steps(*a)
    cy.pcd_steps(*b)
    for k in (0, 1, 2, 3, 6, 11):  # W, b, c, logsig, vneg, recon
        np.testing.assert_allclose(a[k], b[k], rtol=1e-10, atol=1e-12)


def test_backend_lookup():
    assert kernels.BACKEND in ("cython", "python")
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_pure_python_switch():
    env = {**os.environ, "LANDMARK_MAXENT_PURE": "1"}
    out = subprocess.run([sys.executable, "-c", "from landmark_maxent import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_sampler_identical_under_both_backends(monkeypatch):
    if cy is None:
        pytest.skip("compiled extension not built")
    m = cb.CubicModel(np.zeros(2), np.eye(2), cb.symmetrize(np.full((2, 2, 2), 0.05)), -4, 4)
    monkeypatch.setattr(kernels, "metropolis_sweeps", py.metropolis_sweeps)
    a = cb.metropolis_sample(m, 500, seed=3, n_chains=2, thin=5).samples
    monkeypatch.setattr(kernels, "metropolis_sweeps", cy.metropolis_sweeps)
    b = cb.metropolis_sample(m, 500, seed=3, n_chains=2, thin=5).samples
    np.testing.assert_allclose(a, b, atol=1e-12)


@needs_cy
def test_benchmark_runs_and_backends_agree():
    script = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    r = subprocess.run([sys.executable, str(script), "--quick", "--repeats", "1"], capture_output=True, text=True,
                       timeout=300)
    assert r.returncode == 0, r.stderr
    rows = [line.split() for line in r.stdout.splitlines()[1:]]
    assert len(rows) == 5 and all(float(row[-1]) < 1e-9 for row in rows)
