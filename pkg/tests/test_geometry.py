import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from landmark_maxent import geometry as geo
from landmark_maxent import synth
from landmark_maxent.dataset import MomentStatistics, compute_bare_moments
from landmark_maxent.errors import CapabilityError, PreconditionError
from landmark_maxent.gaussian import pseudo_inverse

from conftest import random_psd


def _stats(C, mean=None):
    D = C.shape[0]
    return MomentStatistics(np.zeros(D) if mean is None else mean, C, np.zeros_like(C), "bare", 1000)


POS = synth.REFERENCE_POSITIONS


# ---------------------------------------------------------------- pair frames


def test_fold_angle_range_and_vertical():
    assert geo.fold_angle(0.0, 1.0) == pytest.approx(math.pi / 2)
    assert geo.fold_angle(0.0, -1.0) == pytest.approx(math.pi / 2)
    assert geo.fold_angle(-1.0, -1.0) == pytest.approx(math.pi / 4)
    assert geo.fold_angle(1.0, -1.0) == pytest.approx(-math.pi / 4)


@given(st.floats(-math.pi, math.pi))
def test_rotation_operator_is_orthogonal(a):
    T = geo.rotation_operator(4, a)
    np.testing.assert_allclose(T @ T.T, np.eye(8), atol=1e-14)


def test_rotation_aligns_segment_with_x():
    g = geo.pair_geometry(np.array([[0.0, 0.0], [1.0, 2.0]]))[0]
    T = geo.rotation_operator(2, g.angle)
    v = T @ np.array([0.0, 1.0, 0.0, 2.0])
    assert v[3] == pytest.approx(0.0, abs=1e-15) and v[1] == pytest.approx(math.sqrt(5))


def test_coincident_pairs_skipped():
    with pytest.warns(UserWarning, match="coincident"):
        g = geo.pair_geometry(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]))
    assert [(x.i, x.j) for x in g] == [(0, 2), (1, 2)]


def test_isotropic_model_has_equal_longitudinal_and_torsion():
    m = synth.isotropic_model()
    C = np.asarray(m.params["cov"])
    rep = geo.longitudinal_torsion(_stats(C), positions=POS)
    np.testing.assert_allclose(rep.J_par, rep.J_perp, rtol=1e-9, atol=1e-9 * np.abs(rep.J_par).max())
    Jy = np.linalg.inv(C)
    for g in rep.geometry:
        assert rep.J_par[g.i, g.j] == pytest.approx(Jy[g.i, g.j], abs=1e-8 * np.abs(Jy).max())


def test_horizontal_pair_reads_plain_entries(rng):
    C = random_psd(rng, 16, 16)
    J = pseudo_inverse(C)
    rep = geo.longitudinal_torsion(_stats(C), positions=POS)
    # landmarks 0 and 3 sit at equal height
    assert rep.J_par[0, 3] == pytest.approx(J[0, 3], rel=1e-9)
    assert rep.J_perp[0, 3] == pytest.approx(J[8, 11], rel=1e-9)
    assert rep.C_par[0, 3] == C[0, 3]


def test_elastic_constants():
    np.testing.assert_array_equal(geo.elastic_constants([[2.0, -4.0]]), [[-1.0, 2.0]])


def test_t_values_and_mask():
    with pytest.warns(UserWarning, match="infinite t"):
        t, mask = geo.t_values([[1.0, 2.0], [0.0, 3.0]], [[1.0, 0.0], [0.0, 6.0]])
    assert t[0, 1] == np.inf and t[1, 0] == 0.0 and t[1, 1] == 0.5
    np.testing.assert_array_equal(mask, [[False, True], [False, False]])


def test_coupling_sigma_from_bootstrap():
    data = synth.generate(synth.isotropic_model(n_subjects=30, n_per_subject=10), seed=0)
    sp, st_ = geo.bootstrap_coupling_sigma(data, positions=POS, n_realizations=20, flavor="bare")
    assert sp.shape == (8, 8) and (sp[np.triu_indices(8, 1)] > 0).all()
    rep = geo.longitudinal_torsion(compute_bare_moments(data, n_bootstrap=0), positions=POS, sigma=(sp, st_))
    assert rep.t_par.shape == (8, 8) and np.all(np.diag(rep.t_par) == 0)


# ---------------------------------------------------------------- angles


def test_gaussian_angle_density_normalized():
    cov = np.array([[2.0, 0.6], [0.6, 0.5]])
    for mode, (lo, hi) in (("arctan", (-math.pi / 2, math.pi / 2)), ("atan2", (-math.pi, math.pi))):
        val, _ = integrate.quad(lambda p: geo.gaussian_angle_density(cov, np.array([p]), mode)[0], lo, hi)
        assert val == pytest.approx(1.0, abs=1e-10)


def test_isotropic_angles_look_uniform():
    data = synth.generate(synth.isotropic_model(), seed=1)
    for mode in ("arctan", "atan2"):
        assert geo.uniformity_test(geo.angle_histogram(data, 4, mode=mode)) > 0.05


def test_anisotropic_histogram_peaks_on_major_axis(rng):
    X = np.zeros((20000, 4))
    z = rng.multivariate_normal([0, 0], [[1.0, 0.0], [0.0, 0.05]], 20000)
    X[:, 1], X[:, 3] = z[:, 0], z[:, 1]
    h = geo.angle_histogram(X, 1, bins=24)
    centers = 0.5 * (h.edges[1:] + h.edges[:-1])
    assert abs(centers[np.argmax(h.counts)]) < 0.2
    assert geo.uniformity_test(h) < 1e-6


def test_histogram_comparison():
    m = synth.isotropic_model()
    a = geo.angle_histogram(synth.generate(m, seed=2), 0)
    b = geo.angle_histogram(synth.generate(m, seed=3), 0)
    assert geo.compare_histograms(a, b) > 0.05
    with pytest.raises(PreconditionError):
        geo.compare_histograms(a, geo.angle_histogram(synth.generate(m, seed=3), 0, bins=10))


def test_unknown_angle_mode():
    with pytest.raises(ValueError):
        geo.displacement_angles(np.zeros((3, 4)), 0, mode="degrees")


# ---------------------------------------------------------------- C versus J


def test_chain_precision_has_dense_correlations():
    n = 4
    K = 2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1) + 0.1 * np.eye(n)
    J = np.kron(np.eye(2), K)
    C = np.linalg.inv(J)

    class M:
        pass

    m = M()
    m.J = J
    rep = geo.compare_C_vs_J(_stats(C), m)
    assert rep.j_not_c == 0 and rep.c_not_j > 0
    np.testing.assert_array_equal(rep.blocks["xy"][1], np.zeros((n, n)))
    assert set(rep.to_dict()) >= {"blocks", "c_not_j", "j_not_c"}


def test_trend_export(tmp_path):
    rep = geo.longitudinal_torsion(_stats(np.asarray(synth.isotropic_model().params["cov"])), positions=POS)
    tab = geo.trend_export(rep)
    assert len(tab.rows) == 28
    assert set(tab.summary) == {"spearman_abs_J_par_vs_distance", "spearman_abs_J_perp_vs_distance",
                                "spearman_abs_J_par_vs_angle", "spearman_abs_J_perp_vs_angle"}
    tab.write_csv(tmp_path / "t.csv", provenance={"seed": 0})
    assert (tmp_path / "t.csv").read_text().splitlines()[1] == ",".join(geo.TREND_COLUMNS)


# ---------------------------------------------------------------- constraint study


def test_leave_one_out_flips_signs():
    sysm = synth.distance_system()
    X = synth.sample_distance_system(sysm, 20000, seed=0)
    C = np.cov(X, rowvar=False, bias=True)
    res = geo.leave_one_out_study(C, sysm.group)
    assert all(s == 1 for s in res.signs_pinv.values())
    for k in sysm.group:
        assert res.flipped(k)


def test_leave_one_out_notes_singular_deletion():
    C = np.diag([1.0, 1.0, 0.0, 0.0])
    res = geo.leave_one_out_study(C, (0, 1, 2))
    assert res.J_minus[0] is None and len(res.notes) == 3


# ---------------------------------------------------------------- proportions


def test_proportion_prediction_for_small_spread(rng):
    X = np.column_stack([2 + 0.05 * rng.standard_normal(100000), 1 + 0.05 * rng.standard_normal(100000)])
    (row,) = geo.proportion_check(X, [(0, 1)])
    assert row.reliable and row.discrepancy < 1e-3


def test_proportion_skips_zero_denominator(rng):
    X = rng.standard_normal((100, 2))
    X[:, 1] -= X[:, 1].mean()
    with pytest.warns(UserWarning, match="near-zero denominator"):
        assert geo.proportion_check(X, [(0, 1)]) == []


# ---------------------------------------------------------------- binary demo


@pytest.mark.parametrize("key", ["binary_demo", "binary_strong"])
def test_binary_correlations_match_frozen(frozen, key):
    o = frozen[key]
    np.testing.assert_allclose(geo.enumerate_pairwise_binary(o["J"]), o["corr"], atol=1e-14)


def test_binary_demo_all_positive(frozen):
    corr = geo.enumerate_pairwise_binary(frozen["binary_demo"]["J"])
    assert (corr > 0).all()


def test_binary_cap():
    with pytest.raises(CapabilityError):
        geo.enumerate_pairwise_binary(np.zeros((17, 17)))


def test_arrow_diagram(tmp_path):
    geo.write_arrow_diagram(tmp_path / "a.svg", POS, np.ones((8, 8)), title="x", provenance={"seed": 1})
    assert "<svg" in (tmp_path / "a.svg").read_text()
