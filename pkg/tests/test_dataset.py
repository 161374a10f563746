import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from landmark_maxent import dataset as ds
from landmark_maxent import synth
from landmark_maxent.errors import (
    ConstraintViolationError,
    ParseError,
    PreconditionError,
    SchemaError,
)


def _csv(tmp_path, rows, header=None, name="d.csv"):
    header = header or ["subject", "index", *ds.column_names()]
    p = tmp_path / name
    p.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return p


# ---------------------------------------------------------------- loading


def test_load_full_size_fixture(tmp_path):
    data = synth.generate(synth.random_gaussian_planted(seed=3), seed=3)
    p = tmp_path / "full.csv"
    ds.write_dataset(p, data, {"seed": 3})
    back = ds.load_dataset(p)
    assert len(back) == 2660
    assert back.n_subjects == 95
    assert set(back.subject_counts()) == {28}
    np.testing.assert_array_equal(back.values, data.values)


def test_empty_file_warns(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.warns(UserWarning, match="empty"):
        data = ds.load_dataset(p)
    assert len(data) == 0


def test_short_row_names_the_row(tmp_path):
    good = [0, 0, *range(16)]
    bad = [1, 0, *range(15)]
    p = _csv(tmp_path, [good, bad])
    with pytest.raises(SchemaError) as exc:
        ds.load_dataset(p)
    assert exc.value.row == 3
    assert "row 3" in str(exc.value)


def test_non_numeric_field_is_parse_error(tmp_path):
    p = _csv(tmp_path, [[0, 0, "x", *range(15)]])
    with pytest.raises(ParseError):
        ds.load_dataset(p)


def test_bad_header_rejected(tmp_path):
    p = _csv(tmp_path, [[0, 0, *range(16)]], header=["subj", "index", *ds.column_names()])
    with pytest.raises(SchemaError):
        ds.load_dataset(p)


def test_unequal_subjects_warn(tmp_path):
    p = _csv(tmp_path, [[0, 0, *range(16)], [0, 1, *range(16)], [1, 0, *range(16)]])
    with pytest.warns(ds.PartialDatasetWarning):
        ds.load_dataset(p)


def test_class_column_and_comments_round_trip(tmp_path):
    X = np.random.default_rng(0).standard_normal((4, 16))
    data = ds.Dataset(X, [0, 0, 1, 1], [0, 1, 0, 1], ["A", "A", "B", "B"])
    p = tmp_path / "c.csv"
    ds.write_dataset(p, data, {"note": "x"})
    assert p.read_text().startswith("# provenance:")
    back = ds.load_dataset(p)
    np.testing.assert_array_equal(back.values, X)
    assert list(back.labels) == ["A", "A", "B", "B"]


def test_manifest_requires_keys(tmp_path):
    p = tmp_path / "m.json"
    ds.write_manifest(p, 8, 95)
    assert ds.load_manifest(p)["n_subjects"] == 95
    p.write_text('{"n_landmarks": 8}')
    with pytest.raises(SchemaError):
        ds.load_manifest(p)


# ---------------------------------------------------------------- null modes


def _constrained_stats(seed=0):
    planted = synth.random_gaussian_planted(seed=seed, n_subjects=50, n_per_subject=10)
    data = synth.generate(planted, seed)
    return planted, data, ds.compute_bare_moments(data, n_bootstrap=0)


def test_six_planted_constraints_detected():
    planted, data, stats = _constrained_stats()
    cs = ds.detect_null_modes(stats)
    assert (cs.rank, cs.n_null) == (10, 6)
    # the detected null space equals the planted one
    P_true = planted.constraints.null_basis @ planted.constraints.null_basis.T
    P_found = cs.null_basis @ cs.null_basis.T
    assert np.abs(P_true - P_found).max() < 1e-8
    assert ds.verify_constraints(data, cs)[0] < 1e-10


def test_identity_covariance_has_no_null_modes():
    stats = ds.MomentStatistics(np.zeros(16), np.eye(16), np.zeros((16, 16)), "bare", 10)
    cs = ds.detect_null_modes(stats)
    assert (cs.rank, cs.n_null) == (16, 0)


def test_sum_constraint_gives_uniform_null_vector(rng):
    D = 6
    X = rng.standard_normal((500, D))
    X -= X.mean(axis=1, keepdims=True)  # sum_i x_i = 0
    X += 1.0 / D
    stats = ds.compute_bare_moments(X, n_bootstrap=0)
    cs = ds.detect_null_modes(stats)
    assert cs.n_null == 1
    e0 = cs.null_basis[:, 0] * np.sign(cs.null_basis[0, 0])
    np.testing.assert_allclose(e0, np.full(D, 1 / np.sqrt(D)), atol=1e-10)
    np.testing.assert_allclose(cs.null_constants * np.sign(cs.null_basis[0, 0]), 1 / np.sqrt(D), atol=1e-12)


def test_ambiguous_gap_warns():
    C = np.diag([1.0, 1e-8 * 2, 1e-8 * 0.5])
    stats = ds.MomentStatistics(np.zeros(3), C, np.zeros((3, 3)), "bare", 10)
    with pytest.warns(ds.AmbiguousSpectrumWarning):
        ds.detect_null_modes(stats)


def test_declared_constraint_violation_names_vector():
    X = np.array([[1.0, 0.0], [0.5, 0.5], [0.2, 0.9]])
    cs = ds.ConstraintSet.unconstrained(2)
    with pytest.raises(ConstraintViolationError) as exc:
        cs.declare([1.0, 1.0], 1.0, X)
    assert exc.value.index == 2


def test_constraint_set_round_trip():
    _, _, stats = _constrained_stats(1)
    cs = ds.detect_null_modes(stats)
    back = ds.ConstraintSet.from_dict(cs.to_dict())
    np.testing.assert_array_equal(back.null_basis, cs.null_basis)
    np.testing.assert_array_equal(back.retained_basis, cs.retained_basis)


# ---------------------------------------------------------------- moments


def test_two_point_variance():
    stats = ds.compute_bare_moments(np.array([[1.0, 0.0], [-1.0, 0.0]]), n_bootstrap=0)
    assert stats.corr2[0, 0] == 1.0


def test_symmetric_data_has_zero_third_moment(rng):
    V = rng.standard_normal((50, 4))
    stats = ds.compute_bare_moments(np.vstack([V, -V]), order=3, n_bootstrap=0)
    assert np.abs(stats.corr3).max() < 1e-14


def test_single_vector_is_rejected():
    with pytest.raises(PreconditionError):
        ds.compute_bare_moments(np.zeros((1, 16)))


def test_bare_corr2_within_bootstrap_sigma_of_planted():
    cov = np.diag([1.0, 2.0, 0.5]) + 0.3
    X = np.random.default_rng(5).multivariate_normal(np.zeros(3), cov, 20000)
    stats = ds.compute_bare_moments(X, n_bootstrap=200, seed=1)
    z = np.abs(stats.corr2 - cov) / stats.sigma_corr2
    assert z.max() < 3.5


def test_corr3_budget_enforced():
    with pytest.raises(PreconditionError):
        ds.compute_bare_moments(np.random.default_rng(0).standard_normal((10, 16)), order=3, memory_budget=100)


def test_intersubject_equals_bare_with_one_vector_per_subject(rng):
    data = ds.Dataset(rng.standard_normal((60, 16)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        inter = ds.compute_intersubject_moments(data, n_realizations=50, seed=3)
    bare = ds.compute_bare_moments(data, n_bootstrap=0)
    np.testing.assert_array_equal(inter.corr2, bare.corr2)
    assert inter.flavor == "intersubject" and np.all(inter.sigma_corr2 > 0)


def test_intersubject_realization_counts_agree_within_sigma():
    planted = synth.gaussian_planted(np.eye(10) * 1e-4, n_subjects=60, n_per_subject=10, offset_scale=0.02)
    data = synth.generate(planted, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        few = ds.compute_intersubject_moments(data, n_realizations=1, seed=4)
    many = ds.compute_intersubject_moments(data, n_realizations=2000, seed=4)
    z = np.abs(few.corr2 - many.corr2) / np.where(many.sigma_corr2 > 0, many.sigma_corr2, np.inf)
    # a single realization is one draw from the bootstrap distribution
    assert np.mean(z < 3) > 0.97


def test_intersubject_needs_subject_ids(rng):
    with pytest.raises(PreconditionError):
        ds.compute_intersubject_moments(rng.standard_normal((10, 4)))


def test_few_realizations_warn(rng):
    with pytest.warns(UserWarning, match="realizations"):
        ds.compute_intersubject_moments(ds.Dataset(rng.standard_normal((10, 4))), n_realizations=10)


def test_bootstrap_is_deterministic(rng):
    X = rng.standard_normal((30, 4))
    a = ds.bootstrap_corr2(X, 20, seed=9)
    b = ds.bootstrap_corr2(X, 20, seed=9)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- standardize / reduce


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(hnp.arrays(float, st.tuples(st.integers(3, 30), st.integers(1, 6)), elements=finite))
def test_standardize_properties(X):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        Z, sc = ds.standardize(X)
    live = [j for j in range(X.shape[1]) if j not in sc.flagged]
    if live:
        assert np.abs(Z[:, live].mean(axis=0)).max() < 1e-12 * max(1.0, np.abs(X).max())
        assert np.abs(Z[:, live].var(axis=0) - 1).max() < 1e-9
    np.testing.assert_allclose(sc.inverse_transform(Z), X, atol=1e-12 * max(1.0, np.abs(X).max()) * 10)


def test_constant_column_flagged_and_untouched(rng):
    X = rng.standard_normal((20, 3))
    X[:, 1] = 4.0
    with pytest.warns(UserWarning, match="zero-variance"):
        Z, sc = ds.standardize(X)
    assert sc.flagged == (1,)
    assert np.all(Z[:, 1] == 4.0)


def test_reduce_to_ten_dimensions_and_back():
    _, data, stats = _constrained_stats(2)
    cs = ds.detect_null_modes(stats)
    Y, emb = ds.reduce_nonredundant(data, cs)
    assert Y.shape == (len(data), 10)
    assert np.abs(emb.reconstruct(Y) - data.values).max() < 1e-12


def test_reduce_without_constraints_is_identity(rng):
    X = rng.standard_normal((5, 4))
    Y, emb = ds.reduce_nonredundant(X, ds.ConstraintSet.unconstrained(4))
    np.testing.assert_array_equal(Y, X)


def test_reduce_rejects_off_surface_vector():
    _, data, stats = _constrained_stats(3)
    cs = ds.detect_null_modes(stats)
    X = data.values.copy()
    X[7] += cs.null_basis[:, 0] * 1e-3
    with pytest.raises(ConstraintViolationError) as exc:
        ds.reduce_nonredundant(X, cs)
    assert exc.value.index == 7


def test_preprocessor_round_trip_and_fingerprint():
    _, data, stats = _constrained_stats(4)
    cs = ds.detect_null_modes(stats)
    pre = ds.Preprocessor.fit(data, cs)
    Z = pre.transform(data)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-12)
    assert np.abs(pre.inverse_transform(Z) - data.values).max() < 1e-12
    back = ds.Preprocessor.from_dict(pre.to_dict())
    assert back.fingerprint() == pre.fingerprint()


def test_spawned_streams_are_independent_and_reproducible():
    a = [g.random() for g in ds.spawn_generators(7, 3)]
    b = [g.random() for g in ds.spawn_generators(7, 3)]
    assert a == b and len(set(a)) == 3
