"""Landmark displacement datasets, constraint detection and moment statistics.

Vectors are stored as ``(x0 .. x{n-1}, y0 .. y{n-1})`` in units of facial
height.  Constraints are never linearized by hand: every linear (or ratio)
constraint shows up as a near-zero eigenvalue of the fluctuation covariance
and is picked up by :func:`detect_null_modes`.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CapabilityError,
    ConstraintViolationError,
    ParseError,
    PreconditionError,
    SchemaError,
)

N_LANDMARKS = 8
DIM = 2 * N_LANDMARKS
DEFAULT_EIGEN_THRESHOLD = 1e-8
DEFAULT_CONSTRAINT_TOL = 1e-8
DEFAULT_BOOTSTRAP = 1000
# Largest corr3 tensor (bytes) we are willing to allocate.
CORR3_MEMORY_BUDGET = 2**28


class AmbiguousSpectrumWarning(UserWarning):
    """No clear gap between retained and discarded covariance eigenvalues."""

    def __init__(self, msg, retained=None, discarded=None):
        super().__init__(msg)
        self.retained = retained
        self.discarded = discarded


class PartialDatasetWarning(UserWarning):
    """Subjects contribute unequal numbers of vectors."""


def spawn_generators(seed, n):
    """One independent generator per realization.

    Results then depend only on ``seed`` and the realization index, never on
    the order or the worker on which realizations are evaluated.
    """
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def column_names(n_landmarks=N_LANDMARKS):
    return [f"x{i}" for i in range(n_landmarks)] + [f"y{i}" for i in range(n_landmarks)]


@dataclass(frozen=True)
class DisplacementVector:
    values: np.ndarray
    subject_id: int = 0
    within_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size % 2:
            raise SchemaError(f"expected an even-length 1D vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ParseError("non-finite coordinate in displacement vector")
        object.__setattr__(self, "values", v)


class Dataset(Sequence):
    """Array-backed collection of :class:`DisplacementVector`.

    Parameters
    ----------
    values : array_like, shape (S, D)
    subjects, within : array_like of int, shape (S,)
        Subject id and within-subject index of each row.  Default to one
        subject per vector.
    labels : array_like of str, optional
        Class tag per row (used by the classification harness).
    """

    def __init__(self, values, subjects=None, within=None, labels=None):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(0, 0) if values.size == 0 else values[None, :]
        if values.size and values.shape[1] % 2:
            raise SchemaError(f"dimension must be even (x and y blocks), got {values.shape[1]}")
        n = values.shape[0]
        self.values = values
        self.subjects = np.arange(n) if subjects is None else np.asarray(subjects, dtype=int)
        self.within = np.zeros(n, dtype=int) if within is None else np.asarray(within, dtype=int)
        self.labels = None if labels is None else np.asarray(labels, dtype=str)
        if self.subjects.shape != (n,) or self.within.shape != (n,):
            raise SchemaError("subject/index arrays do not match the number of vectors")
        if self.labels is not None and self.labels.shape != (n,):
            raise SchemaError("label array does not match the number of vectors")

    @classmethod
    def from_vectors(cls, vectors, labels=None):
        vectors = list(vectors)
        if not vectors:
            return cls(np.zeros((0, DIM)))
        return cls(
            np.stack([v.values for v in vectors]),
            [v.subject_id for v in vectors],
            [v.within_index for v in vectors],
            labels,
        )

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.select(np.arange(len(self))[i])
        return DisplacementVector(self.values[i], int(self.subjects[i]), int(self.within[i]))

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def n_landmarks(self):
        return self.dim // 2

    @property
    def n_subjects(self):
        return len(np.unique(self.subjects))

    def subject_counts(self):
        _, counts = np.unique(self.subjects, return_counts=True)
        return counts

    @property
    def is_complete(self):
        counts = self.subject_counts()
        return counts.size == 0 or bool(np.all(counts == counts[0]))

    def select(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            self.values[idx],
            self.subjects[idx],
            self.within[idx],
            None if self.labels is None else self.labels[idx],
        )

    def by_label(self, label):
        if self.labels is None:
            raise PreconditionError("dataset carries no class labels")
        return self.select(np.flatnonzero(self.labels == label))


def _as_array(data):
    if isinstance(data, Dataset):
        return data.values
    if isinstance(data, Sequence) and data and isinstance(data[0], DisplacementVector):
        return np.stack([v.values for v in data])
    return np.atleast_2d(np.asarray(data, dtype=float))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def load_dataset(path, n_landmarks=None):
    """Read a dataset CSV.

    The header is ``subject,index,x0..x{n-1},y0..y{n-1}`` with an optional
    trailing ``class`` column.  Lines starting with ``#`` are ignored.

    Raises
    ------
    SchemaError
        Header does not follow the convention, or a row has the wrong number
        of fields (the message names the row).
    ParseError
        A field is not a finite number.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1) if r and not r[0].startswith("#")]
    if not rows:
        warnings.warn(f"{path} is empty", stacklevel=2)
        return Dataset(np.zeros((0, 2 * (n_landmarks or N_LANDMARKS))))

    header_row, header = rows[0]
    header = [h.strip() for h in header]
    has_class = header[-1] == "class"
    coords = header[2 : len(header) - has_class]
    if header[:2] != ["subject", "index"] or len(coords) % 2:
        raise SchemaError("header must be subject,index,x0..,y0..[,class]", header_row)
    n = len(coords) // 2
    if n_landmarks is not None and n != n_landmarks:
        raise SchemaError(f"expected {n_landmarks} landmarks, header has {n}", header_row)
    if coords != column_names(n):
        raise SchemaError(f"coordinate columns must be {','.join(column_names(n))}", header_row)

    width = len(header)
    values, subjects, within, labels = [], [], [], []
    for lineno, row in rows[1:]:
        if len(row) != width:
            raise SchemaError(f"expected {width} fields, found {len(row)}", lineno)
        try:
            subjects.append(int(row[0]))
            within.append(int(row[1]))
            vec = [float(x) for x in row[2 : 2 + 2 * n]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not all(math.isfinite(x) for x in vec):
            raise ParseError("non-finite coordinate", lineno)
        values.append(vec)
        if has_class:
            labels.append(row[-1].strip())

    data = Dataset(
        np.array(values, dtype=float).reshape(-1, 2 * n),
        subjects,
        within,
        labels if has_class else None,
    )
    if len(data) and not data.is_complete:
        warnings.warn(
            f"{path}: subjects contribute unequal numbers of vectors", PartialDatasetWarning, stacklevel=2
        )
    return data


def write_dataset(path, data, provenance=None):
    """Write ``data`` in the CSV format read by :func:`load_dataset`."""
    n = data.n_landmarks if len(data) else (data.values.shape[1] // 2 if data.values.ndim == 2 else N_LANDMARKS)
    header = ["subject", "index", *column_names(n)]
    if data.labels is not None:
        header.append("class")
    with Path(path).open("w", newline="") as fh:
        if provenance is not None:
            fh.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(data)):
            row = [int(data.subjects[k]), int(data.within[k]), *(repr(float(x)) for x in data.values[k])]
            if data.labels is not None:
                row.append(data.labels[k])
            w.writerow(row)


def load_manifest(path):
    """Read the JSON manifest ``{n_landmarks, n_subjects, units, ...}``."""
    with Path(path).open() as fh:
        m = json.load(fh)
    missing = {"n_landmarks", "n_subjects", "units"} - set(m)
    if missing:
        raise SchemaError(f"manifest lacks {sorted(missing)}")
    return m


def write_manifest(path, n_landmarks, n_subjects, units="facial height", **extra):
    m = {"n_landmarks": int(n_landmarks), "n_subjects": int(n_subjects), "units": units, **extra}
    with Path(path).open("w") as fh:
        json.dump(m, fh, indent=2, sort_keys=True)
    return m


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


@dataclass
class ConstraintSet:
    """Null modes of the covariance plus any declared linear constraints.

    ``retained_basis`` rows and ``null_basis`` columns are orthonormal and
    mutually orthogonal.  ``null_constants`` hold the value of each null-mode
    coordinate, taken from the dataset mean.
    """

    retained_basis: np.ndarray  # (r, D)
    null_basis: np.ndarray  # (D, m)
    null_constants: np.ndarray  # (m,)
    eigenvalues: np.ndarray  # covariance spectrum, descending
    threshold: float = DEFAULT_EIGEN_THRESHOLD
    linear_constraints: list = field(default_factory=list)

    @property
    def dim(self):
        return self.retained_basis.shape[1]

    @property
    def rank(self):
        return self.retained_basis.shape[0]

    @property
    def n_null(self):
        return self.null_basis.shape[1]

    @classmethod
    def unconstrained(cls, dim, threshold=DEFAULT_EIGEN_THRESHOLD):
        return cls(np.eye(dim), np.zeros((dim, 0)), np.zeros(0), np.ones(dim), threshold)

    def residuals(self, X):
        """Null-mode residuals ``E0^T x - c`` for each row, shape (S, m)."""
        return np.atleast_2d(X) @ self.null_basis - self.null_constants

    def declare(self, a, c, data=None, tol=DEFAULT_CONSTRAINT_TOL):
        """Record an explicit constraint ``a . x = c``; verify it on ``data``."""
        a = np.asarray(a, dtype=float)
        if data is not None:
            r = _as_array(data) @ a - c
            k = int(np.argmax(np.abs(r)))
            if abs(r[k]) > tol:
                raise ConstraintViolationError(
                    f"declared constraint violated by vector {k} (residual {r[k]:.3g})", k, abs(r[k])
                )
        self.linear_constraints.append((a, float(c)))
        return self

    def to_dict(self):
        return {
            "retained_basis": self.retained_basis.tolist(),
            "null_basis": self.null_basis.tolist(),
            "null_constants": self.null_constants.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "threshold": self.threshold,
            "linear_constraints": [[a.tolist(), c] for a, c in self.linear_constraints],
        }

    @classmethod
    def from_dict(cls, d):
        dim = len(d["eigenvalues"])
        null = np.array(d["null_basis"], dtype=float).reshape(dim, -1)
        return cls(
            np.array(d["retained_basis"], dtype=float).reshape(-1, dim),
            null,
            np.array(d["null_constants"], dtype=float),
            np.array(d["eigenvalues"], dtype=float),
            d["threshold"],
            [(np.array(a, dtype=float), c) for a, c in d.get("linear_constraints", [])],
        )


def verify_constraints(data, constraints, tol=DEFAULT_CONSTRAINT_TOL):
    """Largest absolute null-mode residual and the row where it occurs."""
    X = _as_array(data)
    if constraints.n_null == 0 or X.shape[0] == 0:
        return 0.0, -1
    res = np.abs(constraints.residuals(X)).max(axis=1)
    k = int(np.argmax(res))
    return float(res[k]), k


def detect_null_modes(stats, threshold=DEFAULT_EIGEN_THRESHOLD):
    """Split the covariance spectrum into retained and null modes.

    Eigenvalues below ``threshold * lambda_max`` are null.  A warning carrying
    both spectra is emitted when the smallest retained eigenvalue is less than
    ten times the largest discarded one.
    """
    lam, vec = np.linalg.eigh(stats.corr2)
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    lam_max = max(lam[0], 0.0)
    null = lam < threshold * lam_max
    if lam_max == 0.0:
        null[:] = True
    retained, discarded = lam[~null], lam[null]
    if retained.size and discarded.size:
        top = max(discarded.max(), 0.0)
        if top > 0 and retained.min() / top < 10:
            warnings.warn(
                AmbiguousSpectrumWarning(
                    f"no clear spectral gap at threshold {threshold:g}: smallest retained "
                    f"{retained.min():.3g}, largest discarded {top:.3g}",
                    retained,
                    discarded,
                ),
                stacklevel=2,
            )
    E0 = vec[:, null]
    return ConstraintSet(
        retained_basis=vec[:, ~null].T.copy(),
        null_basis=E0.copy(),
        null_constants=stats.mean @ E0,
        eigenvalues=lam,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# Moment statistics
# ---------------------------------------------------------------------------


@dataclass
class MomentStatistics:
    mean: np.ndarray
    corr2: np.ndarray
    sigma_corr2: np.ndarray
    flavor: str
    sample_count: int
    corr3: np.ndarray | None = None
    n_subjects: int | None = None
    n_realizations: int = 0

    @property
    def dim(self):
        return self.mean.size

    def blocks(self):
        """The ``(C_xx, C_yy, C_xy)`` landmark blocks of ``corr2``."""
        n = self.dim // 2
        C = self.corr2
        return C[:n, :n], C[n:, n:], C[:n, n:]

    def to_dict(self):
        d = {
            "flavor": self.flavor,
            "sample_count": self.sample_count,
            "n_subjects": self.n_subjects,
            "n_realizations": self.n_realizations,
            "mean": self.mean.tolist(),
            "corr2": self.corr2.tolist(),
            "sigma_corr2": self.sigma_corr2.tolist(),
        }
        if self.corr3 is not None:
            d["corr3"] = self.corr3.tolist()
        return d


def _weighted_second(Xc, w):
    return (Xc.T * w) @ Xc


def _weighted_third(Xc, w, chunk=4096):
    D = Xc.shape[1]
    out = np.zeros((D, D, D))
    for s in range(0, Xc.shape[0], chunk):
        Xw = Xc[s : s + chunk] * w[s : s + chunk, None]
        out += np.einsum("si,sj,sk->ijk", Xw, Xc[s : s + chunk], Xc[s : s + chunk], optimize=True)
    return out


def _check_corr3_budget(D, budget):
    if 8 * D**3 > budget:
        raise CapabilityError(f"third-order tensor for D={D} needs {8 * D**3} bytes, budget is {budget}")


def bootstrap_corr2(data, n_realizations=DEFAULT_BOOTSTRAP, seed=0, flavor="bare", center=None):
    """Replicates of the second-moment matrix.

    ``bare``: resample all vectors with replacement and recompute the centered
    covariance.  ``intersubject``: resample subjects with replacement and take
    one uniformly random vector from each drawn subject; fluctuations are
    taken around ``center`` (default: the whole-database mean).

    Returns
    -------
    ndarray, shape (n_realizations, D, D)
    """
    if isinstance(data, Dataset):
        X, subjects = data.values, data.subjects
    else:
        X = _as_array(data)
        subjects = np.arange(X.shape[0])
    S, D = X.shape
    m = X.mean(axis=0) if center is None else np.asarray(center)
    Xc = X - m
    reps = np.empty((n_realizations, D, D))
    rngs = spawn_generators(seed, n_realizations)
    if flavor == "bare":
        for k, rng in enumerate(rngs):
            w = rng.multinomial(S, np.full(S, 1.0 / S)) / S
            d = w @ Xc
            reps[k] = _weighted_second(Xc, w) - np.outer(d, d)
    elif flavor == "intersubject":
        groups = _subject_groups(subjects)
        ns = len(groups)
        for k, rng in enumerate(rngs):
            drawn = rng.integers(0, ns, ns)
            pick = np.array([groups[v][rng.integers(len(groups[v]))] for v in drawn])
            reps[k] = Xc[pick].T @ Xc[pick] / ns
    else:
        raise ValueError(f"unknown flavor {flavor!r}")
    return reps


def _subject_groups(subjects):
    order = np.argsort(subjects, kind="stable")
    _, starts = np.unique(subjects[order], return_index=True)
    return np.split(order, starts[1:])


def compute_bare_moments(data, order=2, n_bootstrap=DEFAULT_BOOTSTRAP, seed=0, memory_budget=CORR3_MEMORY_BUDGET):
    """Moments over all vectors, with bootstrap errors on ``corr2``.

    ``corr2[m, n] = (1/S) sum_s D_m D_n`` with ``D`` the centered vectors.
    """
    X = _as_array(data)
    S, D = X.shape
    if S < 2:
        raise PreconditionError(f"need at least 2 vectors, got {S}")
    if order not in (2, 3):
        raise ValueError("order must be 2 or 3")
    if order == 3:
        _check_corr3_budget(D, memory_budget)
    mean = X.mean(axis=0)
    Xc = X - mean
    w = np.full(S, 1.0 / S)
    corr2 = _weighted_second(Xc, w)
    corr3 = _weighted_third(Xc, w) if order == 3 else None
    if n_bootstrap > 1:
        sigma = bootstrap_corr2(X, n_bootstrap, seed, "bare").std(axis=0)
    else:
        sigma = np.full((D, D), np.nan)
    n_subj = data.n_subjects if isinstance(data, Dataset) else None
    return MomentStatistics(mean, corr2, sigma, "bare", S, corr3, n_subj, n_bootstrap)


def compute_intersubject_moments(data, n_realizations=DEFAULT_BOOTSTRAP, seed=0, order=2,
                                 memory_budget=CORR3_MEMORY_BUDGET):
    """Inter-subject moments: one random vector per subject per realization.

    The point estimate averages, over realizations, the second moment built
    from one uniformly drawn vector of every subject.  Its error is the spread
    of the subject-bootstrap realizations of :func:`bootstrap_corr2`, so it
    scales like ``n_subjects ** -0.5``.  With one vector per subject the
    point estimate is bit-identical to the bare one.
    """
    if not isinstance(data, Dataset):
        raise PreconditionError("inter-subject statistics need subject ids (pass a Dataset)")
    if data.n_subjects < 2:
        raise PreconditionError("inter-subject statistics need at least two subjects")
    if n_realizations < 100:
        warnings.warn(f"only {n_realizations} realizations; errors will be noisy", stacklevel=2)
    if order == 3:
        _check_corr3_budget(data.dim, memory_budget)
    X = data.values
    S, D = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    groups = _subject_groups(data.subjects)
    ns = len(groups)
    counts = np.zeros(S)
    for rng in spawn_generators((seed, 1), n_realizations):
        for g in groups:
            counts[g[rng.integers(len(g))]] += 1
    w = counts / (n_realizations * ns)
    corr2 = _weighted_second(Xc, w)
    corr3 = _weighted_third(Xc, w) if order == 3 else None
    sigma = bootstrap_corr2(data, n_realizations, seed, "intersubject").std(axis=0)
    return MomentStatistics(mean, corr2, sigma, "intersubject", S, corr3, ns, n_realizations)


# ---------------------------------------------------------------------------
# Standardization and reduction
# ---------------------------------------------------------------------------


@dataclass
class Scaler:
    mean: np.ndarray
    scale: np.ndarray
    flagged: tuple = ()

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(), "flagged": list(self.flagged)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["scale"]), tuple(d.get("flagged", ())))


def standardize(data):
    """Zero-mean, unit-variance columns using whole-database statistics.

    Zero-variance columns are reported and left untouched.

    Returns
    -------
    (ndarray, Scaler)
    """
    X = _as_array(data)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    flagged = np.flatnonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if flagged.size:
        warnings.warn(f"zero-variance components left unscaled: {flagged.tolist()}", stacklevel=2)
        mean = mean.copy()
        std = std.copy()
        mean[flagged] = 0.0
        std[flagged] = 1.0
    scaler = Scaler(mean, std, tuple(int(i) for i in flagged))
    return scaler.transform(X), scaler


@dataclass
class Embedding:
    """Map between full ``D`` coordinates and the ``r`` retained coordinates."""

    retained_basis: np.ndarray  # (r, D)
    null_basis: np.ndarray  # (D, m)
    null_constants: np.ndarray  # (m,)

    @classmethod
    def from_constraints(cls, constraints):
        return cls(constraints.retained_basis, constraints.null_basis, constraints.null_constants)

    @property
    def rank(self):
        return self.retained_basis.shape[0]

    def reduce(self, X):
        return np.atleast_2d(X) @ self.retained_basis.T

    def reconstruct(self, Y):
        return np.atleast_2d(Y) @ self.retained_basis + self.null_basis @ self.null_constants

    def to_dict(self):
        return {
            "retained_basis": self.retained_basis.tolist(),
            "null_basis": self.null_basis.tolist(),
            "null_constants": self.null_constants.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        E = np.array(d["retained_basis"], dtype=float)
        D = E.shape[1]
        return cls(E, np.array(d["null_basis"], dtype=float).reshape(D, -1), np.array(d["null_constants"]))


def reduce_nonredundant(data, constraints, tol=DEFAULT_CONSTRAINT_TOL):
    """Project onto the retained basis.

    Returns
    -------
    reduced : ndarray, shape (S, r)
    embedding : Embedding
        ``embedding.reconstruct(reduced)`` recovers the input for
        constraint-satisfying data.

    Raises
    ------
    ConstraintViolationError
        Some vector leaves the constraint surface by more than ``tol``.
    """
    X = _as_array(data)
    worst, k = verify_constraints(X, constraints)
    if worst > tol:
        raise ConstraintViolationError(
            f"vector {k} violates the constraints by {worst:.3g} (tol {tol:g})", k, worst
        )
    emb = Embedding.from_constraints(constraints)
    return emb.reduce(X), emb


@dataclass
class Preprocessor:
    """Reduce to retained coordinates, then standardize.

    This is the input transform of the nonlinear models.  Two models may only
    be compared when their preprocessors share a fingerprint.
    """

    embedding: Embedding
    scaler: Scaler

    @classmethod
    def fit(cls, data, constraints, tol=DEFAULT_CONSTRAINT_TOL):
        Y, emb = reduce_nonredundant(data, constraints, tol)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, scaler = standardize(Y)
        return cls(emb, scaler)

    def transform(self, X):
        return self.scaler.transform(self.embedding.reduce(_as_array(X)))

    def inverse_transform(self, Z):
        return self.embedding.reconstruct(self.scaler.inverse_transform(Z))

    @property
    def log_jacobian(self):
        """``log |det|`` of the map from retained to standardized coordinates."""
        return -float(np.log(self.scaler.scale).sum())

    def fingerprint(self):
        h = hashlib.sha256()
        for a in (self.embedding.retained_basis, self.embedding.null_constants, self.scaler.mean, self.scaler.scale):
            h.update(np.ascontiguousarray(a, dtype=float).tobytes())
        return h.hexdigest()[:16]

    def to_dict(self):
        return {"embedding": self.embedding.to_dict(), "scaler": self.scaler.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(Embedding.from_dict(d["embedding"]), Scaler.from_dict(d["scaler"]))
