"""Pairwise (Gaussian) maximum-entropy model under linear constraints.

The covariance of constrained data is singular.  The model lives on the
subspace spanned by its non-null eigenvectors; null-mode coordinates are fixed
at their constraint values and play no part in the density.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import (
    DEFAULT_CONSTRAINT_TOL,
    DEFAULT_EIGEN_THRESHOLD,
    ConstraintSet,
    Dataset,
    MomentStatistics,
    _as_array,
)
from .errors import ConstraintViolationError, NonPSDError

VARIANTS = ("full", "fields_only", "approximated", "null_xy", "dot")
LOG_2PI = math.log(2 * math.pi)


def _retained_spectrum(A, threshold):
    lam, vec = np.linalg.eigh(A)
    top = np.abs(lam).max() if lam.size else 0.0
    keep = np.abs(lam) >= threshold * top if top > 0 else np.zeros(lam.size, bool)
    return lam, vec, keep


def pseudo_inverse(A, threshold=DEFAULT_EIGEN_THRESHOLD):
    """Inverse of a symmetric matrix on its non-null eigenspace.

    Eigenvalues with ``|lambda| < threshold * max|lambda|`` are treated as
    exact zeros.

    >>> pseudo_inverse(np.array([[1.0, 1.0], [1.0, 1.0]]))
    array([[0.25, 0.25],
           [0.25, 0.25]])
    """
    A = np.asarray(A, dtype=float)
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("pseudo_inverse needs a symmetric matrix")
    lam, vec, keep = _retained_spectrum(0.5 * (A + A.T), threshold)
    if not keep.any():
        warnings.warn("all eigenvalues below threshold; pseudo-inverse is zero", stacklevel=2)
        return np.zeros_like(A)
    V = vec[:, keep]
    out = (V / lam[keep]) @ V.T
    return 0.5 * (out + out.T)


@dataclass
class GaussianModel:
    """Fitted ``(h, J)`` with its normalization on the retained subspace.

    The log density is ``-x.J.x/2 + h.x - log_norm`` with ``h = J.mean``, so
    the model mean on the retained subspace is the data mean.
    """

    h: np.ndarray
    J: np.ndarray
    mean: np.ndarray
    constraints: ConstraintSet | None = None
    variant: str = "full"
    threshold: float = DEFAULT_EIGEN_THRESHOLD
    constraint_tol: float = DEFAULT_CONSTRAINT_TOL
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.J = np.asarray(self.J, dtype=float)
        self.mean = np.asarray(self.mean, dtype=float)
        lam, vec, keep = _retained_spectrum(self.J, self.threshold)
        if np.any(lam[keep] < 0):
            raise NonPSDError(
                f"{self.variant} interaction matrix has negative eigenvalue {lam[keep].min():.3g}"
            )
        self.eigenvalues = lam[keep]
        self.basis = vec[:, keep]
        self.null_basis = vec[:, ~keep]
        self.null_constants = self.mean @ self.null_basis
        g = self.basis.T @ self.h
        self.log_norm = float(
            0.5 * self.rank * LOG_2PI - 0.5 * np.log(self.eigenvalues).sum() + 0.5 * (g * g / self.eigenvalues).sum()
        )

    @property
    def dim(self):
        return self.h.size

    @property
    def rank(self):
        return self.eigenvalues.size

    @property
    def covariance(self):
        return (self.basis / self.eigenvalues) @ self.basis.T

    def residuals(self, X):
        return np.atleast_2d(X) @ self.null_basis - self.null_constants

    def project(self, X):
        """Move points onto the model's constraint fiber."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X - self.residuals(X) @ self.null_basis.T

    def to_dict(self):
        return {
            "family": "gaussian",
            "variant": self.variant,
            "h": self.h.tolist(),
            "J": self.J.tolist(),
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "null_basis": self.null_basis.tolist(),
            "log_norm": self.log_norm,
            "threshold": self.threshold,
            "constraint_tol": self.constraint_tol,
            "constraints": None if self.constraints is None else self.constraints.to_dict(),
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls(
            h=np.array(d["h"]),
            J=np.array(d["J"]),
            mean=np.array(d["mean"]),
            constraints=None if d.get("constraints") is None else ConstraintSet.from_dict(d["constraints"]),
            variant=d["variant"],
            threshold=d["threshold"],
            constraint_tol=d.get("constraint_tol", DEFAULT_CONSTRAINT_TOL),
            config=d.get("config", {}),
        )

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _check_psd(lam):
    top = np.abs(lam).max(initial=0.0)
    if lam.size and lam.min() < -1e-10 * top:
        raise NonPSDError(f"covariance has negative eigenvalue {lam.min():.3g} (max {top:.3g})")


def _threshold(constraints, threshold):
    if threshold is not None:
        return threshold
    return constraints.threshold if constraints is not None else DEFAULT_EIGEN_THRESHOLD


def fit_gaussian(stats: MomentStatistics, constraints=None, threshold=None):
    """``J = pinv(C)`` and ``h = J . mean``.

    Raises
    ------
    NonPSDError
        ``corr2`` has an eigenvalue below ``-1e-10 * lambda_max``.
    """
    thr = _threshold(constraints, threshold)
    C = stats.corr2
    _check_psd(np.linalg.eigvalsh(C))
    J = pseudo_inverse(C, thr)
    return GaussianModel(J @ stats.mean, J, stats.mean, constraints, "full", thr)


def _blocks(A):
    n = A.shape[0] // 2
    return A[:n, :n], A[n:, n:], A[:n, n:]


# canonical x-y correlation above which the first-order oblique block is flagged
OBLIQUE_WARN = 0.5


def _inv_sqrt(A, threshold):
    lam, vec, keep = _retained_spectrum(A, threshold)
    lam, vec = lam[keep], vec[:, keep]
    return (vec / np.sqrt(np.abs(lam))) @ vec.T


def _max_canonical_correlation(Cxx, Cyy, Cxy, threshold):
    M = _inv_sqrt(Cxx, threshold) @ Cxy @ _inv_sqrt(Cyy, threshold)
    return float(np.linalg.norm(M, 2)) if M.size else 0.0


def fit_variant(stats: MomentStatistics, constraints=None, variant="full", threshold=None):
    """Reduced variants of the pairwise model.

    ``fields_only``
        independent coordinates, ``J = diag(1 / var)``.
    ``approximated``
        diagonal blocks inverted separately, oblique block to first order in
        ``C_xy``.
    ``null_xy``
        full fit with the oblique block removed.
    ``dot``
        one coupling per landmark pair, shared by the x and y blocks, from the
        matrix of mean dot products ``<D_i . D_j> / 2``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    thr = _threshold(constraints, threshold)
    if variant == "full":
        return fit_gaussian(stats, constraints, thr)
    C = stats.corr2
    _check_psd(np.linalg.eigvalsh(C))
    D = C.shape[0]
    n = D // 2
    if variant == "fields_only":
        var = np.diag(C).copy()
        inv = np.zeros(D)
        ok = var >= thr * var.max(initial=0.0)
        inv[ok] = 1.0 / var[ok]
        J = np.diag(inv)
    elif variant == "approximated":
        Cxx, Cyy, Cxy = _blocks(C)
        Jxx, Jyy = pseudo_inverse(Cxx, thr), pseudo_inverse(Cyy, thr)
        rho = _max_canonical_correlation(Cxx, Cyy, Cxy, thr)
        if rho > OBLIQUE_WARN:
            warnings.warn(f"largest x-y canonical correlation is {rho:.2f}; the first-order oblique block "
                          "is unreliable", stacklevel=2)
        Jxy = -Jxx @ Cxy @ Jyy
        J = np.block([[Jxx, Jxy], [Jxy.T, Jyy]])
    elif variant == "null_xy":
        J = pseudo_inverse(C, thr)
        J[:n, n:] = 0.0
        J[n:, :n] = 0.0
    else:
        Cxx, Cyy, _ = _blocks(C)
        Jd = pseudo_inverse(0.5 * (Cxx + Cyy), thr)
        J = np.zeros((D, D))
        J[:n, :n] = Jd
        J[n:, n:] = Jd
    return GaussianModel(J @ stats.mean, J, stats.mean, constraints, variant, thr)


def log_density(model: GaussianModel, x, on_violation="reject"):
    """Log density on the model's retained subspace.

    Parameters
    ----------
    x : array_like, shape (D,) or (S, D), or a Dataset
    on_violation : {"reject", "project", "ignore"}
        What to do with points off the constraint fiber.

    Returns
    -------
    float or ndarray
    """
    single = not isinstance(x, Dataset) and np.ndim(x) == 1
    X = _as_array(x).astype(float, copy=False)
    if model.null_basis.shape[1]:
        res = np.abs(model.residuals(X)).max(axis=1)
        bad = res > model.constraint_tol
        if bad.any():
            if on_violation == "reject":
                k = int(np.argmax(res))
                raise ConstraintViolationError(
                    f"point {k} is {res[k]:.3g} off the constraint fiber", k, float(res[k])
                )
            if on_violation == "project":
                X = model.project(X)
            elif on_violation != "ignore":
                raise ValueError(f"unknown on_violation {on_violation!r}")
    Y = X @ model.basis
    g = model.basis.T @ model.h
    out = -0.5 * (Y * Y * model.eigenvalues).sum(axis=1) + Y @ g - model.log_norm
    return float(out[0]) if single else out


def log_likelihood(model, X, on_violation="reject"):
    """Mean log density over the rows of ``X``."""
    return float(np.mean(log_density(model, X, on_violation)))


def sample_gaussian(model: GaussianModel, n, seed=None):
    """Exact samples, embedded in ``D`` dims with null modes at their constants.

    Returns
    -------
    Dataset
    """
    if n < 0 or int(n) != n:
        raise ValueError(f"n must be a non-negative integer, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal((int(n), model.rank))
    g = model.basis.T @ model.h
    center = model.basis @ (g / model.eigenvalues) + model.null_basis @ model.null_constants
    X = center + (z / np.sqrt(model.eigenvalues)) @ model.basis.T
    return Dataset(X.reshape(int(n), model.dim))
