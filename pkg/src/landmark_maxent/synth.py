"""Synthetic landmark populations with planted ground truth.

Every family is defined on the retained coordinates ``y`` of a constraint
set and embedded as ``x = E^T (y_ref + y) + E0 c``, so generated vectors
satisfy the constraints by construction.  Subject structure is a shared random
offset per subject in the retained subspace.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from . import cubic as cubic_mod
from . import grbm as grbm_mod
from .dataset import ConstraintSet, Dataset, spawn_generators, write_dataset, write_manifest
from .errors import PreconditionError
from .gaussian import GaussianModel

# Frontal landmark layout in units of facial height.
REFERENCE_POSITIONS = np.array([
    [-0.30, 0.27],   # outer corner, left eye
    [-0.12, 0.24],   # inner corner, left eye
    [0.12, 0.24],    # inner corner, right eye
    [0.30, 0.27],    # outer corner, right eye
    [0.00, 0.00],    # nose tip
    [-0.18, -0.25],  # mouth, left corner
    [0.18, -0.25],   # mouth, right corner
    [0.00, -0.50],   # chin
])


def flatten_positions(P):
    P = np.asarray(P, dtype=float)
    return np.concatenate([P[:, 0], P[:, 1]])


def face_constraint_matrix(reference=REFERENCE_POSITIONS):
    """Six linear constraints of a symmetric face, rows ``a`` with ``a.x = c``.

    Nose and chin on the midline, both eye slopes fixed, inner eye corners
    level, mouth corners level.
    """
    n = len(reference)
    ref = flatten_positions(reference)

    def e(k, axis):
        v = np.zeros(2 * n)
        v[k + n * axis] = 1.0
        return v

    rows = [e(4, 0), e(7, 0) - e(4, 0)]
    for i, j in ((0, 1), (2, 3)):
        k = (ref[n + i] - ref[n + j]) / (ref[i] - ref[j])
        rows.append(e(i, 1) - e(j, 1) - k * (e(i, 0) - e(j, 0)))
    rows += [e(1, 1) - e(2, 1), e(5, 1) - e(6, 1)]
    A = np.array(rows)
    return A, A @ ref


def constraint_set(A, reference_vector, rank=None, seed=0):
    """Exact constraint set for rows ``A``; optionally keep only ``rank`` free directions.

    With ``rank`` smaller than the null-space dimension of ``A``, extra
    constraints along random directions of that null space are added.
    """
    ref = np.asarray(reference_vector, dtype=float)
    D = ref.size
    A = np.zeros((0, D)) if A is None or len(A) == 0 else np.atleast_2d(A)
    free = null_space(A) if len(A) else np.eye(D)
    if rank is not None and rank < free.shape[1]:
        rot = np.linalg.qr(np.random.default_rng(seed).standard_normal((free.shape[1], free.shape[1])))[0]
        free = free @ rot[:, :rank]
    E = free.T
    E0 = null_space(E) if E.shape[0] < D else np.zeros((D, 0))
    lam = np.concatenate([np.ones(E.shape[0]), np.zeros(E0.shape[1])])
    cs = ConstraintSet(E.copy(), E0, ref @ E0, lam)
    cs.linear_constraints = [(a, float(a @ ref)) for a in A]
    return cs


def face_constraints(rank=None, seed=0, reference=REFERENCE_POSITIONS):
    A, _ = face_constraint_matrix(reference)
    return constraint_set(A, flatten_positions(reference), rank, seed)


@dataclass
class PlantedModel:
    """Ground-truth population.

    ``params`` depends on the family: ``{"mean", "cov"}`` for ``gaussian``, a
    :class:`CubicModel` or :class:`GrbmModel` in retained coordinates for the
    others.
    """

    family: str
    params: object
    constraints: ConstraintSet
    reference: np.ndarray  # full-coordinate anchor point
    class_tag: str = "none"
    n_subjects: int = 95
    n_per_subject: int = 28
    offset_scale: float = 0.0
    sampler: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("gaussian", "cubic", "grbm"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "cubic":
            check_cubic_valid(self.params)

    @property
    def rank(self):
        return self.constraints.rank

    def embed(self, Y):
        E = self.constraints.retained_basis
        y_ref = E @ self.reference
        return (y_ref + np.atleast_2d(Y)) @ E + self.constraints.null_basis @ self.constraints.null_constants

    def gaussian_model(self):
        """The planted Gaussian as a full-coordinate :class:`GaussianModel`."""
        if self.family != "gaussian":
            raise PreconditionError("only the gaussian family has a closed-form pairwise model")
        E = self.constraints.retained_basis
        Jy = np.linalg.inv(self.params["cov"])
        J = E.T @ Jy @ E
        mean = self.embed(self.params["mean"])[0]
        return GaussianModel(J @ mean, J, mean, self.constraints)

    def to_dict(self):
        if self.family == "gaussian":
            params = {k: np.asarray(v).tolist() for k, v in self.params.items()}
        else:
            params = self.params.to_dict()
        return {
            "family": self.family,
            "class_tag": self.class_tag,
            "params": params,
            "constraints": self.constraints.to_dict(),
            "reference": np.asarray(self.reference).tolist(),
            "subject_structure": [self.n_subjects, self.n_per_subject, self.offset_scale],
            "sampler": self.sampler,
        }


def check_cubic_valid(model: cubic_mod.CubicModel, n_starts=20, seed=0, rel_tol=1e-6):
    """Reject cubic parameters whose energy minimum on the box sits on its edge.

    An edge minimum means the energy keeps decreasing outward, i.e. the
    distribution is not normalizable without the box.
    """
    rng = np.random.default_rng(seed)
    bounds = list(zip(model.lo, model.hi))

    def f(x):
        return cubic_mod.energy(model, x)

    def grad(x):
        return model.J @ x + model.h + 0.5 * np.einsum("abc,b,c->a", model.Q, x, x)

    best = None
    for _ in range(n_starts):
        x0 = rng.uniform(model.lo, model.hi)
        res = minimize(f, x0, jac=grad, method="L-BFGS-B", bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    width = model.hi - model.lo
    on_edge = np.any((best.x - model.lo < rel_tol * width) | (model.hi - best.x < rel_tol * width))
    if on_edge:
        raise PreconditionError(
            f"cubic energy is minimized on the sampling box edge at {np.round(best.x, 4).tolist()}; "
            "the planted parameters are not normalizable"
        )
    return best.x


def generate(model: PlantedModel, seed=0):
    """Draw ``n_subjects * n_per_subject`` vectors.

    Gaussian and GRBM families use one random stream per subject.  Cubic
    families draw all vectors from thinned Metropolis chains seeded by
    ``seed``, then add per-subject offsets.

    Returns
    -------
    Dataset
    """
    ns, npr, r = model.n_subjects, model.n_per_subject, model.rank
    subj_rngs = spawn_generators((seed, 0), ns)
    offsets = np.stack([model.offset_scale * g.standard_normal(r) for g in subj_rngs]) if ns else np.zeros((0, r))
    if model.family == "gaussian":
        L = np.linalg.cholesky(model.params["cov"])
        Y = np.concatenate([g.standard_normal((npr, r)) @ L.T for g in subj_rngs]) if ns else np.zeros((0, r))
        Y = Y + model.params["mean"]
    elif model.family == "cubic":
        Y = _cubic_draws(model, ns * npr, seed)
    else:
        parts = []
        for g in subj_rngs:
            chain = grbm_mod.gibbs_sample(model.params, n_steps=npr * 10, n_chains=1, seed=g, burn_in=200, thin=10)
            parts.append(chain[:, 0, :])
        Y = np.concatenate(parts) if parts else np.zeros((0, r))
    Y = Y + np.repeat(offsets, npr, axis=0)
    X = model.embed(Y) if len(Y) else np.zeros((0, model.reference.size))
    subjects = np.repeat(np.arange(ns), npr)
    within = np.tile(np.arange(npr), ns)
    labels = None if model.class_tag == "none" else np.full(len(X), model.class_tag)
    return Dataset(X, subjects, within, labels)


def _cubic_draws(model, n, seed):
    s = {"n_chains": 20, "thin": 20, "burn_in": 2000, **model.sampler}
    per_chain = -(-n // s["n_chains"])
    res = cubic_mod.metropolis_sample(model.params, per_chain * s["thin"], (seed, 1), n_chains=s["n_chains"],
                                      burn_in=s["burn_in"], thin=s["thin"])
    return res.samples[:n]


# ---------------------------------------------------------------------------
# Two-class families
# ---------------------------------------------------------------------------


def _random_cov(r, rng, spread=3.0):
    V = np.linalg.qr(rng.standard_normal((r, r)))[0]
    lam = np.exp(rng.uniform(-math.log(spread) / 2, math.log(spread) / 2, r))
    return (V * lam) @ V.T


def make_two_class(kind, magnitude, rank=4, n_subjects=100, n_per_subject=20, seed=0, constraints=None,
                   offset_scale=0.0, q_pattern="diagonal"):
    """Two planted populations identical except for one moment family.

    ``mean``
        Gaussian classes with means ``+-magnitude/2`` along a random unit
        direction and a shared covariance.
    ``pairwise``
        Gaussian classes whose covariances differ by ``+-magnitude`` on one
        off-diagonal pair; diagonals and means are shared.
    ``third-order``
        a cubic class ``A`` and its point reflection ``B`` about ``A``'s
        exact mean: all first and second moments coincide, odd central
        moments change sign.  ``magnitude`` is :func:`cubic_norm` of ``Q`` for
        a unit-precision quadratic part.  ``q_pattern="diagonal"`` skews each
        retained coordinate separately; ``"random"`` draws a dense symmetric
        tensor, which turns over inside the box at smaller magnitudes.
        Parameters whose energy minimum reaches the box edge are rejected.
    """
    rng = np.random.default_rng(seed)
    cs = constraints if constraints is not None else face_constraints(rank=rank, seed=seed)
    r = cs.rank
    ref = flatten_positions(REFERENCE_POSITIONS) if cs.dim == 16 else np.zeros(cs.dim)
    common = dict(constraints=cs, reference=ref, n_subjects=n_subjects, n_per_subject=n_per_subject,
                  offset_scale=offset_scale)
    scale = 0.02  # typical displacement, in facial heights

    if kind == "mean":
        if magnitude <= 0:
            raise PreconditionError("mean shift must be positive")
        cov = scale**2 * _random_cov(r, rng)
        u = rng.standard_normal(r)
        u /= np.linalg.norm(u)
        shift = 0.5 * magnitude * scale * u
        return (PlantedModel("gaussian", {"mean": shift, "cov": cov}, class_tag="A", **common),
                PlantedModel("gaussian", {"mean": -shift, "cov": cov}, class_tag="B", **common))

    if kind == "pairwise":
        cov = _random_cov(r, rng)
        P = np.zeros((r, r))
        P[0, 1] = P[1, 0] = 1.0
        covs = [cov + magnitude * P, cov - magnitude * P]
        if magnitude <= 0 or min(np.linalg.eigvalsh(c).min() for c in covs) <= 0:
            raise PreconditionError(f"pairwise magnitude {magnitude} breaks positive definiteness")
        return tuple(PlantedModel("gaussian", {"mean": np.zeros(r), "cov": scale**2 * c}, class_tag=t, **common)
                     for c, t in zip(covs, "AB"))

    if kind == "third-order":
        if not 0 < magnitude < 1:
            raise PreconditionError("third-order magnitude must lie in (0, 1)")
        if q_pattern == "diagonal":
            Q = np.zeros((r, r, r))
            Q[np.arange(r), np.arange(r), np.arange(r)] = rng.choice([-1.0, 1.0], r)
        elif q_pattern == "random":
            Q = cubic_mod.symmetrize(rng.uniform(-1, 1, (r, r, r)))
        else:
            raise ValueError(f"unknown q_pattern {q_pattern!r}")
        Q *= magnitude / cubic_norm(Q)
        base = cubic_mod.CubicModel(np.zeros(r), np.eye(r), Q, -5.0, 5.0)
        check_cubic_valid(base)
        mean = _exact_mean(base, seed)
        mirrored = cubic_mod.reflect(base, mean)
        models = []
        for m, t in ((base, "A"), (mirrored, "B")):
            # the unit-scale cubic lives in y / scale coordinates
            models.append(_scaled_cubic(m, scale, t, common))
        return tuple(models)
    raise ValueError(f"unknown two-class kind {kind!r}")


def cubic_norm(Q, n_starts=50, seed=0):
    """``max |Q(u, u, u)|`` over unit vectors ``u``."""
    Q = np.asarray(Q, dtype=float)
    r = Q.shape[0]

    def f(v):
        n = np.linalg.norm(v)
        return -abs(np.einsum("abc,a,b,c->", Q, v, v, v)) / n**3

    rng = np.random.default_rng(seed)
    return float(max(-minimize(f, rng.standard_normal(r), method="BFGS").fun for _ in range(n_starts)))


def _exact_mean(model, seed):
    if model.r <= 4:
        return cubic_mod.quadrature(model).moments.m1
    res = cubic_mod.metropolis_sample(model, 200_000, (seed, 2), n_chains=8, thin=10)
    return res.samples.mean(axis=0)


def _scaled_cubic(m, scale, tag, common):
    """Cubic of ``y = scale * u`` where ``u`` follows the unit-scale model ``m``."""
    s = scale
    scaled = cubic_mod.CubicModel(m.h / s, m.J / s**2, m.Q / s**3, m.lo * s, m.hi * s)
    return PlantedModel("cubic", scaled, class_tag=tag, **common)


def two_class_dataset(model_a, model_b, seed=0):
    """Generate both classes and merge them with labels and disjoint subject ids."""
    ra, rb = spawn_generators((seed, 3), 2)
    da = generate(model_a, int(ra.integers(2**32)))
    db = generate(model_b, int(rb.integers(2**32)))
    values = np.vstack([da.values, db.values])
    subjects = np.concatenate([da.subjects, db.subjects + model_a.n_subjects])
    within = np.concatenate([da.within, db.within])
    labels = np.concatenate([np.full(len(da), "A"), np.full(len(db), "B")])
    return Dataset(values, subjects, within, labels)


# ---------------------------------------------------------------------------
# Other planted systems
# ---------------------------------------------------------------------------


def isotropic_model(n_landmarks=8, coupling=0.3, scale=0.02, n_subjects=100, n_per_subject=20):
    """Unconstrained Gaussian whose x and y blocks share one precision matrix.

    Landmarks interact along a ring; there is no x-y coupling, so every
    landmark's displacement is rotationally symmetric.
    """
    n = n_landmarks
    K = np.eye(n) * (1 + 2 * coupling)
    for i in range(n):
        K[i, (i + 1) % n] = K[(i + 1) % n, i] = -coupling
    Jy = np.kron(np.eye(2), K) / scale**2
    D = 2 * n
    cs = constraint_set(None, np.zeros(D))
    return PlantedModel("gaussian", {"mean": np.zeros(D), "cov": np.linalg.inv(Jy)}, cs,
                        flatten_positions(REFERENCE_POSITIONS) if n == 8 else np.zeros(D),
                        n_subjects=n_subjects, n_per_subject=n_per_subject)


def gaussian_planted(cov, mean=None, constraints=None, reference=None, n_subjects=95, n_per_subject=28,
                     offset_scale=0.0, class_tag="none"):
    """Gaussian population with retained-coordinate covariance ``cov``."""
    cs = constraints if constraints is not None else face_constraints()
    r = cs.rank
    ref = flatten_positions(REFERENCE_POSITIONS) if reference is None else np.asarray(reference, dtype=float)
    mean = np.zeros(r) if mean is None else np.asarray(mean, dtype=float)
    return PlantedModel("gaussian", {"mean": mean, "cov": np.asarray(cov, dtype=float)}, cs, ref, class_tag,
                        n_subjects, n_per_subject, offset_scale)


def random_gaussian_planted(rank=10, seed=0, scale=0.02, **kw):
    """Face-constrained Gaussian with a random covariance of condition number 3."""
    rng = np.random.default_rng(seed)
    cs = face_constraints(rank=None if rank == 10 else rank, seed=seed)
    return gaussian_planted(scale**2 * _random_cov(cs.rank, rng), constraints=cs, **kw)


@dataclass
class DistanceSystem:
    """Distances with ferromagnetic in-group couplings and a fixed group sum."""

    J0: np.ndarray
    group: tuple
    total: float
    mean: np.ndarray


def distance_system(group_size=4, n_other=2, diag=1.0, coupling=0.3, total=1.0):
    D = group_size + n_other
    J0 = np.eye(D) * diag
    g = np.arange(group_size)
    J0[np.ix_(g, g)] -= coupling * (1 - np.eye(group_size))
    mean = np.zeros(D)
    mean[g] = total / group_size
    mean[group_size:] = 0.5
    return DistanceSystem(J0, tuple(int(i) for i in g), total, mean)


def sample_distance_system(system: DistanceSystem, n, seed=0):
    """Sample the Gaussian restricted to the plane ``sum_G d_i = total``.

    The restricted density keeps the planted couplings ``J0`` on the plane;
    its covariance is ``E (E^T J0 E)^-1 E^T`` for a basis ``E`` of the plane.
    """
    D = system.J0.shape[0]
    u = np.zeros(D)
    u[list(system.group)] = 1.0
    E = null_space(u[None, :])
    B = E.T @ system.J0 @ E
    L = np.linalg.cholesky(np.linalg.inv(B))
    z = np.random.default_rng(seed).standard_normal((n, E.shape[1]))
    return system.mean + (z @ L.T) @ E.T


def spring_network(positions, springs, scale=1.0):
    """Precision matrix of harmonic springs ``{(i, j): k}`` along each mean segment.

    A spring adds ``k ((u_i - u_j) . e)^2`` to ``x.J.x / 2``, so the ``(i, j)``
    block of ``J`` gains ``-2 k e e^T``.  ``scale`` is an on-site stiffness
    that keeps ``J`` positive definite.
    """
    P = np.asarray(positions, dtype=float)
    n = len(P)
    J = np.eye(2 * n) * scale
    for (i, j), k in springs.items():
        e = (P[j] - P[i]) / np.linalg.norm(P[j] - P[i])
        proj = np.outer(e, e)
        for (a, b), sgn in (((i, i), 1), ((j, j), 1), ((i, j), -1), ((j, i), -1)):
            for p in range(2):
                for q in range(2):
                    J[a + n * p, b + n * q] += 2 * k * sgn * proj[p, q]
    return J


def write_planted(out_dir, data: Dataset, planted, seed, provenance=None):
    """Emit ``data.csv``, ``manifest.json`` and ``planted.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "data.csv", data, provenance)
    models = planted if isinstance(planted, (list, tuple)) else [planted]
    ref = models[0].reference
    n = ref.size // 2
    write_manifest(out / "manifest.json", n, data.n_subjects if len(data) else 0,
                   reference_positions=np.column_stack([ref[:n], ref[n:]]).tolist(), seed=seed,
                   **({"provenance": provenance} if provenance is not None else {}))
    with (out / "planted.json").open("w") as fh:
        json.dump({"seed": seed, "models": [m.to_dict() for m in models]}, fh, indent=2, sort_keys=True)
