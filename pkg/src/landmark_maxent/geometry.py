"""Geometric reading of fitted couplings.

Pair couplings are expressed in a frame aligned with the mean segment between
two landmarks: the longitudinal coupling penalizes changes of the distance,
the torsion coupling changes of the segment angle.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from .dataset import Dataset, MomentStatistics, _as_array, bootstrap_corr2
from .errors import CapabilityError, NumericalError, PreconditionError
from .gaussian import pseudo_inverse


@dataclass(frozen=True)
class PairGeometry:
    i: int
    j: int
    mean_distance: float
    angle: float  # folded into (-pi/2, pi/2]

    @property
    def unit(self):
        return np.array([math.cos(self.angle), math.sin(self.angle)])


def fold_angle(dx, dy):
    """``arctan(dy / dx)`` in ``(-pi/2, pi/2]``; ``dx == 0`` maps to ``pi/2``."""
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.arctan(dy / dx)
    phi = np.where(dx == 0, np.pi / 2, phi)
    return np.where(phi == -np.pi / 2, np.pi / 2, phi)


def positions_from(data_or_mean, reference=None):
    """Mean landmark positions as an ``(n, 2)`` array.

    ``data_or_mean`` is a dataset or a mean vector in ``(x..., y...)`` layout;
    ``reference`` (same layout) is added when the data are displacements.
    """
    if isinstance(data_or_mean, MomentStatistics):
        m = data_or_mean.mean
    elif isinstance(data_or_mean, Dataset) or np.ndim(data_or_mean) == 2:
        m = _as_array(data_or_mean).mean(axis=0)
    else:
        m = np.asarray(data_or_mean, dtype=float)
    if reference is not None:
        m = m + np.asarray(reference, dtype=float).reshape(-1)
    n = m.size // 2
    return np.column_stack([m[:n], m[n:]])


def pair_geometry(positions, tol=1e-12):
    """Geometry of every landmark pair; coincident pairs are skipped with a note."""
    P = np.asarray(positions, dtype=float)
    out, skipped = [], []
    for i, j in itertools.combinations(range(len(P)), 2):
        d = P[j] - P[i]
        r = float(np.hypot(*d))
        if r <= tol:
            skipped.append((i, j))
            continue
        out.append(PairGeometry(i, j, r, float(fold_angle(d[0], d[1]))))
    if skipped:
        warnings.warn(f"coincident mean positions, angle undefined for pairs {skipped}", stacklevel=2)
    return out


def rotation_operator(n, angle):
    """Orthogonal ``D x D`` map rotating every landmark's (x, y) by ``-angle``."""
    c, s = math.cos(angle), math.sin(angle)
    T = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    T[idx, idx] = c
    T[idx, n + idx] = s
    T[n + idx, idx] = -s
    T[n + idx, n + idx] = c
    return T


@dataclass
class CouplingReport:
    J_par: np.ndarray
    J_perp: np.ndarray
    C_par: np.ndarray
    C_perp: np.ndarray
    geometry: list
    t_par: np.ndarray | None = None
    t_perp: np.ndarray | None = None
    sigma_par: np.ndarray | None = None
    sigma_perp: np.ndarray | None = None
    notes: list = field(default_factory=list)

    def elastic_constants(self):
        return elastic_constants(self.J_par), elastic_constants(self.J_perp)

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("J_par", "J_perp", "C_par", "C_perp", "t_par", "t_perp",
                                           "sigma_par", "sigma_perp")}
        d = {k: None if v is None else v.tolist() for k, v in d.items()}
        d["pairs"] = [[g.i, g.j, g.mean_distance, g.angle] for g in self.geometry]
        d["notes"] = self.notes
        return d


def _rotated_couplings(C, geometry, n, threshold, invert=True):
    Jp, Jt, Cp, Ct = (np.zeros((n, n)) for _ in range(4))
    J_plain = None if invert else pseudo_inverse(C, threshold)
    for g in geometry:
        T = rotation_operator(n, g.angle)
        Cr = T @ C @ T.T
        Jr = pseudo_inverse(Cr, threshold) if invert else T @ J_plain @ T.T
        for A, B, M in ((Jp, Jt, Jr), (Cp, Ct, Cr)):
            A[g.i, g.j] = A[g.j, g.i] = M[g.i, g.j]
            B[g.i, g.j] = B[g.j, g.i] = M[n + g.i, n + g.j]
    return Jp, Jt, Cp, Ct


def longitudinal_torsion(stats: MomentStatistics, positions=None, threshold=1e-8, sigma=None):
    """Longitudinal and torsion couplings for every landmark pair.

    Each pair is a separate inference: the covariance is rotated so that the
    pair's mean segment lies along x, then pseudo-inverted; ``J_par`` is read
    from the x block and ``J_perp`` from the y block.

    Parameters
    ----------
    positions : ndarray (n, 2), optional
        Mean landmark positions; default ``stats.mean``.
    sigma : tuple of ndarray, optional
        ``(sigma_par, sigma_perp)``, e.g. from :func:`bootstrap_coupling_sigma`;
        fills the t-values.
    """
    n = stats.dim // 2
    P = positions_from(stats) if positions is None else np.asarray(positions)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        geometry = pair_geometry(P)
    notes = [str(w.message) for w in caught]
    Jp, Jt, Cp, Ct = _rotated_couplings(stats.corr2, geometry, n, threshold)
    rep = CouplingReport(Jp, Jt, Cp, Ct, geometry, notes=notes)
    if sigma is not None:
        rep.sigma_par, rep.sigma_perp = sigma
        rep.t_par, _ = t_values(Jp, sigma[0], off_diagonal=True)
        rep.t_perp, _ = t_values(Jt, sigma[1], off_diagonal=True)
    return rep


def bootstrap_coupling_sigma(data: Dataset, positions=None, n_realizations=1000, seed=0, flavor="intersubject",
                             threshold=1e-8):
    """Spread of ``(J_par, J_perp)`` over bootstrap refits of the covariance."""
    X = data.values
    P = positions_from(X) if positions is None else np.asarray(positions)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        geometry = pair_geometry(P)
    reps = bootstrap_corr2(data, n_realizations, seed, flavor)
    n = X.shape[1] // 2
    par = np.empty((n_realizations, n, n))
    perp = np.empty((n_realizations, n, n))
    for k, C in enumerate(reps):
        par[k], perp[k], _, _ = _rotated_couplings(C, geometry, n, threshold, invert=False)
    return par.std(axis=0), perp.std(axis=0)


def t_values(estimate, sigma, off_diagonal=False):
    """``t = |A| / sigma`` and the mask ``t > 1``.

    Zero ``sigma`` gives ``t = inf`` (flagged with a warning) unless ``A`` is
    also zero.
    """
    A = np.abs(np.asarray(estimate, dtype=float))
    s = np.asarray(sigma, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(s > 0, A / np.where(s > 0, s, 1.0), np.where(A > 0, np.inf, 0.0))
    if off_diagonal and t.ndim == 2:
        np.fill_diagonal(t, 0.0)
    if np.isinf(t).any():
        warnings.warn(f"{int(np.isinf(t).sum())} entries have zero sigma and infinite t", stacklevel=2)
    return t, t > 1


def elastic_constants(J):
    """Spring constants ``k = -J / 2`` of the equivalent harmonic network."""
    return -0.5 * np.asarray(J, dtype=float)


# ---------------------------------------------------------------------------
# Angle histograms
# ---------------------------------------------------------------------------


@dataclass
class AngleHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mode: str

    @property
    def probabilities(self):
        return self.counts / self.counts.sum()

    @property
    def density(self):
        return self.probabilities / np.diff(self.edges)


def displacement_angles(data, landmark, mode="arctan", center=True):
    """Angle of the displacement of one landmark in every vector."""
    X = _as_array(data)
    if center:
        X = X - X.mean(axis=0)
    n = X.shape[1] // 2
    dx, dy = X[:, landmark], X[:, n + landmark]
    if mode == "arctan":
        return fold_angle(dx, dy)
    if mode == "atan2":
        return np.arctan2(dy, dx)
    raise ValueError(f"unknown angle mode {mode!r}")


def angle_histogram(data, landmark, bins=24, mode="arctan", center=True):
    """Histogram of displacement angles over the convention's full range."""
    phi = displacement_angles(data, landmark, mode, center)
    lo, hi = (-np.pi / 2, np.pi / 2) if mode == "arctan" else (-np.pi, np.pi)
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(phi, edges)
    return AngleHistogram(edges, counts.astype(float), mode)


def uniformity_test(hist: AngleHistogram):
    """Chi-square p-value against a uniform angle distribution."""
    return float(sps.chisquare(hist.counts).pvalue)


def compare_histograms(h1: AngleHistogram, h2: AngleHistogram):
    """Chi-square homogeneity p-value of two histograms with equal edges."""
    if not np.array_equal(h1.edges, h2.edges):
        raise PreconditionError("histograms use different bins")
    table = np.vstack([h1.counts, h2.counts])
    table = table[:, table.sum(axis=0) > 0]
    return float(sps.chi2_contingency(table, correction=False).pvalue)


def gaussian_angle_density(cov, phi, mode="arctan"):
    """Angle density of a zero-mean 2D Gaussian with covariance ``cov``."""
    cov = np.asarray(cov, dtype=float)
    P = np.linalg.inv(cov)
    u = np.stack([np.cos(phi), np.sin(phi)])
    q = np.einsum("ip,ij,jp->p", u, P, u)
    p = 1.0 / (2 * np.pi * math.sqrt(np.linalg.det(cov)) * q)
    return 2 * p if mode == "arctan" else p


# ---------------------------------------------------------------------------
# Correlations versus couplings
# ---------------------------------------------------------------------------


def _significant(A, sigma, rel):
    A = np.asarray(A, dtype=float)
    if sigma is not None:
        sig = np.abs(A) > np.asarray(sigma)
    else:
        scale = np.sqrt(np.abs(np.outer(np.diag(A), np.diag(A))))
        sig = np.abs(A) > rel * scale
    np.fill_diagonal(sig, False)
    return sig


@dataclass
class CvsJReport:
    blocks: dict
    significant_C: np.ndarray
    significant_J: np.ndarray
    c_not_j: int
    j_not_c: int

    def to_dict(self):
        return {
            "blocks": {k: {"C": v[0].tolist(), "J": v[1].tolist()} for k, v in self.blocks.items()},
            "significant_C": self.significant_C.tolist(),
            "significant_J": self.significant_J.tolist(),
            "c_not_j": self.c_not_j,
            "j_not_c": self.j_not_c,
        }


def compare_C_vs_J(stats: MomentStatistics, model, sigma_C=None, sigma_J=None, rel_threshold=0.1):
    """Side-by-side blocks of ``C`` and ``J`` with significance masks.

    An off-diagonal entry is significant when it exceeds its sigma, or, with
    no sigma, ``rel_threshold`` times the geometric mean of the two diagonal
    entries.
    """
    C, J = stats.corr2, model.J
    n = C.shape[0] // 2
    blocks = {}
    for name, (rs, cs) in {"xx": (slice(0, n), slice(0, n)), "yy": (slice(n, None), slice(n, None)),
                           "xy": (slice(0, n), slice(n, None))}.items():
        blocks[name] = (C[rs, cs], J[rs, cs])
    sC = _significant(C, sigma_C, rel_threshold)
    sJ = _significant(J, sigma_J, rel_threshold)
    iu = np.triu_indices(C.shape[0], 1)
    return CvsJReport(blocks, sC, sJ, int((sC & ~sJ)[iu].sum()), int((sJ & ~sC)[iu].sum()))


@dataclass
class TrendTable:
    rows: list
    summary: dict
    note: str = ""

    def to_dict(self):
        return {"columns": TREND_COLUMNS, "rows": self.rows, "summary": self.summary, "note": self.note}

    def write_csv(self, path, provenance=None):
        with Path(path).open("w", newline="") as fh:
            if provenance is not None:
                fh.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(TREND_COLUMNS)
            w.writerows(self.rows)


TREND_COLUMNS = ["i", "j", "distance", "angle", "J_par", "J_perp", "t_par", "t_perp"]


def _spearman(a, b):
    if len(a) < 3 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(sps.spearmanr(a, b).statistic)


def trend_export(report: CouplingReport, significant_only=False):
    """Table of couplings against pair distance and angle, with rank correlations.

    Both signed couplings and absolute t-values are exported.
    """
    rows = []
    for g in report.geometry:
        tp = None if report.t_par is None else float(report.t_par[g.i, g.j])
        tt = None if report.t_perp is None else float(report.t_perp[g.i, g.j])
        if significant_only and report.t_par is not None and not ((tp or 0) > 1 or (tt or 0) > 1):
            continue
        rows.append([g.i, g.j, g.mean_distance, g.angle, float(report.J_par[g.i, g.j]),
                     float(report.J_perp[g.i, g.j]), tp, tt])
    if not rows:
        return TrendTable([], {}, "no pair passed the significance mask")
    arr = np.array([[r[2], r[3], abs(r[4]), abs(r[5])] for r in rows])
    summary = {
        "spearman_abs_J_par_vs_distance": _spearman(arr[:, 2], arr[:, 0]),
        "spearman_abs_J_perp_vs_distance": _spearman(arr[:, 3], arr[:, 0]),
        "spearman_abs_J_par_vs_angle": _spearman(arr[:, 2], np.abs(arr[:, 1])),
        "spearman_abs_J_perp_vs_angle": _spearman(arr[:, 3], np.abs(arr[:, 1])),
    }
    return TrendTable(rows, summary)


# ---------------------------------------------------------------------------
# Constraint handling study
# ---------------------------------------------------------------------------


@dataclass
class LeaveOneOutResult:
    group: tuple
    J_pinv: np.ndarray
    J_minus: dict  # k -> (D-1)x(D-1) inverse, None when singular
    signs_pinv: dict  # (i, j) -> sign of -J_ij inside the group
    signs_minus: dict  # k -> {(i, j): sign}
    notes: list = field(default_factory=list)

    def flipped(self, k):
        """Pairs whose sign under ``J^(-k)`` differs from the pseudo-inverse."""
        return [p for p, s in self.signs_minus[k].items() if s != self.signs_pinv[p]]


def leave_one_out_study(C, group, threshold=1e-8, cond_limit=1e12):
    """Compare deleting one constrained variable with null-mode removal.

    For each ``k`` in ``group`` the covariance without row and column ``k``
    is inverted; the pseudo-inverse of the full covariance is the reference.
    Signs are those of ``-J_ij`` (positive: the pair tends to move together).
    """
    C = np.asarray(C, dtype=float)
    group = tuple(int(g) for g in group)
    Jp = pseudo_inverse(C, threshold)
    pairs = list(itertools.combinations(group, 2))
    signs_p = {p: int(np.sign(-Jp[p])) for p in pairs}
    J_minus, signs_m, notes = {}, {}, []
    for k in group:
        keep = np.array([i for i in range(len(C)) if i != k])
        Ck = C[np.ix_(keep, keep)]
        if np.linalg.cond(Ck) > cond_limit:
            J_minus[k] = None
            signs_m[k] = {}
            notes.append(f"covariance without variable {k} is singular")
            continue
        Jk = np.linalg.inv(Ck)
        J_minus[k] = Jk
        pos = {v: a for a, v in enumerate(keep)}
        signs_m[k] = {p: int(np.sign(-Jk[pos[p[0]], pos[p[1]]])) for p in pairs if k not in p}
    return LeaveOneOutResult(group, Jp, J_minus, signs_p, signs_m, notes)


# ---------------------------------------------------------------------------
# Proportions
# ---------------------------------------------------------------------------


@dataclass
class ProportionRow:
    alpha: int
    beta: int
    empirical: float
    predicted: float
    discrepancy: float
    diagnostic: float
    reliable: bool


def proportion_check(data, pairs, offset=None, reliability=0.1):
    """Mean ratio of two coordinates against its second-order expansion.

    ``<r_a / r_b> ~ (m_a / m_b) (1 + var_b / m_b^2 - cov_ab / (m_a m_b))``.
    The diagnostic is the larger relative spread ``std / |mean|`` of the two
    coordinates; above ``reliability`` the row is flagged.  Pairs with a
    near-zero denominator mean are skipped.
    """
    X = _as_array(data)
    if offset is not None:
        X = X + np.asarray(offset, dtype=float).reshape(-1)
    m = X.mean(axis=0)
    Xc = X - m
    C = Xc.T @ Xc / len(X)
    rows, skipped = [], []
    for a, b in pairs:
        if abs(m[b]) <= 1e-12 * max(1.0, np.abs(m).max()):
            skipped.append((a, b))
            continue
        emp = float(np.mean(X[:, a] / X[:, b]))
        pred = float(m[a] / m[b] * (1 + C[b, b] / m[b] ** 2) - C[a, b] / m[b] ** 2)
        diag = float(max(math.sqrt(C[a, a]) / abs(m[a]) if m[a] else math.inf, math.sqrt(C[b, b]) / abs(m[b])))
        disc = abs(emp - pred) / abs(emp) if emp else abs(emp - pred)
        rows.append(ProportionRow(a, b, emp, pred, disc, diag, diag <= reliability))
    if skipped:
        warnings.warn(f"skipped pairs with near-zero denominator: {skipped}", stacklevel=2)
    return rows


# ---------------------------------------------------------------------------
# Binary spin demo
# ---------------------------------------------------------------------------


def enumerate_pairwise_binary(J, h=None, cap=16):
    """Exact ``<s_i s_j>`` of ``P(s) ~ exp(sum_{i<j} J_ij s_i s_j + h.s)`` with ``s = +-1``."""
    J = np.asarray(J, dtype=float)
    n = J.shape[0]
    if n > cap:
        raise CapabilityError(f"exact enumeration supports at most {cap} spins, got {n}")
    h = np.zeros(n) if h is None else np.asarray(h, dtype=float)
    S = 1.0 - 2.0 * ((np.arange(2**n)[:, None] >> np.arange(n)) & 1)
    Ju = np.triu(J, 1)
    logw = np.einsum("pi,ij,pj->p", S, Ju, S) + S @ h
    if not np.all(np.isfinite(logw)):
        raise NumericalError("non-finite Boltzmann weights")
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return (S.T * w) @ S


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def write_arrow_diagram(path, positions, A, mask=None, title="", provenance=None):
    """Segments between landmarks with width proportional to ``|A_ij|``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    P = np.asarray(positions, dtype=float)
    A = np.abs(np.asarray(A, dtype=float))
    mask = np.ones_like(A, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    top = max(A[mask].max(initial=0.0), 1e-300)
    fig, ax = plt.subplots(figsize=(5, 5))
    for i, j in itertools.combinations(range(len(P)), 2):
        if mask[i, j] and A[i, j] > 0:
            ax.plot(P[[i, j], 0], P[[i, j], 1], color="C0", lw=0.5 + 6 * A[i, j] / top, alpha=0.8)
    ax.scatter(P[:, 0], P[:, 1], color="k", zorder=3, s=12)
    for k, (x, y) in enumerate(P):
        ax.annotate(str(k), (x, y), textcoords="offset points", xytext=(3, 3), fontsize=8)
    ax.set_aspect("equal")
    ax.set_title(title)
    meta = {"Description": json.dumps(provenance, sort_keys=True)} if provenance is not None else None
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
