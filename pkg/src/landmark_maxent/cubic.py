"""Third-order maximum-entropy model on a bounded box.

Energy in reduced, standardized coordinates::

    H(x) = x.J.x / 2 + h.x + sum_{abc} Q_abc x_a x_b x_c / 6

A cubic energy is unbounded below on the whole space, so the model is defined
on the box ``lo <= x <= hi`` that the Metropolis proposals cover.  Outside the
box, :func:`log_density` keeps evaluating the same formula so that scores of
rare out-of-box points stay finite.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .dataset import Preprocessor, _weighted_second, _weighted_third, spawn_generators
from .errors import CapabilityError, DivergenceError, PreconditionError

LOG_2PI = math.log(2 * math.pi)
QUADRATURE_NODES = {1: 256, 2: 128, 3: 64, 4: 36}


class MixingWarning(UserWarning):
    """Metropolis acceptance rate is extreme; the chain mixes poorly."""


class ExpansionWarning(UserWarning):
    """The cubic term is too large for a first-order expansion."""


def symmetrize(Q):
    """Average a 3-tensor over all index permutations.

    Every permutation class receives one value, so the result is exactly
    symmetric (not just to rounding).
    """
    Q = np.asarray(Q, dtype=float)
    if all(np.array_equal(Q, Q.transpose(p)) for p in ((1, 0, 2), (0, 2, 1))):
        return Q.copy()  # averaging equal values can still move the last bit
    S = sum(Q.transpose(p) for p in itertools.permutations(range(3))) / 6.0
    idx = np.sort(np.indices(Q.shape).reshape(3, -1), axis=0)
    return S[idx[0], idx[1], idx[2]].reshape(Q.shape)


def independent_indices(r):
    """Index triples ``a <= b <= c`` in lexicographic order."""
    return list(itertools.combinations_with_replacement(range(r), 3))


def n_parameters(r):
    return r + r * (r + 1) // 2 + len(independent_indices(r))


def _multiplicities(r):
    mJ = np.ones((r, r))
    np.fill_diagonal(mJ, 0.5)
    mQ = np.empty((r, r, r))
    for idx in itertools.product(range(r), repeat=3):
        mQ[idx] = len(set(itertools.permutations(idx))) / 6.0
    return mJ, mQ


@dataclass
class CubicModel:
    """Parameters ``(h, J, Q)`` plus the box the model lives on.

    ``log_norm`` is ``None`` until :func:`normalize` fills it, tagging the
    method (``"quadrature"`` or ``"mayer"``).
    """

    h: np.ndarray
    J: np.ndarray
    Q: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    preprocessor: Preprocessor | None = None
    log_norm: float | None = None
    log_norm_method: str | None = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.J = np.asarray(self.J, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        r = self.h.size
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (r,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (r,)).copy()
        if self.J.shape != (r, r) or self.Q.shape != (r, r, r):
            raise ValueError("inconsistent parameter shapes")
        if not np.all(self.hi > self.lo):
            raise ValueError("box must have hi > lo")

    @property
    def r(self):
        return self.h.size

    @property
    def n_parameters(self):
        return n_parameters(self.r)

    def with_params(self, h=None, J=None, Q=None):
        return CubicModel(
            self.h if h is None else h,
            self.J if J is None else J,
            self.Q if Q is None else Q,
            self.lo,
            self.hi,
            self.preprocessor,
        )

    def pack(self):
        """Independent entries as a flat vector: h, upper J, sorted Q triples."""
        iu = np.triu_indices(self.r)
        q = [self.Q[t] for t in independent_indices(self.r)]
        return np.concatenate([self.h, self.J[iu], q])

    def unpack(self, theta):
        r = self.r
        theta = np.asarray(theta, dtype=float)
        h = theta[:r]
        iu = np.triu_indices(r)
        nJ = len(iu[0])
        J = np.zeros((r, r))
        J[iu] = theta[r : r + nJ]
        J = J + np.triu(J, 1).T
        Q = np.zeros((r, r, r))
        for t, v in zip(independent_indices(r), theta[r + nJ :]):
            for p in set(itertools.permutations(t)):
                Q[p] = v
        return self.with_params(h, J, Q)

    def in_box(self, X):
        X = np.atleast_2d(X)
        return np.all((X >= self.lo) & (X <= self.hi), axis=1)

    def to_dict(self):
        return {
            "family": "cubic",
            "h": self.h.tolist(),
            "J": self.J.tolist(),
            "Q_entries": [[*t, float(self.Q[t])] for t in independent_indices(self.r)],
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "log_norm": self.log_norm,
            "log_norm_method": self.log_norm_method,
            "preprocessor": None if self.preprocessor is None else self.preprocessor.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        r = len(d["h"])
        Q = np.zeros((r, r, r))
        for a, b, c, v in d["Q_entries"]:
            for p in set(itertools.permutations((a, b, c))):
                Q[p] = v
        pre = d.get("preprocessor")
        return cls(
            np.array(d["h"]),
            np.array(d["J"]),
            Q,
            np.array(d["lo"]),
            np.array(d["hi"]),
            None if pre is None else Preprocessor.from_dict(pre),
            d.get("log_norm"),
            d.get("log_norm_method"),
        )

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _cubic_term(Q, X):
    r = X.shape[1]
    XX = (X[:, :, None] * X[:, None, :]).reshape(len(X), r * r)
    return np.einsum("pk,pk->p", XX, X @ Q.reshape(r, r * r)) / 6.0


def energy(model: CubicModel, x):
    """``H(x)`` for one reduced vector or each row of an ``(S, r)`` array."""
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[1] != model.r:
        raise ValueError(f"expected vectors of length {model.r}, got {X.shape[1]}")
    H = 0.5 * np.einsum("pi,ij,pj->p", X, model.J, X) + X @ model.h + _cubic_term(model.Q, X)
    return float(H[0]) if single else H


def box_from_data(X, width=5.0):
    """Box ``mean +/- width * std`` of each coordinate."""
    X = np.asarray(X, dtype=float)
    c, s = X.mean(axis=0), X.std(axis=0)
    return c - width * s, c + width * s


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass
class MetropolisResult:
    samples: np.ndarray  # (n_kept * n_chains, r)
    acceptance_rate: float
    n_sweeps: int
    n_chains: int
    boundary_fraction: float


def _boundary_fraction(model, X, margin=0.02):
    if X.size == 0:
        return 0.0
    w = (model.hi - model.lo) * margin
    near = (X < model.lo + w) | (X > model.hi - w)
    return float(near.mean())


def metropolis_sample(model: CubicModel, n_sweeps=10**6, seed=None, init=None, n_chains=1, burn_in=None,
                      thin=None, block=None):
    """Single-site Metropolis chains with uniform proposals over the box.

    Parameters
    ----------
    n_sweeps : int
        Sweeps per chain after burn-in.
    init : ndarray (n_chains, r), optional
        Starting points.  Default: independent normals centred in the box
        with the per-coordinate scale ``(hi - lo) / 10``, clipped to the box.
    burn_in : int, optional
        Discarded sweeps per chain; default ``n_sweeps // 10``.
    thin : int, optional
        Keep every ``thin``-th sweep; default keeps at most 10**5 per chain.
    """
    r = model.r
    if burn_in is None:
        burn_in = n_sweeps // 10
    if thin is None:
        thin = max(1, n_sweeps // 100_000)
    rngs = spawn_generators(seed, n_chains)
    center = 0.5 * (model.lo + model.hi)
    scale = (model.hi - model.lo) / 10.0
    if init is None:
        x = np.stack([center + scale * g.standard_normal(r) for g in rngs])
    else:
        x = np.array(init, dtype=float).reshape(n_chains, r)
    x = np.ascontiguousarray(np.clip(x, model.lo, model.hi))
    h, J, Q = (np.ascontiguousarray(a) for a in (model.h, model.J, model.Q))
    lo, hi = np.ascontiguousarray(model.lo), np.ascontiguousarray(model.hi)
    if block is None:
        block = max(1, 500_000 // max(1, n_chains * r))
    block = max(thin, block - block % thin)

    n_keep = n_sweeps // thin
    out = np.empty((n_keep, n_chains, r))
    empty = np.empty((0, n_chains, r))
    accepted = 0
    kept = 0
    total = burn_in + n_keep * thin
    done = 0
    while done < total:
        T = min(block, total - done) if done >= burn_in else min(block, burn_in - done)
        U = np.empty((T, n_chains, r))
        L = np.empty((T, n_chains, r))
        for c, g in enumerate(rngs):
            # drawn sweep by sweep so the chain does not depend on the block size
            R = g.random((T, 2, r))
            U[:, c, :] = R[:, 0]
            L[:, c, :] = np.log1p(-R[:, 1])
        if done < burn_in:
            accepted += kernels.metropolis_sweeps(x, h, J, Q, lo, hi, U, L, 0, empty)
        else:
            nk = T // thin
            accepted += kernels.metropolis_sweeps(x, h, J, Q, lo, hi, U, L, thin, out[kept : kept + nk])
            kept += nk
        done += T
    rate = accepted / max(1, total * n_chains * r)
    if total and (rate < 0.01 or rate > 0.99):
        warnings.warn(f"Metropolis acceptance rate {rate:.3f} is extreme", MixingWarning, stacklevel=2)
    samples = out.transpose(1, 0, 2).reshape(-1, r)
    return MetropolisResult(samples, rate, n_sweeps, n_chains, _boundary_fraction(model, samples))


# ---------------------------------------------------------------------------
# Moments and normalization
# ---------------------------------------------------------------------------


@dataclass
class Moments:
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray


def raw_moments(X):
    """Uncentered first, second and third moments of the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    w = np.full(len(X), 1.0 / len(X))
    m2 = _weighted_second(X, w)
    return Moments(w @ X, 0.5 * (m2 + m2.T), symmetrize(_weighted_third(X, w)))


@dataclass
class QuadratureResult:
    log_z: float
    moments: Moments
    n_nodes: int


def quadrature(model: CubicModel, n_nodes=None, chunk=1 << 16):
    """Gauss-Legendre product rule for ``log Z`` and moments on the box."""
    r = model.r
    if n_nodes is None:
        if r not in QUADRATURE_NODES:
            raise CapabilityError(f"product quadrature supports r <= 4, got r = {r}")
        n_nodes = QUADRATURE_NODES[r]
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    half = 0.5 * (model.hi - model.lo)
    nodes = model.lo[:, None] + half[:, None] * (t + 1.0)  # (r, n)
    logw = np.log(w)[None, :] + np.log(half)[:, None]
    grid = np.indices((n_nodes,) * r).reshape(r, -1).T
    n_pts = len(grid)
    le = np.empty(n_pts)
    for s in range(0, n_pts, chunk):
        g = grid[s : s + chunk]
        X = nodes[np.arange(r), g]
        le[s : s + chunk] = logw[np.arange(r), g].sum(axis=1) - energy(model, X)
    log_z = float(logsumexp(le))
    p = np.exp(le - log_z)
    m1 = np.zeros(r)
    m2 = np.zeros((r, r))
    m3 = np.zeros((r, r, r))
    for s in range(0, n_pts, chunk):
        X = nodes[np.arange(r), grid[s : s + chunk]]
        ps = p[s : s + chunk]
        m1 += ps @ X
        m2 += _weighted_second(X, ps)
        m3 += _weighted_third(X, ps)
    return QuadratureResult(log_z, Moments(m1, 0.5 * (m2 + m2.T), symmetrize(m3)), n_nodes)


def gaussian_reference(model: CubicModel):
    """Mean, covariance and ``log Z`` of the quadratic part on the whole space."""
    lam = np.linalg.eigvalsh(model.J)
    if lam.min() <= 0:
        raise PreconditionError("quadratic part is not positive definite; no Gaussian reference")
    cov = np.linalg.inv(model.J)
    mu = -cov @ model.h
    log_z2 = 0.5 * model.r * LOG_2PI - 0.5 * np.log(lam).sum() + 0.5 * model.h @ cov @ model.h
    return mu, cov, float(log_z2)


def expansion_ratio(model: CubicModel):
    """Bound on ``|H3| / H2`` over the one-standard-deviation ball of the reference."""
    lam_min = np.linalg.eigvalsh(model.J).min()
    if lam_min <= 0:
        return math.inf
    sigma = lam_min**-0.5
    return float(np.abs(model.Q).sum() * sigma**3 / 3.0)


def log_norm_mayer(model: CubicModel):
    """First-order estimate ``log Z2 - <H3>`` around the Gaussian reference.

    The Gaussian third moments are ``mu_a mu_b mu_c + mu_a S_bc + mu_b S_ac
    + mu_c S_ab``, so the correction vanishes for a zero-mean reference.
    """
    mu, S, log_z2 = gaussian_reference(model)
    ratio = expansion_ratio(model)
    if ratio > 0.5:
        warnings.warn(f"expansion ratio {ratio:.3g} > 0.5; first-order estimate unreliable",
                      ExpansionWarning, stacklevel=2)
    Q = model.Q
    h3 = (np.einsum("abc,a,b,c->", Q, mu, mu, mu) + 3.0 * np.einsum("abc,a,bc->", Q, mu, S)) / 6.0
    return float(log_z2 - h3)


def normalize(model: CubicModel, method="auto"):
    """Return a copy of ``model`` with ``log_norm`` filled in."""
    if method == "auto":
        method = "quadrature" if model.r <= 3 else "mayer"
    if method == "quadrature":
        log_z = quadrature(model).log_z
    elif method == "mayer":
        log_z = log_norm_mayer(model)
    else:
        raise ValueError(f"unknown normalizer {method!r}")
    out = model.with_params()
    out.log_norm, out.log_norm_method = log_z, method
    return out


def log_density(model: CubicModel, x):
    if model.log_norm is None:
        raise PreconditionError("model has no normalizer; call normalize() first")
    return -energy(model, x) - model.log_norm


def log_likelihood(model, X):
    return float(np.mean(log_density(model, np.atleast_2d(X))))


def loglik_gradient(data: Moments, model: Moments):
    """Mean log-likelihood gradient w.r.t. the independent entries.

    Returned as symmetric arrays: ``gJ[a, b]`` is the derivative w.r.t. the
    single parameter ``J_ab = J_ba`` and ``gQ[a, b, c]`` w.r.t. the single
    parameter shared by all permutations of ``(a, b, c)``.
    """
    r = data.m1.size
    mJ, mQ = _multiplicities(r)
    return model.m1 - data.m1, mJ * (model.m2 - data.m2), mQ * (model.m3 - data.m3)


def unnormalized_loglik(model, X):
    return -float(np.mean(energy(model, X)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class CubicConfig:
    eta_h: float = 1e-2
    eta_J: float = 1e-2
    eta_Q: float = 1e-3
    n_sweeps: int = 10**6
    n_chains: int = 10
    burn_in_fraction: float = 0.1
    thin: int = 10
    max_epochs: int = 500
    stop_window: int = 10
    stop_tol: float = 0.01
    stall_epochs: int = 50
    init: str = "identity"
    box_width: float = 5.0
    normalizer: str = "auto"
    truncate_to_box: bool = True
    runaway_fraction: float = 0.05
    seed: int = 0


@dataclass
class TrainingTrace:
    epochs: list = field(default_factory=list)
    status: str = "running"
    stop_reason: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"status": self.status, "stop_reason": self.stop_reason, "config": self.config, "epochs": self.epochs}


def _init_params(train, init):
    r = train.shape[1]
    if init == "identity":
        return np.zeros(r), np.eye(r), np.zeros((r, r, r))
    if init == "gaussian":
        J = np.linalg.inv(np.cov(train, rowvar=False, bias=True).reshape(r, r))
        return -J @ train.mean(axis=0), J, np.zeros((r, r, r))
    raise ValueError(f"unknown init {init!r}")


def _is_symmetric(Q):
    return all(np.array_equal(Q, Q.transpose(p)) for p in itertools.permutations(range(3)))


def fit_cubic(train, test, config: CubicConfig | None = None, preprocessor=None, init_model=None):
    """Gradient ascent on the mean log-likelihood with Metropolis moments.

    Each epoch draws fresh chains (not persistent) from the current model and
    takes one full-data gradient step.  Training stops when the relative
    change of the test log-likelihood over ``stop_window`` epochs falls below
    ``stop_tol``, or reports a stall when the best test log-likelihood has not
    improved for ``stall_epochs`` epochs.

    Returns
    -------
    model : CubicModel
        Normalized with ``config.normalizer``.
    trace : TrainingTrace

    Raises
    ------
    DivergenceError
        Samples pile up at the box edge (runaway), parameters become
        non-finite, or, with ``truncate_to_box=False``, the energy acquires a
        cubic term and is no longer normalizable.
    """
    cfg = config or CubicConfig()
    train = np.atleast_2d(np.asarray(train, dtype=float))
    test = np.atleast_2d(np.asarray(test, dtype=float))
    if train.shape[1] != test.shape[1]:
        raise ValueError("train and test dimensions differ")
    r = train.shape[1]
    if init_model is not None:
        model = init_model.with_params()
    else:
        lo, hi = box_from_data(train, cfg.box_width)
        model = CubicModel(*_init_params(train, cfg.init), lo, hi, preprocessor)
    data_m = raw_moments(train)
    trace = TrainingTrace(config=asdict(cfg))
    per_chain = max(1, cfg.n_sweeps // cfg.n_chains)
    burn = int(per_chain * cfg.burn_in_fraction)
    thin = min(cfg.thin, per_chain)
    normalizer = cfg.normalizer
    if normalizer == "auto":
        normalizer = "quadrature" if r <= 3 else "mayer"
    best, best_epoch = -math.inf, 0
    test_hist = []

    for epoch in range(cfg.max_epochs):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExpansionWarning)
            scored = normalize(model, normalizer)
        test_ll = log_likelihood(scored, test)
        train_ll = log_likelihood(scored, train)
        test_hist.append(test_ll)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MixingWarning)
            res = metropolis_sample(model, per_chain, (cfg.seed, epoch), n_chains=cfg.n_chains,
                                    burn_in=burn, thin=thin)
        gh, gJ, gQ = loglik_gradient(data_m, raw_moments(res.samples))
        record = {
            "epoch": epoch,
            "train_ll": train_ll,
            "test_ll": test_ll,
            "acceptance": res.acceptance_rate,
            "boundary_fraction": res.boundary_fraction,
            "grad_norm": float(np.sqrt((gh**2).sum() + (gJ**2).sum() + (gQ**2).sum())),
            "q_max": float(np.abs(model.Q).max()),
        }
        trace.epochs.append(record)
        if res.boundary_fraction > cfg.runaway_fraction:
            trace.status, trace.stop_reason = "diverged", "samples accumulate at the box edge"
            raise DivergenceError(
                f"epoch {epoch}: {res.boundary_fraction:.1%} of samples at the box edge", trace
            )

        if test_ll > best:
            best, best_epoch = test_ll, epoch
        if len(test_hist) > cfg.stop_window:
            prev = test_hist[-1 - cfg.stop_window]
            if abs(test_ll - prev) < cfg.stop_tol * abs(prev):
                trace.status = "converged"
                trace.stop_reason = (
                    f"test log-likelihood changed by less than {cfg.stop_tol:.0%} over {cfg.stop_window} epochs"
                )
                break
        if epoch - best_epoch >= cfg.stall_epochs:
            trace.status = "stalled"
            trace.stop_reason = f"no test log-likelihood improvement for {cfg.stall_epochs} epochs"
            break

        h = model.h + cfg.eta_h * gh
        J = model.J + cfg.eta_J * gJ
        Q = model.Q + cfg.eta_Q * gQ
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(J)) and np.all(np.isfinite(Q))):
            trace.status, trace.stop_reason = "diverged", "non-finite parameters"
            raise DivergenceError(f"epoch {epoch}: non-finite parameters", trace)
        assert _is_symmetric(Q), "Q lost its permutation symmetry"
        if not cfg.truncate_to_box and np.any(Q != 0):
            trace.status = "diverged"
            trace.stop_reason = "cubic term makes exp(-H) non-normalizable without the box"
            raise DivergenceError(
                f"epoch {epoch}: a nonzero cubic term is unbounded below on the whole space; "
                "enable truncate_to_box to define the model on a compact domain",
                trace,
            )
        model = model.with_params(h, J, Q)
    else:
        trace.status, trace.stop_reason = "max_epochs", f"reached {cfg.max_epochs} epochs"

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExpansionWarning)
        return normalize(model, normalizer), trace


def reflect(model: CubicModel, center):
    """Model of ``2 * center - x`` when ``x`` follows ``model``.

    Odd central moments about ``center`` change sign; even ones are kept.
    """
    m = np.asarray(center, dtype=float)
    Qm = np.einsum("abc,a->bc", model.Q, m)
    J = model.J + 2.0 * Qm
    h = -model.h - 2.0 * model.J @ m - 2.0 * Qm @ m
    out = CubicModel(h, J, -model.Q, 2 * m - model.hi, 2 * m - model.lo, model.preprocessor)
    return out
