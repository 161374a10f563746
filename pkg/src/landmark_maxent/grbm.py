"""Gaussian-Bernoulli restricted Boltzmann machine.

Energy::

    E(v, h) = -sum_ia W_ia v_i h_a / s_i^2 + sum_i (v_i - c_i)^2 / (2 s_i^2) - b.h

With at most ``ENUMERATION_CAP`` hidden units the partition function is exact:
for fixed ``h`` the visible integral is Gaussian.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import kernels
from .dataset import Preprocessor, spawn_generators
from .errors import CapabilityError, DivergenceError

ENUMERATION_CAP = 20
LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class GrbmModel:
    W: np.ndarray  # (Nv, Nh)
    b: np.ndarray  # (Nh,)
    c: np.ndarray  # (Nv,)
    sigma: np.ndarray  # (Nv,)
    log_norm: float | None = None
    preprocessor: Preprocessor | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        if self.W.shape != (self.c.size, self.b.size) or self.sigma.shape != self.c.shape:
            raise ValueError("inconsistent GRBM parameter shapes")
        if not np.all(self.sigma > 0):
            raise ValueError("visible sigma must be strictly positive")

    @property
    def n_visible(self):
        return self.c.size

    @property
    def n_hidden(self):
        return self.b.size

    def copy(self):
        return GrbmModel(self.W.copy(), self.b.copy(), self.c.copy(), self.sigma.copy(), self.log_norm,
                         self.preprocessor, dict(self.config))

    def to_dict(self):
        return {
            "family": "grbm",
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
            "sigma": self.sigma.tolist(),
            "log_norm": self.log_norm,
            "preprocessor": None if self.preprocessor is None else self.preprocessor.to_dict(),
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        pre = d.get("preprocessor")
        return cls(np.array(d["W"]).reshape(len(d["c"]), len(d["b"])), np.array(d["b"]), np.array(d["c"]),
                   np.array(d["sigma"]), d.get("log_norm"), None if pre is None else Preprocessor.from_dict(pre),
                   d.get("config", {}))

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def grbm_energy(model: GrbmModel, v, h):
    """Joint energy; broadcasts over leading dimensions of ``v`` and ``h``."""
    v = np.asarray(v, dtype=float)
    h = np.asarray(h, dtype=float)
    s2 = model.sigma**2
    coupling = np.einsum("...i,ia,...a->...", v / s2, model.W, h)
    return -coupling + (((v - model.c) ** 2) / (2 * s2)).sum(axis=-1) - h @ model.b


def hidden_activations(model, v):
    return model.b + (np.asarray(v, dtype=float) / model.sigma**2) @ model.W


def hidden_probs(model: GrbmModel, v):
    """``p(h_a = 1 | v)``."""
    return expit(hidden_activations(model, v))


def visible_params(model: GrbmModel, h):
    """Mean and std of the independent normals ``p(v | h)``."""
    return model.c + np.asarray(h, dtype=float) @ model.W.T, model.sigma


def free_energy(model: GrbmModel, v):
    """``-log sum_h exp(-E(v, h))``, evaluated with an overflow-safe softplus."""
    v = np.asarray(v, dtype=float)
    quad = (((v - model.c) ** 2) / (2 * model.sigma**2)).sum(axis=-1)
    return quad - np.logaddexp(0.0, hidden_activations(model, v)).sum(axis=-1)


def hidden_states(n):
    """All ``2**n`` binary vectors, shape (2**n, n)."""
    return ((np.arange(2**n)[:, None] >> np.arange(n)) & 1).astype(float)


def _hidden_log_weights(model, H):
    m = H @ model.W.T
    c = model.c
    return H @ model.b + (((c + m) ** 2 - c**2) / (2 * model.sigma**2)).sum(axis=1)


def _check_cap(model, cap):
    if model.n_hidden > cap:
        raise CapabilityError(
            f"exact enumeration supports at most {cap} hidden units (got {model.n_hidden}); "
            "compare models by relative scores (free-energy differences) instead"
        )


def exact_log_partition(model: GrbmModel, cap=ENUMERATION_CAP, chunk=1 << 16):
    """``log Z`` by enumerating hidden states, each with a closed-form visible integral."""
    _check_cap(model, cap)
    base = model.n_visible * LOG_SQRT_2PI + np.log(model.sigma).sum()
    n = model.n_hidden
    parts = []
    for s in range(0, 2**n, chunk):
        idx = np.arange(s, min(2**n, s + chunk))
        H = ((idx[:, None] >> np.arange(n)) & 1).astype(float)
        parts.append(logsumexp(_hidden_log_weights(model, H)))
    return float(base + logsumexp(parts))


def normalize(model: GrbmModel):
    out = model.copy()
    out.log_norm = exact_log_partition(model)
    return out


def log_density(model: GrbmModel, v):
    log_z = model.log_norm if model.log_norm is not None else exact_log_partition(model)
    return -free_energy(model, v) - log_z


def log_likelihood(model, V):
    return float(np.mean(log_density(model, np.atleast_2d(V))))


def exact_visible_moments(model: GrbmModel, cap=ENUMERATION_CAP):
    """Mean and covariance of the visible marginal (a Gaussian mixture)."""
    _check_cap(model, cap)
    H = hidden_states(model.n_hidden)
    lw = _hidden_log_weights(model, H)
    p = np.exp(lw - logsumexp(lw))
    M = model.c + H @ model.W.T
    mean = p @ M
    second = (M.T * p) @ M + np.diag(model.sigma**2)
    return mean, second - np.outer(mean, mean)


def gibbs_sample(model: GrbmModel, n_steps, n_chains=100, seed=None, burn_in=None, thin=1, init=None):
    """Block Gibbs chains alternating ``h | v`` and ``v | h``; returns visible samples."""
    rng = np.random.default_rng(seed)
    if burn_in is None:
        burn_in = n_steps // 10
    v = model.c + model.sigma * rng.standard_normal((n_chains, model.n_visible)) if init is None else np.array(init)
    out = []
    for t in range(burn_in + n_steps):
        h = (rng.random((n_chains, model.n_hidden)) < hidden_probs(model, v)).astype(float)
        mu, sd = visible_params(model, h)
        v = mu + sd * rng.standard_normal(mu.shape)
        if t >= burn_in and (t - burn_in) % thin == 0:
            out.append(v.copy())
    return np.stack(out) if out else np.zeros((0, n_chains, model.n_visible))


def init_params(n_visible, n_hidden, rng):
    """Standard initialization: scaled uniform ``W``, ``c = 0``, ``sigma = 1/2``.

    Hidden biases start so each unit is active with probability about 0.1.
    """
    W = rng.uniform(-1.0, 1.0, (n_visible, n_hidden)) * math.sqrt(6.0 / (n_visible + n_hidden))
    c = np.zeros(n_visible)
    b = -0.5 * (np.linalg.norm(W + c[:, None], axis=0) + np.linalg.norm(c)) + math.log(0.1)
    return GrbmModel(W, b, c, np.full(n_visible, 0.5))


def gradient_estimate(model: GrbmModel, V, vneg, rng):
    """One PCD-1 gradient (data minus model statistics) in pure NumPy.

    Returns the gradient dictionary and the advanced negative chains.
    """
    s2 = model.sigma**2
    ph = hidden_probs(model, V)
    hs = (rng.random((len(vneg), model.n_hidden)) < hidden_probs(model, vneg)).astype(float)
    mu, sd = visible_params(model, hs)
    vn = mu + sd * rng.standard_normal(mu.shape)
    pn = hidden_probs(model, vn)
    grads = {
        "W": (V / s2).T @ ph / len(V) - (vn / s2).T @ pn / len(vn),
        "b": ph.mean(axis=0) - pn.mean(axis=0),
        "c": ((V - model.c) / s2).mean(axis=0) - ((vn - model.c) / s2).mean(axis=0),
    }
    return grads, vn


@dataclass
class GrbmConfig:
    n_hidden: int = 4
    n_steps: int = 200_000
    batch_size: int = 200
    lr_start: float = 2e-3
    lr_end: float = 2e-5
    momentum: float = 0.0
    sigma_mode: str = "rescaled"  # frozen | trained | rescaled
    eval_every: int = 1000
    window: int = 20
    seed: int = 0


@dataclass
class GrbmTrace:
    steps: list = field(default_factory=list)
    test_ll: list = field(default_factory=list)
    train_ll: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    stationary: bool | None = None
    window_std: float | None = None
    test_se: float | None = None
    status: str = "running"
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def stationarity(values, window, noise):
    """Trailing-window check on a training curve.

    The curve is stationary when the means of the two halves of the last
    ``window`` values differ by at most ``noise``, the standard error of the
    quantity being tracked.  Returns ``(stationary, window_std)``, or
    ``(None, None)`` when the curve is too short.
    """
    if window < 2 or len(values) < window:
        return None, None
    w = np.asarray(values[-window:], dtype=float)
    half = window // 2
    return bool(abs(w[half:].mean() - w[:half].mean()) <= noise), float(w.std())


def _batch_indices(rng, S, B, T):
    if S >= B:
        per_epoch = S // B
        n_perm = -(-T // per_epoch)
        idx = np.concatenate([rng.permutation(S)[: per_epoch * B] for _ in range(n_perm)])
        return idx[: T * B].reshape(T, B).astype(np.int64)
    return rng.integers(0, S, (T, B)).astype(np.int64)


def _rescale_sigma(model, train):
    """Match the model's visible marginal variances to the data's, once."""
    _, cov = exact_visible_moments(model)
    target = np.var(train, axis=0)
    s2 = model.sigma**2 + target - np.diag(cov)
    s2 = np.maximum(s2, (0.1 * model.sigma) ** 2)
    out = model.copy()
    out.sigma = np.sqrt(s2)
    return out


def train_pcd(train, test, config: GrbmConfig | None = None, preprocessor=None):
    """PCD-1 training with a linearly decaying learning rate.

    The test log-likelihood is evaluated exactly every ``eval_every`` steps
    when the hidden layer is small enough to enumerate; stationarity is judged
    on the trailing ``window`` evaluations against the standard error of the
    test-set mean.

    Raises
    ------
    DivergenceError
        Reconstruction error becomes non-finite or grows by 1e3 over its
        initial value; the partial trace is attached.
    """
    cfg = config or GrbmConfig()
    if cfg.momentum != 0.0:
        raise ValueError("only momentum 0 is supported")
    if cfg.sigma_mode not in ("frozen", "trained", "rescaled"):
        raise ValueError(f"unknown sigma_mode {cfg.sigma_mode!r}")
    train = np.ascontiguousarray(np.atleast_2d(train), dtype=float)
    test = np.atleast_2d(np.asarray(test, dtype=float))
    S, Nv = train.shape
    rng_init, rng_batch, rng_gibbs = spawn_generators(cfg.seed, 3)
    model = init_params(Nv, cfg.n_hidden, rng_init)
    model.preprocessor = preprocessor
    model.config = asdict(cfg)
    trace = GrbmTrace(config=asdict(cfg))
    exact = cfg.n_hidden <= ENUMERATION_CAP

    def evaluate(step):
        trace.steps.append(step)
        if exact:
            log_z = exact_log_partition(model)
            trace.test_ll.append(float(np.mean(-free_energy(model, test))) - log_z)
            trace.train_ll.append(float(np.mean(-free_energy(model, train))) - log_z)
        else:
            trace.test_ll.append(float(np.mean(-free_energy(model, test))))
            trace.train_ll.append(float(np.mean(-free_energy(model, train))))

    T = cfg.n_steps
    if T == 0:
        trace.status = "initialized"
        return (normalize(model) if exact else model), trace
    B = cfg.batch_size
    lr = np.linspace(cfg.lr_start, cfg.lr_end, T) if T > 1 else np.array([cfg.lr_start])
    batches = _batch_indices(rng_batch, S, B, T)
    W, b, c = model.W.copy(), model.b.copy(), model.c.copy()
    logsig = np.log(model.sigma)
    vneg = np.ascontiguousarray(train[rng_batch.integers(0, S, B)])
    recon0 = None
    evaluate(0)
    for start in range(0, T, cfg.eval_every):
        stop = min(T, start + cfg.eval_every)
        n = stop - start
        Uh = rng_gibbs.random((n, B, cfg.n_hidden))
        Nz = rng_gibbs.standard_normal((n, B, Nv))
        rec = np.empty(n)
        kernels.pcd_steps(W, b, c, logsig, train, np.ascontiguousarray(batches[start:stop]), vneg, Uh, Nz,
                          np.ascontiguousarray(lr[start:stop]), int(cfg.sigma_mode == "trained"), rec)
        model.W, model.b, model.c, model.sigma = W.copy(), b.copy(), c.copy(), np.exp(logsig)
        r_mean = float(rec.mean())
        trace.recon.append(r_mean)
        if recon0 is None:
            recon0 = r_mean
        if not np.isfinite(r_mean) or r_mean > 1e3 * max(recon0, 1e-12) or not np.all(np.isfinite(W)):
            trace.status = "diverged"
            raise DivergenceError(f"reconstruction error diverged at step {stop}", trace)
        evaluate(stop)

    ld = -free_energy(model, test)
    trace.test_se = float(ld.std() / math.sqrt(len(ld)))
    trace.stationary, trace.window_std = stationarity(trace.test_ll, cfg.window, trace.test_se)
    if cfg.sigma_mode == "rescaled":
        if exact:
            cand = _rescale_sigma(model, train)
            before = log_likelihood(model, train)
            after = log_likelihood(cand, train)
            if after >= before:
                model = cand
                trace.notes.append(f"sigma rescaled; train log-likelihood {before:.6g} -> {after:.6g}")
            else:
                trace.notes.append("sigma rescale rejected: train log-likelihood would decrease")
        else:
            trace.notes.append("sigma rescale skipped: hidden layer too large to enumerate")
    trace.status = "finished"
    if exact:
        model = normalize(model)
    return model, trace


@dataclass
class ScanPoint:
    n_hidden: int
    test_ll: float
    noise: float
    stationary: bool | None


def hidden_unit_scan(train, test, ratios=(1, 2, 4, 8, 16), config: GrbmConfig | None = None):
    """Train one GRBM per ``N_h = ratio * N_v`` and report test log-likelihoods.

    ``noise`` combines the standard error of the test-set mean with the
    trailing-window spread of the training curve.
    """
    cfg = config or GrbmConfig()
    Nv = np.atleast_2d(train).shape[1]
    out = []
    for k in ratios:
        run = GrbmConfig(**{**asdict(cfg), "n_hidden": int(k * Nv)})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model, trace = train_pcd(train, test, run)
        ld = log_density(model, test)
        se = float(ld.std() / math.sqrt(len(ld)))
        noise = math.hypot(se, trace.window_std or 0.0)
        out.append(ScanPoint(int(k * Nv), float(ld.mean()), noise, trace.stationary))
    return out
