"""Two-class likelihood-ratio classification, ROC analysis and baselines.

Class ``A`` is the positive class: a vector is assigned to ``A`` when its
score ``log L_A - log L_B`` exceeds the threshold.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cubic as cubic_mod
from . import gaussian as gaussian_mod
from . import grbm as grbm_mod
from .dataset import (
    DEFAULT_EIGEN_THRESHOLD,
    Dataset,
    Preprocessor,
    compute_bare_moments,
    detect_null_modes,
    spawn_generators,
)
from .errors import NumericalError, ParseError, PreconditionError

CLASSES = ("A", "B")
MODEL_TAGS = ("maxent1", "maxent2", "maxent2-approx", "maxent2-nullxy", "maxent2-dot", "maxent3", "grbm")
GAUSSIAN_VARIANT = {
    "maxent1": "fields_only",
    "maxent2": "full",
    "maxent2-approx": "approximated",
    "maxent2-nullxy": "null_xy",
    "maxent2-dot": "dot",
}


@dataclass(frozen=True)
class LabeledScore:
    score: float
    true_class: str
    vector_id: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise NumericalError(f"non-finite score for vector {self.vector_id}")
        if self.true_class not in CLASSES:
            raise ValueError(f"true_class must be 'A' or 'B', got {self.true_class!r}")


def _labeled(scores, classes, ids=None):
    ids = range(len(scores)) if ids is None else ids
    return [LabeledScore(float(s), str(c), int(i)) for s, c, i in zip(scores, classes, ids)]


def _arrays(scores):
    s = np.array([x.score for x in scores], dtype=float)
    pos = np.array([x.true_class == "A" for x in scores], dtype=bool)
    return s, pos


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split(data: Dataset, train_fraction=0.2, seed=0):
    """Class-stratified random split of the vectors.

    Returns
    -------
    (train, test) : tuple of Dataset
        Both keep their class labels.
    """
    if data.labels is None:
        raise PreconditionError("split needs class labels")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    rngs = dict(zip(CLASSES, spawn_generators(seed, len(CLASSES))))
    train_idx, test_idx = [], []
    for cls in CLASSES:
        idx = np.flatnonzero(data.labels == cls)
        if idx.size == 0:
            raise PreconditionError(f"class {cls} is empty")
        if len(np.unique(data.subjects[idx])) < 2:
            raise PreconditionError(f"class {cls} has fewer than 2 subjects")
        perm = rngs[cls].permutation(idx)
        n_train = int(round(train_fraction * idx.size))
        if n_train == 0 or n_train == idx.size:
            raise PreconditionError(
                f"train_fraction {train_fraction} leaves class {cls} with an empty train or test set"
            )
        train_idx.append(np.sort(perm[:n_train]))
        test_idx.append(np.sort(perm[n_train:]))
    return data.select(np.concatenate(train_idx)), data.select(np.concatenate(test_idx))


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def model_log_density(model, X, on_violation="reject"):
    """Per-row log density of full-coordinate vectors under any model family."""
    X = np.atleast_2d(X.values if isinstance(X, Dataset) else np.asarray(X, dtype=float))
    if isinstance(model, gaussian_mod.GaussianModel):
        return gaussian_mod.log_density(model, X, on_violation)
    if model.preprocessor is None:
        raise PreconditionError("model carries no preprocessor; cannot map full vectors")
    Z = model.preprocessor.transform(X)
    if isinstance(model, cubic_mod.CubicModel):
        return cubic_mod.log_density(model, Z)
    if isinstance(model, grbm_mod.GrbmModel):
        return grbm_mod.log_density(model, Z)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _fingerprint(model):
    pre = getattr(model, "preprocessor", None)
    return None if pre is None else pre.fingerprint()


def score_vectors(model_a, model_b, test: Dataset, on_violation="reject"):
    """``s = log L_A - log L_B`` for each test vector.

    Raises
    ------
    PreconditionError
        The models differ in family or in their input transform.
    """
    if type(model_a) is not type(model_b):
        raise PreconditionError("models belong to different families")
    if _fingerprint(model_a) != _fingerprint(model_b):
        raise PreconditionError("models were fitted on different standardizations")
    if test.labels is None:
        raise PreconditionError("test set needs class labels")
    s = model_log_density(model_a, test, on_violation) - model_log_density(model_b, test, on_violation)
    return _labeled(s, test.labels)


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass
class RocCurve:
    """Threshold sweep from ``+inf`` to ``-inf``.

    ``tp`` and ``fp`` are integer counts, so points depend only on the order
    of the scores.
    """

    points: np.ndarray  # (K, 2) of (FPR, TPR)
    thresholds: np.ndarray  # (K,)
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int
    auroc: float = field(init=False)
    max_accuracy: float = field(init=False)

    def __post_init__(self):
        # twice the trapezoidal area in count units; integer arithmetic is exact
        twice = int(np.sum(np.diff(self.fp) * (self.tp[1:] + self.tp[:-1])))
        self.auroc = twice / (2 * self.n_pos * self.n_neg)
        correct = self.tp + (self.n_neg - self.fp)
        self.max_accuracy = float(correct.max() / (self.n_pos + self.n_neg))

    def to_dict(self):
        return {
            "auroc": self.auroc,
            "max_accuracy": self.max_accuracy,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "curve": self.points.tolist(),
            "thresholds": [float(t) for t in self.thresholds],
            "tp": [int(t) for t in self.tp],
            "fp": [int(f) for f in self.fp],
        }

    @classmethod
    def from_dict(cls, d):
        tp = np.asarray(d["tp"], dtype=np.int64)
        fp = np.asarray(d["fp"], dtype=np.int64)
        n_pos, n_neg = int(d["n_pos"]), int(d["n_neg"])
        points = np.column_stack([fp / n_neg, tp / n_pos])
        return cls(points, np.array([float(t) for t in d["thresholds"]]), tp, fp, n_pos, n_neg)


def roc(scores):
    """ROC curve of labeled scores.

    Thresholds sit between consecutive unique scores, so equal scores move
    together and produce a diagonal segment; the trapezoidal area then equals
    ``P(s_A > s_B) + P(s_A = s_B) / 2``.
    """
    s, pos = _arrays(scores)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise PreconditionError("ROC needs scores from both classes")
    uniq, inv = np.unique(-s, return_inverse=True)  # descending scores
    tp = np.concatenate([[0], np.cumsum(np.bincount(inv, weights=pos, minlength=uniq.size))]).astype(np.int64)
    fp = np.concatenate([[0], np.cumsum(np.bincount(inv, weights=~pos, minlength=uniq.size))]).astype(np.int64)
    desc = -uniq
    thresholds = np.concatenate([[np.inf], 0.5 * (desc[:-1] + desc[1:]), [-np.inf]])
    points = np.column_stack([fp / n_neg, tp / n_pos])
    return RocCurve(points, thresholds, tp, fp, n_pos, n_neg)


def pairwise_auroc(scores):
    """``P(s_A > s_B) + P(s_A = s_B) / 2`` by counting pairs."""
    s, pos = _arrays(scores)
    a, b = s[pos], np.sort(s[~pos])
    lt = np.searchsorted(b, a, side="left")
    le = np.searchsorted(b, a, side="right")
    twice = int(2 * lt.sum() + (le - lt).sum())
    return twice / (2 * a.size * b.size)


def monotone_invariance_check(scores, f):
    """Whether ``f`` leaves the ROC curve unchanged.

    Returns ``False`` (with a warning) when ``f`` is not strictly increasing
    on the observed scores.
    """
    s, _ = _arrays(scores)
    u = np.unique(s)
    fu = np.asarray(f(u), dtype=float)
    if u.size > 1 and not np.all(np.diff(fu) > 0):
        warnings.warn("map is not strictly increasing on the score range", stacklevel=2)
        return False
    mapped = [LabeledScore(float(f(x.score)), x.true_class, x.vector_id) for x in scores]
    r0, r1 = roc(scores), roc(mapped)
    return bool(np.array_equal(r0.points, r1.points) and abs(r0.auroc - r1.auroc) <= 1e-12)


# ---------------------------------------------------------------------------
# Baselines and external scores
# ---------------------------------------------------------------------------


def pc_ttest_baseline(train_a, train_b, test: Dataset, threshold=DEFAULT_EIGEN_THRESHOLD):
    """Linear baseline from per-component Welch t statistics.

    Principal components come from the pooled training data.  The score is
    ``sum_k t_k (z_k - m_k) / s_k`` where ``z_k`` is the projection on
    component ``k``, ``m_k`` the midpoint of the class means and ``s_k`` the
    pooled standard deviation.

    Returns
    -------
    scores : list of LabeledScore
    weights : ndarray
        ``t_k`` per retained component (descending variance).
    """
    A = train_a.values if isinstance(train_a, Dataset) else np.asarray(train_a)
    B = train_b.values if isinstance(train_b, Dataset) else np.asarray(train_b)
    pooled = np.vstack([A, B])
    mu = pooled.mean(axis=0)
    lam, vec = np.linalg.eigh(np.cov(pooled - mu, rowvar=False, bias=True))
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    keep = lam > threshold * lam[0]
    za, zb = (A - mu) @ vec, (B - mu) @ vec
    se = np.sqrt(za.var(axis=0, ddof=1) / len(A) + zb.var(axis=0, ddof=1) / len(B))
    keep &= se > 0
    if not keep.all():
        warnings.warn(f"dropped {int((~keep).sum())} degenerate principal components", stacklevel=2)
    diff = za.mean(axis=0) - zb.mean(axis=0)
    t = np.zeros_like(lam)
    t[keep] = diff[keep] / se[keep]
    mid = 0.5 * (za.mean(axis=0) + zb.mean(axis=0))
    sd = np.sqrt(np.where(keep, lam, 1.0))
    zt = (test.values - mu) @ vec
    s = ((zt - mid) / sd)[:, keep] @ t[keep]
    return _labeled(s, test.labels), t[keep]


def import_external_scores(path, known_ids=None):
    """Read ``vector_id,score,true_class`` rows produced by another classifier.

    Rows whose id is not in ``known_ids`` are dropped with a warning.

    Raises
    ------
    ParseError
        Empty file, malformed row, or repeated ids (all offending rows named).
    """
    text = Path(path).read_text()
    rows = [(i, r) for i, r in enumerate(csv.reader(io.StringIO(text)), start=1)
            if r and not r[0].startswith("#")]
    if not rows:
        raise ParseError(f"{path} is empty")
    if [h.strip() for h in rows[0][1]] != ["vector_id", "score", "true_class"]:
        raise ParseError("header must be vector_id,score,true_class", rows[0][0])
    if len(rows) == 1:
        raise ParseError(f"{path} has no score rows")
    seen = {}
    parsed = []
    for lineno, r in rows[1:]:
        if len(r) != 3:
            raise ParseError(f"expected 3 fields, found {len(r)}", lineno)
        try:
            vid, score, cls = int(r[0]), float(r[1]), r[2].strip()
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if cls not in CLASSES or not math.isfinite(score):
            raise ParseError(f"bad class {cls!r} or non-finite score", lineno)
        seen.setdefault(vid, []).append(lineno)
        parsed.append((lineno, vid, score, cls))
    dups = {k: v for k, v in seen.items() if len(v) > 1}
    if dups:
        detail = "; ".join(f"id {k} on rows {v}" for k, v in sorted(dups.items()))
        raise ParseError(f"duplicated vector ids: {detail}")
    out = []
    dropped = []
    for lineno, vid, score, cls in parsed:
        if known_ids is not None and vid not in known_ids:
            dropped.append(lineno)
            continue
        out.append(LabeledScore(score, cls, vid))
    if dropped:
        warnings.warn(f"rejected rows with unknown vector ids: {dropped}", stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# Model ladder
# ---------------------------------------------------------------------------


@dataclass
class LadderConfig:
    models: tuple = MODEL_TAGS + ("pc-ttest",)
    eigen_threshold: float = DEFAULT_EIGEN_THRESHOLD
    validation_fraction: float = 0.2
    cubic: cubic_mod.CubicConfig = field(default_factory=cubic_mod.CubicConfig)
    grbm: grbm_mod.GrbmConfig = field(default_factory=grbm_mod.GrbmConfig)
    seed: int = 0


@dataclass
class LadderResult:
    curves: dict
    scores: dict
    models: dict
    traces: dict

    def table(self):
        """``(tag, auroc, max_accuracy)`` rows, best first."""
        rows = [(k, c.auroc, c.max_accuracy) for k, c in self.curves.items()]
        return sorted(rows, key=lambda r: -r[1])


def _validation_split(Z, fraction, rng):
    perm = rng.permutation(len(Z))
    n_val = max(1, int(round(fraction * len(Z))))
    return Z[perm[n_val:]], Z[perm[:n_val]]


def run_ladder(train: Dataset, test: Dataset, config: LadderConfig | None = None, external=None):
    """Fit every requested model per class, score the test set, build ROC curves.

    Gaussian variants use bare moments of each class; the nonlinear models
    share one preprocessor fitted on the pooled training data so their
    scores are comparable.
    """
    cfg = config or LadderConfig()
    per_class = {c: train.by_label(c) for c in CLASSES}
    curves, scores, models, traces = {}, {}, {}, {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pooled_stats = compute_bare_moments(train, n_bootstrap=0)
        constraints = detect_null_modes(pooled_stats, cfg.eigen_threshold)
        stats = {c: compute_bare_moments(per_class[c], n_bootstrap=0) for c in CLASSES}

    for tag in cfg.models:
        if tag in GAUSSIAN_VARIANT:
            pair = tuple(gaussian_mod.fit_variant(stats[c], constraints, GAUSSIAN_VARIANT[tag]) for c in CLASSES)
            models[tag] = pair
            scores[tag] = score_vectors(*pair, test, on_violation="project")

    nonlinear = [t for t in cfg.models if t in ("maxent3", "grbm")]
    if nonlinear:
        pre = Preprocessor.fit(train, constraints)
        rngs = dict(zip(CLASSES, spawn_generators((cfg.seed, 7), 2)))
        parts = {c: _validation_split(pre.transform(per_class[c]), cfg.validation_fraction, rngs[c]) for c in CLASSES}
        for tag in nonlinear:
            pair, tr = [], []
            for c in CLASSES:
                fit_tr, fit_val = parts[c]
                if tag == "maxent3":
                    m, t = cubic_mod.fit_cubic(fit_tr, fit_val, cfg.cubic, preprocessor=pre)
                    tr.append(t.to_dict())
                else:
                    m, t = grbm_mod.train_pcd(fit_tr, fit_val, cfg.grbm, preprocessor=pre)
                    tr.append(t.to_dict())
                pair.append(m)
            models[tag] = tuple(pair)
            traces[tag] = dict(zip(CLASSES, tr))
            scores[tag] = score_vectors(*pair, test)

    if "pc-ttest" in cfg.models:
        scores["pc-ttest"], _ = pc_ttest_baseline(per_class["A"], per_class["B"], test)
    if external:
        for tag, ext in external.items():
            scores[tag] = ext

    for tag, s in scores.items():
        curves[tag] = roc(s)
    return LadderResult(curves, scores, models, traces)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def report_dict(curves, provenance=None):
    out = {tag: c.to_dict() for tag, c in sorted(curves.items(), key=lambda kv: -kv[1].auroc)}
    if provenance is not None:
        out = {"provenance": provenance, "models": out}
    return out


def write_report(path, curves, provenance=None):
    with Path(path).open("w") as fh:
        json.dump(report_dict(curves, provenance), fh, indent=2)


def write_curve_csv(path, curves, provenance=None):
    with Path(path).open("w", newline="") as fh:
        if provenance is not None:
            fh.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["model", "fpr", "tpr", "threshold"])
        for tag, c in sorted(curves.items(), key=lambda kv: -kv[1].auroc):
            for (x, y), t in zip(c.points, c.thresholds):
                w.writerow([tag, repr(float(x)), repr(float(y)), repr(float(t))])


def write_roc_svg(path, curves, provenance=None):
    """Overlay of all ROC curves, legend ordered by auROC."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for tag, c in sorted(curves.items(), key=lambda kv: -kv[1].auroc):
        ax.plot(c.points[:, 0], c.points[:, 1], label=f"{tag} ({c.auroc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    meta = {"Description": json.dumps(provenance, sort_keys=True)} if provenance is not None else None
    fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)
