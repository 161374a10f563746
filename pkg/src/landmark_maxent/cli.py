"""Command-line entry point: ``landmark-maxent <command> [options]``.

Every command reads a :class:`RunConfig` assembled from an optional JSON file
(``--config``) overridden by flags, and writes the full config plus seed into
each artifact it produces.  Exit codes: 0 success, 2 bad input, 3 unmet
precondition, 4 numerical failure, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import classify as cl
from . import cubic as cubic_mod
from . import dataset as ds
from . import gaussian as gaussian_mod
from . import geometry as geo
from . import grbm as grbm_mod
from . import kernels, synth
from .errors import InputError, LandmarkMaxentError, NumericalError, PreconditionError, SchemaError

log = logging.getLogger("landmark_maxent")

COMMANDS = ("stats", "fit", "sample", "classify", "analyze", "synth", "report")
SYNTH_KINDS = ("gaussian", "isotropic", "mean", "pairwise", "third-order")

EXIT_OK, EXIT_OTHER, EXIT_INPUT, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 1, 2, 3, 4


@dataclass
class RunConfig:
    """Everything that determines a command's output."""

    command: str = "stats"
    input: str | None = None
    output_dir: str = "."
    model: str = "maxent2"
    flavor: str = "bare"
    train_fraction: float = 0.2
    seed: int = 0
    eigen_threshold: float = ds.DEFAULT_EIGEN_THRESHOLD
    angle_mode: str = "arctan"
    import_scores: str | None = None
    n_bootstrap: int = ds.DEFAULT_BOOTSTRAP
    n_samples: int = 1000
    angle_bins: int = 24
    validation_fraction: float = 0.2
    ladder: list = field(default_factory=lambda: list(cl.MODEL_TAGS) + ["pc-ttest"])
    synth_kind: str = "gaussian"
    synth_rank: int = 10
    synth_magnitude: float = 0.3
    n_subjects: int = 95
    n_per_subject: int = 28
    offset_scale: float = 0.0
    cubic: dict = field(default_factory=dict)
    grbm: dict = field(default_factory=dict)

    def __post_init__(self):
        checks = {
            "command": (self.command, COMMANDS),
            "model": (self.model, cl.MODEL_TAGS),
            "flavor": (self.flavor, ("bare", "intersubject")),
            "angle_mode": (self.angle_mode, ("arctan", "atan2")),
            "synth_kind": (self.synth_kind, SYNTH_KINDS),
        }
        for name, (value, allowed) in checks.items():
            if value not in allowed:
                raise SchemaError(f"{name} must be one of {list(allowed)}, got {value!r}")
        if not 0 < self.train_fraction < 1:
            raise SchemaError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        unknown = [t for t in self.ladder if t not in cl.MODEL_TAGS + ("pc-ttest",)]
        if unknown:
            raise SchemaError(f"unknown ladder models {unknown}")
        _check_keys("cubic", self.cubic, cubic_mod.CubicConfig)
        _check_keys("grbm", self.grbm, grbm_mod.GrbmConfig)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise SchemaError(f"unknown config keys: {extra}")
        return cls(**d)

    def cubic_config(self):
        return cubic_mod.CubicConfig(**{"seed": self.seed, **self.cubic})

    def grbm_config(self):
        return grbm_mod.GrbmConfig(**{"seed": self.seed, **self.grbm})

    def provenance(self):
        """Config, seed and environment; ``timestamp`` is the only volatile field."""
        from . import __version__

        return {
            "config": asdict(self),
            "seed": self.seed,
            "package_version": __version__,
            "backend": kernels.BACKEND,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        }


def _check_keys(name, d, klass):
    if not isinstance(d, dict):
        raise SchemaError(f"{name} must be a JSON object")
    extra = sorted(set(d) - {f.name for f in dataclasses.fields(klass)})
    if extra:
        raise SchemaError(f"unknown {name} config keys: {extra}")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _out(cfg, name):
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _write_json(path, payload, provenance):
    with Path(path).open("w") as fh:
        json.dump(_jsonable({"provenance": provenance, **payload}), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _need_input(cfg):
    if not cfg.input:
        raise InputError(f"{cfg.command} needs --input")
    p = Path(cfg.input)
    if not p.exists():
        raise InputError(f"{p} does not exist")
    return p


def _load_data(cfg):
    data = ds.load_dataset(_need_input(cfg))
    if len(data) == 0:
        raise PreconditionError(f"{cfg.input} contains no vectors")
    return data


def _moments(cfg, data, order=2):
    if cfg.flavor == "intersubject":
        return ds.compute_intersubject_moments(data, cfg.n_bootstrap, cfg.seed, order=order)
    return ds.compute_bare_moments(data, order=order, n_bootstrap=cfg.n_bootstrap, seed=cfg.seed)


def _load_model(path):
    d = json.loads(Path(path).read_text())
    d = d.get("model", d)
    family = d.get("family")
    if family == "gaussian":
        return gaussian_mod.GaussianModel.from_dict(d)
    if family == "cubic":
        return cubic_mod.CubicModel.from_dict(d)
    if family == "grbm":
        return grbm_mod.GrbmModel.from_dict(d)
    raise SchemaError(f"{path}: unknown model family {family!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_stats(cfg: RunConfig):
    """Bare and inter-subject moments with the null-mode report."""
    data = _load_data(cfg)
    bare = ds.compute_bare_moments(data, n_bootstrap=cfg.n_bootstrap, seed=cfg.seed)
    payload = {"bare": bare.to_dict()}
    chosen = bare
    if data.n_subjects >= 2 and len(data) > data.n_subjects:
        inter = ds.compute_intersubject_moments(data, cfg.n_bootstrap, cfg.seed)
        payload["intersubject"] = inter.to_dict()
        if cfg.flavor == "intersubject":
            chosen = inter
    cs = ds.detect_null_modes(chosen, cfg.eigen_threshold)
    payload["constraints"] = {"r": cs.rank, "m": cs.n_null, **cs.to_dict()}
    return [_write_json(_out(cfg, "stats.json"), payload, cfg.provenance())]


def _split_for_monitoring(Z, fraction, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(Z))
    n_val = max(1, int(round(fraction * len(Z))))
    return Z[perm[n_val:]], Z[perm[:n_val]]


def cmd_fit(cfg: RunConfig):
    """Fit one model to the whole input; nonlinear fits also emit their trace."""
    data = _load_data(cfg)
    prov = cfg.provenance()
    if cfg.model in cl.GAUSSIAN_VARIANT:
        stats = _moments(cfg, data)
        cs = ds.detect_null_modes(stats, cfg.eigen_threshold)
        model = gaussian_mod.fit_variant(stats, cs, cl.GAUSSIAN_VARIANT[cfg.model])
        return [_write_json(_out(cfg, "model.json"), {"model": model.to_dict()}, prov)]

    stats = ds.compute_bare_moments(data, n_bootstrap=0)
    cs = ds.detect_null_modes(stats, cfg.eigen_threshold)
    pre = ds.Preprocessor.fit(data, cs)
    train, test = _split_for_monitoring(pre.transform(data), cfg.validation_fraction, cfg.seed)
    try:
        if cfg.model == "maxent3":
            model, trace = cubic_mod.fit_cubic(train, test, cfg.cubic_config(), preprocessor=pre)
        else:
            model, trace = grbm_mod.train_pcd(train, test, cfg.grbm_config(), preprocessor=pre)
    except NumericalError as exc:
        trace = getattr(exc, "trace", None)
        if trace is not None:
            _write_json(_out(cfg, "trace.json"), {"trace": trace.to_dict()}, prov)
        raise
    return [
        _write_json(_out(cfg, "model.json"), {"model": model.to_dict()}, prov),
        _write_json(_out(cfg, "trace.json"), {"trace": trace.to_dict()}, prov),
    ]


def cmd_sample(cfg: RunConfig):
    """Draw ``n_samples`` full-coordinate vectors from a stored model."""
    model = _load_model(_need_input(cfg))
    n = cfg.n_samples
    if n < 0:
        raise SchemaError("n_samples must be non-negative")
    if isinstance(model, gaussian_mod.GaussianModel):
        out = gaussian_mod.sample_gaussian(model, n, cfg.seed)
    elif n == 0:
        D = model.preprocessor.embedding.retained_basis.shape[1] if model.preprocessor else ds.DIM
        out = ds.Dataset(np.zeros((0, D)))
    else:
        if model.preprocessor is None:
            raise PreconditionError("model carries no preprocessor; cannot emit full vectors")
        if isinstance(model, cubic_mod.CubicModel):
            cc = cfg.cubic_config()
            n_chains = max(1, min(cc.n_chains, n))
            per_chain = -(-n // n_chains)
            res = cubic_mod.metropolis_sample(model, per_chain * cc.thin, cfg.seed, n_chains=n_chains,
                                              thin=cc.thin)
            Z = res.samples[:n]
        else:
            Z = grbm_mod.gibbs_sample(model, n_steps=200, n_chains=n, seed=cfg.seed)[-1]
        out = ds.Dataset(model.preprocessor.inverse_transform(Z))
    path = _out(cfg, "samples.csv")
    ds.write_dataset(path, out, cfg.provenance())
    return [path]


def _ladder_config(cfg):
    return cl.LadderConfig(models=tuple(cfg.ladder), eigen_threshold=cfg.eigen_threshold,
                           validation_fraction=cfg.validation_fraction, cubic=cfg.cubic_config(),
                           grbm=cfg.grbm_config(), seed=cfg.seed)


def _write_table(path, curves, provenance):
    with Path(path).open("w", newline="") as fh:
        fh.write("# provenance: " + json.dumps(_jsonable(provenance), sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["model", "auroc", "max_accuracy"])
        for tag, c in sorted(curves.items(), key=lambda kv: -kv[1].auroc):
            w.writerow([tag, repr(c.auroc), repr(c.max_accuracy)])


def cmd_classify(cfg: RunConfig):
    """Split each class at random, run the model ladder, emit table, curves and plot.

    Imported scores refer to vectors by their 0-based row in the input file.
    """
    data = _load_data(cfg)
    if data.labels is None:
        raise PreconditionError("classification needs a class column")
    row_ids = np.arange(len(data))
    train, test = cl.split(data, cfg.train_fraction, cfg.seed)
    external = None
    if cfg.import_scores:
        test_rows = set(_rows_of(data, test))
        external = {"imported": cl.import_external_scores(cfg.import_scores, known_ids=test_rows)}
    res = cl.run_ladder(train, test, _ladder_config(cfg), external)
    prov = cfg.provenance()
    report = cl.report_dict(res.curves, _jsonable(prov))
    report["traces"] = _jsonable(res.traces)
    report["split"] = {"n_train": len(train), "n_test": len(test), "n_rows": int(row_ids.size)}
    paths = [_out(cfg, n) for n in ("report.json", "curves.csv", "table.csv", "roc.svg")]
    with paths[0].open("w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
    cl.write_curve_csv(paths[1], res.curves, _jsonable(prov))
    _write_table(paths[2], res.curves, prov)
    cl.write_roc_svg(paths[3], res.curves, _jsonable(prov))
    return paths


def _rows_of(data, part):
    """Row numbers of ``part``'s vectors in ``data`` (matched by subject and index)."""
    key = {(int(s), int(w)): k for k, (s, w) in enumerate(zip(data.subjects, data.within))}
    return [key[(int(s), int(w))] for s, w in zip(part.subjects, part.within)]


def cmd_analyze(cfg: RunConfig):
    """Rotated couplings with t-values, trend table, angle statistics, C vs J."""
    data = _load_data(cfg)
    prov = cfg.provenance()
    stats = _moments(cfg, data)
    cs = ds.detect_null_modes(stats, cfg.eigen_threshold)
    model = gaussian_mod.fit_gaussian(stats, cs)
    positions = geo.positions_from(stats)
    sigma = None
    if cfg.n_bootstrap > 1 and not (cfg.flavor == "intersubject" and data.n_subjects < 2):
        sigma = geo.bootstrap_coupling_sigma(data, positions, cfg.n_bootstrap, cfg.seed, cfg.flavor,
                                             cfg.eigen_threshold)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = geo.longitudinal_torsion(stats, positions, cfg.eigen_threshold, sigma)
    trend = geo.trend_export(rep)
    angles = {}
    for k in range(data.n_landmarks):
        h = geo.angle_histogram(data, k, cfg.angle_bins, cfg.angle_mode)
        angles[str(k)] = {"edges": h.edges, "counts": h.counts, "uniform_p": geo.uniformity_test(h)}
    cvj = geo.compare_C_vs_J(stats, model)
    payload = {
        "constraints": {"r": cs.rank, "m": cs.n_null},
        "couplings": rep.to_dict(),
        "trend": trend.to_dict(),
        "angles": angles,
        "C_vs_J": cvj.to_dict(),
    }
    paths = [_write_json(_out(cfg, "analysis.json"), payload, prov)]
    trend_path = _out(cfg, "trend.csv")
    trend.write_csv(trend_path, _jsonable(prov))
    paths.append(trend_path)
    for name, A, t in (("longitudinal", rep.J_par, rep.t_par), ("torsion", rep.J_perp, rep.t_perp)):
        p = _out(cfg, f"{name}.svg")
        geo.write_arrow_diagram(p, positions, A, None if t is None else t > 1, name, _jsonable(prov))
        paths.append(p)
    return paths


def cmd_synth(cfg: RunConfig):
    """Planted-model dataset with its ground truth."""
    kw = dict(n_subjects=cfg.n_subjects, n_per_subject=cfg.n_per_subject)
    if cfg.synth_kind == "gaussian":
        planted = synth.random_gaussian_planted(cfg.synth_rank, cfg.seed, offset_scale=cfg.offset_scale, **kw)
        data = synth.generate(planted, cfg.seed)
    elif cfg.synth_kind == "isotropic":
        planted = synth.isotropic_model(**kw)
        data = synth.generate(planted, cfg.seed)
    else:
        a, b = synth.make_two_class(cfg.synth_kind, cfg.synth_magnitude, rank=cfg.synth_rank, seed=cfg.seed,
                                    offset_scale=cfg.offset_scale, **kw)
        planted = (a, b)
        data = synth.two_class_dataset(a, b, cfg.seed)
    prov = _jsonable(cfg.provenance())
    synth.write_planted(cfg.output_dir, data, planted, cfg.seed, prov)
    out = Path(cfg.output_dir)
    return [out / "data.csv", out / "manifest.json", out / "planted.json"]


def cmd_report(cfg: RunConfig):
    """Re-render table, curve CSV and ROC plot from a stored ``report.json``."""
    d = json.loads(_need_input(cfg).read_text())
    models = d.get("models")
    if not isinstance(models, dict) or not models:
        raise SchemaError(f"{cfg.input} holds no model curves")
    curves = {}
    for tag, c in models.items():
        try:
            curves[tag] = cl.RocCurve.from_dict(c)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"curve {tag!r}: {exc}") from None
    prov = cfg.provenance()
    prov["source"] = d.get("provenance")
    paths = [_out(cfg, n) for n in ("table.csv", "curves.csv", "roc.svg")]
    _write_table(paths[0], curves, prov)
    cl.write_curve_csv(paths[1], curves, _jsonable(prov))
    cl.write_roc_svg(paths[2], curves, _jsonable(prov))
    return paths


COMMAND_FUNCS = {
    "stats": cmd_stats,
    "fit": cmd_fit,
    "sample": cmd_sample,
    "classify": cmd_classify,
    "analyze": cmd_analyze,
    "synth": cmd_synth,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="landmark-maxent", description="Maximum-entropy models of landmark data.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON RunConfig; flags override its values")
    p.add_argument("--input")
    p.add_argument("--output-dir")
    p.add_argument("--model", choices=cl.MODEL_TAGS)
    p.add_argument("--flavor", choices=("bare", "intersubject"))
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eigen-threshold", type=float)
    p.add_argument("--angle-mode", choices=("arctan", "atan2"))
    p.add_argument("--import-scores")
    p.add_argument("--n-bootstrap", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--synth-kind", choices=SYNTH_KINDS)
    p.add_argument("--synth-rank", type=int)
    p.add_argument("--synth-magnitude", type=float)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--n-per-subject", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args):
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise SchemaError("config file must hold a JSON object")
        base = base.get("config", base) if "provenance" not in base else base["provenance"]["config"]
    overrides = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "verbose")}
    return RunConfig.from_dict({**base, **overrides})


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = config_from_args(args)
        paths = COMMAND_FUNCS[cfg.command](cfg)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LandmarkMaxentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    for p in paths:
        log.info("wrote %s", p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
