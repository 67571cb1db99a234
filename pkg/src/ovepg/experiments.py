"""Experiment configuration, orchestration and result files."""

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import __version__
from .data import (
    IRIS_SIZES,
    EpisodeTask,
    iris_splits,
    load_csv,
    load_iris_2d,
    stratified_split,
)
from .errors import InvalidArgument, OvePGError
from .inference import GibbsConfig, elliptical_slice, posterior_samples, run_gibbs_with
from .kernels import AffineMap, KernelSpec, build_block_kernel, prior_mean
from .learning import TrainConfig, train_loop
from .likelihoods import LIKELIHOODS, OveTransform, log_lik_data, log_lik_table
from .metrics import calibration, confidence_histogram, elbo, moment_match
from .predictive import (
    QueryKernelBlocks,
    plug_in_predict,
    predict_proba,
    predictive_mean_from_samples,
)
from .rng import path_generator

EXPERIMENTS = ("iris-sweep", "conf-hist", "likelihood-grid", "fit", "predict", "validate")
IRIS_LIKELIHOODS = ("gaussian", "lsm", "ove")


@dataclass
class ExperimentConfig:
    """Everything one run needs; serialized verbatim into its report."""

    kind: str
    out: str = "results"
    seed: int = 0
    kernel: dict = field(default_factory=lambda: {"kind": "raw_rbf"})
    chains: int = 20
    gibbs_steps: int = 50
    burn_fraction: float = 0.5
    jitter: float = 1e-6
    workers: int = 1
    # iris-sweep
    data: Optional[str] = None
    per_class: List[int] = field(default_factory=lambda: list(IRIS_SIZES))
    repeats: int = 200
    likelihoods: List[str] = field(default_factory=lambda: list(IRIS_LIKELIHOODS))
    ess_iterations: int = 4000
    elbo_samples: int = 500
    bins: int = 10
    # conf-hist
    classes: int = 5
    sims: int = 50_000
    hist_bins: int = 50
    # likelihood-grid
    grid_lo: float = -4.0
    grid_hi: float = 4.0
    grid_points: int = 81
    # fit / predict
    query: Optional[str] = None
    model: Optional[str] = None
    feature_map: Optional[str] = None
    objective: str = "ML"
    epochs: int = 0
    episodes_per_epoch: int = 10
    support_per_class: int = 5
    lr: float = 1e-3
    nodes: int = 64

    def __post_init__(self):
        if self.kind not in EXPERIMENTS:
            raise InvalidArgument(f"unknown experiment {self.kind!r}; expected one of {EXPERIMENTS}")
        for name in ("chains", "gibbs_steps", "repeats", "sims", "grid_points", "bins", "hist_bins"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        unknown = set(self.likelihoods) - set(LIKELIHOODS)
        if unknown:
            raise InvalidArgument(f"unknown likelihoods {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidArgument(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def validate_files(self):
        for name in ("data", "query", "model", "feature_map"):
            path = getattr(self, name)
            if path is not None and not os.path.exists(path):
                raise InvalidArgument(f"{name} file {path!r} does not exist")
        if self.kind == "fit" and self.data is None:
            raise InvalidArgument("fit needs a training data file")
        if self.kind == "predict" and (self.model is None or self.query is None):
            raise InvalidArgument("predict needs a model file and a query data file")

    def kernel_spec(self):
        fmap = AffineMap.from_csv(self.feature_map) if self.feature_map else None
        return KernelSpec(feature_map=fmap, **self.kernel)

    def gibbs(self, master_seed):
        return GibbsConfig(self.chains, self.gibbs_steps, int(master_seed))


def derive_seed(seed, *path):
    """A 63-bit integer seed for the stream ``path`` under ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# result files


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(header, rows))


def read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(cfg, metrics, files, notes=None):
    out = {
        "experiment": cfg.kind,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": f"ovepg-{__version__}",
        "metrics": metrics,
        "files": sorted(files),
    }
    if notes:
        out["notes"] = notes
    return out


def _finish(cfg, metrics, tables, notes=None):
    """Write every CSV table plus ``report.json`` into ``cfg.out``."""
    os.makedirs(cfg.out, exist_ok=True)
    names = []
    for name, (header, rows) in sorted(tables.items()):
        write_csv(os.path.join(cfg.out, name), header, rows)
        names.append(name)
    rep = report(cfg, metrics, names, notes)
    write_json(os.path.join(cfg.out, "report.json"), rep)
    return rep


# --------------------------------------------------------------------------
# Iris


def gaussian_posterior(Kb, Y, mean_const=0.0):
    """Exact posterior of unit-noise regression onto targets 2 Y - 1, per class.

    Returns ``(alpha, mean, cov_block)`` where ``alpha`` is (N, C) with
    mean = m + K alpha and each class has covariance ``K - K (K + I)^-1 K``.
    """
    N = Kb.shape[0]
    fac = cho_factor(Kb + np.eye(N), lower=True)
    targets = 2.0 * np.asarray(Y, dtype=float) - 1.0
    alpha = cho_solve(fac, targets - mean_const)
    cov = Kb - Kb @ cho_solve(fac, Kb)
    return alpha, (Kb @ alpha).T.ravel() + mean_const, 0.5 * (cov + cov.T)


def iris_split_rows(cfg, per_class, repeat, task: EpisodeTask):
    """Accuracy, Brier, ECE and ELBO for each likelihood on one split."""
    spec = cfg.kernel_spec()
    S, Q = task.support, task.query
    C, N = S.C, S.N
    K = build_block_kernel(spec, S.X, C, jitter=cfg.jitter)
    mu = prior_mean(spec, N, C)
    blocks = QueryKernelBlocks.build(spec, S.X, Q.X)
    rows = []
    for li, lik in enumerate(sorted(cfg.likelihoods)):
        if lik == "ove":
            gibbs = cfg.gibbs(derive_seed(cfg.seed, per_class, repeat, li))
            traces = run_gibbs_with(K, mu, OveTransform(S.labels, C), gibbs)
            samples = posterior_samples(traces, cfg.burn_fraction)
        elif lik == "gaussian":
            samples = None
        else:
            def log_lik(f, lik=lik):
                return log_lik_data(lik, f.reshape(C, N).T, S.labels)

            chain = elliptical_slice(log_lik, K, mu, cfg.ess_iterations, path_generator(cfg.seed, per_class, repeat, li, 0))
            samples = chain[int(math.floor(cfg.burn_fraction * chain.shape[0])) :]
        if samples is None:
            alpha, q_mean, cov_block = gaussian_posterior(K.base, S.Y, spec.mean_const)
            f_bar = blocks.cross.T @ alpha + spec.mean_const
            q_cov = np.kron(np.eye(C), cov_block)
        else:
            f_bar = predictive_mean_from_samples(K, blocks, samples, spec.mean_const)
            q_mean, q_cov = moment_match(samples)
        probs = plug_in_predict(f_bar, lik)
        rep = calibration(probs, Q.labels, bins=cfg.bins)
        value = elbo(q_mean, q_cov, mu, K, S.labels, cfg.elbo_samples, path_generator(cfg.seed, per_class, repeat, li, 1))
        rows.append((repeat, per_class, lik, rep.accuracy, rep.brier, rep.ece, value))
    return rows


def _iris_job(args):
    cfg, per_class, repeat, task = args
    return iris_split_rows(cfg, per_class, repeat, task)


def _pool_map(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=1))


def summarize_iris(rows):
    """Mean and 95% normal-approximation half-width per (likelihood, per_class)."""
    out = []
    keys = sorted({(r[2], r[1]) for r in rows})
    for lik, pc in keys:
        sel = np.array([r[3:] for r in rows if r[2] == lik and r[1] == pc], dtype=float)
        mean = sel.mean(axis=0)
        half = 1.96 * sel.std(axis=0, ddof=1) / math.sqrt(len(sel)) if len(sel) > 1 else np.zeros(4)
        out.append((lik, pc, len(sel)) + tuple(mean) + tuple(half))
    return out


IRIS_ROW_HEADER = ["repeat", "per_class", "likelihood", "accuracy", "brier", "ece", "elbo"]
IRIS_SUMMARY_HEADER = [
    "likelihood", "per_class", "n",
    "accuracy", "brier", "ece", "elbo",
    "accuracy_ci", "brier_ci", "ece_ci", "elbo_ci",
]


def run_iris_sweep(cfg):
    data = load_iris_2d(cfg.data)
    jobs = []
    for pc in cfg.per_class:
        for r, task in enumerate(iris_splits(data, pc, cfg.repeats, cfg.seed)):
            jobs.append((cfg, pc, r, task))
    rows = [row for chunk in _pool_map(_iris_job, jobs, cfg.workers) for row in chunk]
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    summary = summarize_iris(rows)
    metrics = {
        f"{s[0]}/{s[1]}": dict(zip(IRIS_SUMMARY_HEADER[2:], s[2:])) for s in summary
    }
    notes = {"test_set": "remainder of each class after drawing the support set"}
    return _finish(
        cfg,
        metrics,
        {"iris_rows.csv": (IRIS_ROW_HEADER, rows), "iris_summary.csv": (IRIS_SUMMARY_HEADER, summary)},
        notes,
    )


# --------------------------------------------------------------------------
# prior confidence and likelihood grids


def run_conf_hist(cfg):
    records, hist, metrics = [], [], {}
    for li, lik in enumerate(sorted(cfg.likelihoods)):
        res = confidence_histogram(lik, cfg.classes, cfg.sims, path_generator(cfg.seed, li), bins=cfg.hist_bins)
        records.extend((lik, i, c) for i, c in enumerate(res["confidences"]))
        edges = res["edges"]
        hist.extend((lik, edges[b], edges[b + 1], int(res["counts"][b])) for b in range(len(res["counts"])))
        metrics[lik] = {k: v for k, v in res.items() if k not in ("confidences", "edges", "counts")}
    return _finish(
        cfg,
        metrics,
        {
            "confidences.csv": (["likelihood", "sim", "max_confidence"], records),
            "histogram.csv": (["likelihood", "bin_left", "bin_right", "count"], hist),
        },
    )


def likelihood_grid(lik, lo, hi, points):
    """L(f | y = first class) and its grid-normalized posterior over (f1, f2), f3 = 0.

    The prior is standard normal on f1 and f2. Returns ``(axis, lik, post)``
    with the two value grids indexed ``[i1, i2]``.
    """
    axis = np.linspace(lo, hi, points)
    F1, F2 = np.meshgrid(axis, axis, indexing="ij")
    F = np.stack([F1, F2, np.zeros_like(F1)], axis=-1)
    L = np.exp(log_lik_table(lik, F)[..., 0])
    prior = np.exp(-0.5 * (F1**2 + F2**2)) / (2.0 * math.pi)
    unnorm = L * prior
    cell = (axis[1] - axis[0]) ** 2 if points > 1 else 1.0
    return axis, L, unnorm / (unnorm.sum() * cell)


def run_likelihood_grid(cfg):
    rows, metrics = [], {}
    for lik in sorted(cfg.likelihoods):
        axis, L, post = likelihood_grid(lik, cfg.grid_lo, cfg.grid_hi, cfg.grid_points)
        for i, a in enumerate(axis):
            for j, b in enumerate(axis):
                rows.append((lik, a, b, L[i, j], post[i, j]))
        k = np.unravel_index(np.argmax(post), post.shape)
        metrics[lik] = {
            "value_at_origin": float(np.exp(log_lik_table(lik, np.zeros(3))[0])),
            "posterior_mode": [float(axis[k[0]]), float(axis[k[1]])],
        }
    return _finish(cfg, metrics, {"grid.csv": (["likelihood", "f1", "f2", "likelihood_value", "posterior_density"], rows)})


# --------------------------------------------------------------------------
# generic fit / predict on CSV data


def _episode_source(data, per_class, seed):
    def source(k):
        return stratified_split(data, per_class, path_generator(seed, k))

    return source


def run_fit(cfg):
    data = load_csv(cfg.data)
    spec = cfg.kernel_spec()
    history, skipped = [], []
    if cfg.epochs > 0:
        counts = np.bincount(data.labels, minlength=data.C)
        per_class = min(cfg.support_per_class, int(counts.min()) - 1)
        if per_class < 1:
            raise InvalidArgument("every class needs at least two examples to form training episodes")
        tcfg = TrainConfig(
            objective=cfg.objective,
            epochs=cfg.epochs,
            episodes_per_epoch=cfg.episodes_per_epoch,
            gibbs=GibbsConfig(cfg.chains, cfg.gibbs_steps),
            lr=cfg.lr,
            seed=cfg.seed,
            jitter=cfg.jitter,
        )
        os.makedirs(cfg.out, exist_ok=True)
        result = train_loop(_episode_source(data, per_class, cfg.seed), spec, tcfg)
        spec, history, skipped = result.spec, result.history, result.skipped
    model = {
        "kernel": spec.to_dict(),
        "feature_map": cfg.feature_map,
        "support": os.path.abspath(cfg.data),
        "class_names": data.class_names,
    }
    os.makedirs(cfg.out, exist_ok=True)
    write_json(os.path.join(cfg.out, "model.json"), model)
    hist_rows = [(h["epoch"], h["objective"], json.dumps(h["params"], sort_keys=True)) for h in history]
    metrics = {"epochs": len(history), "skipped_episodes": skipped, "kernel": spec.to_dict()}
    return _finish(cfg, metrics, {"history.csv": (["epoch", "objective", "params"], hist_rows)})


def load_model(path):
    with open(path) as fh:
        model = json.load(fh)
    kern = dict(model["kernel"])
    fmap = AffineMap.from_csv(model["feature_map"]) if model.get("feature_map") else None
    return KernelSpec(feature_map=fmap, **kern), model


def run_predict(cfg):
    spec, model = load_model(cfg.model)
    support = load_csv(model["support"], class_names=model["class_names"])
    query = _load_query(cfg.query, model["class_names"], support.X.shape[1])
    C = support.C
    K = build_block_kernel(spec, support.X, C, jitter=cfg.jitter)
    A = OveTransform(support.labels, C)
    traces = run_gibbs_with(K, prior_mean(spec, support.N, C), A, cfg.gibbs(derive_seed(cfg.seed, 0)))
    blocks = QueryKernelBlocks.build(spec, support.X, query[0])
    probs = predict_proba(K, blocks, A, [t.final_omega for t in traces], spec.mean_const, cfg.nodes)
    names = model["class_names"]
    rows = [(q,) + tuple(p) + (names[int(np.argmax(p))],) for q, p in enumerate(probs)]
    metrics = {"queries": len(rows)}
    if query[1] is not None:
        metrics["calibration"] = calibration(probs, query[1], bins=cfg.bins).to_dict()
    return _finish(cfg, metrics, {"predictions.csv": (["query"] + [f"p_{n}" for n in names] + ["predicted"], rows)})


def _load_query(path, class_names, dim):
    """Query features, with labels when the file has a label column."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if len(header) == dim + 1:
        q = load_csv(path, class_names=class_names)
        return q.X, q.labels
    if len(header) != dim:
        raise InvalidArgument(f"query file has {len(header)} columns; expected {dim} or {dim + 1}")
    X = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return X, None


# --------------------------------------------------------------------------


def run_validate(cfg):
    from .validation import run_oracle_suite

    checks = run_oracle_suite(cfg.seed)
    rows = [(c["name"], c["value"], c["reference"], c["tolerance"], int(c["passed"])) for c in checks]
    metrics = {
        "passed": sum(c["passed"] for c in checks),
        "total": len(checks),
        "failed": [c["name"] for c in checks if not c["passed"]],
    }
    return _finish(cfg, metrics, {"checks.csv": (["check", "value", "reference", "tolerance", "passed"], rows)})


_DISPATCH = {
    "iris-sweep": run_iris_sweep,
    "conf-hist": run_conf_hist,
    "likelihood-grid": run_likelihood_grid,
    "fit": run_fit,
    "predict": run_predict,
    "validate": run_validate,
}


class ExperimentError(OvePGError):
    def __init__(self, kind, cause):
        super().__init__(f"{kind} failed: {cause}")
        self.kind = kind
        self.cause = cause


def run_experiment(cfg: ExperimentConfig):
    """Dispatch on ``cfg.kind``; returns the report dict also written to ``report.json``."""
    cfg.validate_files()
    try:
        return _DISPATCH[cfg.kind](cfg)
    except (OvePGError, np.linalg.LinAlgError, OSError) as exc:
        raise ExperimentError(cfg.kind, exc) from exc
