"""Calibration metrics, ELBO, prior-confidence simulation and AUROC."""

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgument
from .likelihoods import log_lik_data, normalized_probs
from .rng import as_generator

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PredictionRecord:
    probs: np.ndarray
    true_class: int
    max_logit: Optional[float] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if abs(self.probs.sum() - 1.0) > 1e-8:
            raise InvalidArgument("probabilities must sum to 1")


@dataclass
class CalibrationReport:
    accuracy: float
    ece: float
    mce: float
    brier: float
    n_bins: int
    bins: List[dict] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _as_arrays(records_or_probs, labels=None):
    if labels is None:
        recs = list(records_or_probs)
        if not recs:
            raise InvalidArgument("calibration needs at least one record")
        probs = np.array([r.probs for r in recs])
        labels = np.array([r.true_class for r in recs])
    else:
        probs = np.atleast_2d(np.asarray(records_or_probs, dtype=float))
        labels = np.asarray(labels, dtype=int)
    if probs.shape[0] == 0:
        raise InvalidArgument("calibration needs at least one record")
    if probs.shape[0] != labels.shape[0]:
        raise InvalidArgument("probabilities and labels differ in length")
    return probs, labels


def calibration(records, labels=None, bins=10):
    """Accuracy, ECE, MCE and Brier score.

    Confidence is the maximum class probability. Bins are equal-width and
    right-closed on (0, 1]. Either pass ``PredictionRecord`` objects, or an
    (n, C) probability array together with ``labels``.
    """
    if bins < 1:
        raise InvalidArgument("need at least one bin")
    probs, labels = _as_arrays(records, labels)
    n, C = probs.shape
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(float)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    # exactly rounded sums keep every metric independent of record order
    brier = math.fsum(np.sum((probs - onehot) ** 2, axis=1)) / n

    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    ece, mce, table = 0.0, 0.0, []
    for b in range(bins):
        members = idx == b
        count = int(members.sum())
        if count == 0:
            table.append({"lower": edges[b], "upper": edges[b + 1], "confidence": None, "accuracy": None, "count": 0})
            continue
        cb = math.fsum(conf[members]) / count
        ab = math.fsum(correct[members]) / count
        gap = abs(cb - ab)
        ece += count / n * gap
        mce = max(mce, gap)
        table.append({"lower": edges[b], "upper": edges[b + 1], "confidence": cb, "accuracy": ab, "count": count})
    return CalibrationReport(math.fsum(correct) / n, float(ece), float(mce), brier, bins, table)


# --------------------------------------------------------------------------
# ELBO


def _cov_ops(cov):
    """Return (solve, logdet, dense) for a dense SPD matrix or a BlockKernelMatrix."""
    if hasattr(cov, "solve") and hasattr(cov, "logdet"):
        return cov.solve, cov.logdet(), cov.dense
    cov = np.asarray(cov, dtype=float)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise InvalidArgument("covariance is not positive definite") from None
    from scipy.linalg import cho_solve

    return (lambda v: cho_solve((L, True), v)), 2.0 * float(np.sum(np.log(np.diag(L)))), (lambda: cov)


def gaussian_cross_entropy(q_mean, q_cov, p_mean, p_cov):
    """E_q[log p(f)] for Gaussians q and p."""
    q_cov = np.asarray(q_cov, dtype=float)
    solve, logdet, _ = _cov_ops(p_cov)
    diff = np.asarray(q_mean, dtype=float) - np.asarray(p_mean, dtype=float)
    trace = float(np.trace(solve(q_cov)))
    maha = float(diff @ solve(diff))
    return -0.5 * (diff.size * _LOG_2PI + logdet + trace + maha)


def gaussian_entropy(cov):
    _, logdet, _ = _cov_ops(cov)
    d = np.asarray(cov).shape[0] if not hasattr(cov, "dense") else cov.C * cov.N
    return 0.5 * (d * (1.0 + _LOG_2PI) + logdet)


def elbo(q_mean, q_cov, prior_mean, prior_cov, labels, mc_samples, rng, lik="softmax", C=None):
    """E_q[log p(f|X)] + E_q[log p(Y|f)] - E_q[log q] with a softmax (default) likelihood.

    The two Gaussian terms are closed-form; the likelihood term is averaged over
    ``mc_samples`` draws from q. ``lik`` may also be a callable mapping an
    (N, C) logit matrix to a total log-likelihood.
    """
    gen = as_generator(rng)
    q_mean = np.asarray(q_mean, dtype=float)
    q_cov = np.asarray(q_cov, dtype=float)
    try:
        Lq = np.linalg.cholesky(q_cov)
    except np.linalg.LinAlgError:
        raise InvalidArgument("q covariance is not positive definite") from None
    labels = np.asarray(labels, dtype=int)
    N = labels.size
    C = C if C is not None else q_mean.size // N
    draws = q_mean + gen.standard_normal((mc_samples, q_mean.size)) @ Lq.T
    if callable(lik):
        ll = np.mean([lik(d.reshape(C, N).T) for d in draws])
    else:
        ll = np.mean([log_lik_data(lik, d.reshape(C, N).T, labels) for d in draws])
    return gaussian_cross_entropy(q_mean, q_cov, prior_mean, prior_cov) + float(ll) + gaussian_entropy(q_cov)


def moment_match(samples, reg=1e-8):
    """Empirical mean and covariance of posterior samples, plus ``reg * I``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = samples.shape
    if n < d + 1:
        raise InvalidArgument(f"need at least {d + 1} samples for a {d}-dimensional covariance, got {n}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    return mean, 0.5 * (cov + cov.T) + reg * np.eye(d)


# --------------------------------------------------------------------------


def confidence_histogram(lik_kind, C, sims, rng, bins=50):
    """Max normalized class probability for logits drawn i.i.d. N(0, 1).

    Returns a dict with the per-simulation confidences, a ``bins``-bin
    histogram on [0, 1] and bin-free summaries.
    """
    if sims < 1:
        raise InvalidArgument("sims must be >= 1")
    gen = as_generator(rng)
    F = gen.standard_normal((sims, C))
    conf = normalized_probs(lik_kind, F).max(axis=1)
    counts, edges = np.histogram(conf, bins=bins, range=(0.0, 1.0))
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    return {
        "likelihood": lik_kind,
        "C": C,
        "sims": sims,
        "confidences": conf,
        "edges": edges,
        "counts": counts,
        "mean": float(conf.mean()),
        "quantiles": dict(zip(map(str, qs), map(float, np.quantile(conf, qs)))),
        "frac_above_0.4": float(np.mean(conf > 0.4)),
        "frac_above_0.45": float(np.mean(conf > 0.45)),
        "frac_above_0.9": float(np.mean(conf > 0.9)),
    }


def auroc(scores, labels):
    """Area under the ROC curve via midranks; ``labels`` are 1 for positives."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgument("AUROC needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def out_of_episode_scores(logits):
    """Negative maximum logit; higher means more likely out-of-episode."""
    return -np.max(np.asarray(logits, dtype=float), axis=-1)
