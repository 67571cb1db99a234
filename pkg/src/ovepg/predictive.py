"""Posterior predictive distribution at query points."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NumericalBreakdown
from .inference import KAPPA, EfficientSamplerWorkspace
from .kernels import eval_kernel, kernel_diag
from .likelihoods import log_lik_table, normalized_probs, sigmoid
from .rng import as_generator

_CLAMP_TOL = 1e-10


@dataclass
class PredictiveGaussian:
    mean: np.ndarray  # (C,)
    cov: np.ndarray  # (C, C)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        cov = 0.5 * (cov + cov.T)
        d = np.diag(cov)
        if np.any(d < -_CLAMP_TOL):
            raise NumericalBreakdown(f"predictive variance {d.min():.3g} below clamp tolerance")
        if np.any(d < 0):
            cov = cov.copy()
            np.fill_diagonal(cov, np.maximum(d, 0.0))
        self.cov = cov


@dataclass
class QueryKernelBlocks:
    """k(X, x*) columns and k(x*, x*) values for a batch of queries.

    ``cross`` is (N, Q); the NC x C block-diagonal K* of query q has
    ``cross[:, q]`` in each of its C diagonal blocks, and K** is
    ``diag[q] * I_C``.
    """

    cross: np.ndarray
    diag: np.ndarray

    @classmethod
    def build(cls, spec, X, Xq):
        return cls(eval_kernel(spec, X, Xq), kernel_diag(spec, Xq))

    def dense_star(self, q, C):
        return np.kron(np.eye(C), self.cross[:, [q]])


def predictive_f_star(K, blocks, A, state, mean_const=0.0, workspace=None, kappa=KAPPA):
    """Predictive Gaussians of the query logits given omega.

    mu*    = m + (A K*)^T (A K A^T + Omega^-1)^-1 (Omega^-1 kappa - A mu)
    Sigma* = K** - (A K*)^T (A K A^T + Omega^-1)^-1 A K*

    A constant prior mean cancels inside A mu, so mu* is simply shifted by it.
    Returns one ``PredictiveGaussian`` per query column of ``blocks``.
    """
    omega = getattr(state, "omega", state)
    ws = workspace if workspace is not None else EfficientSamplerWorkspace(K, A, omega)
    C, N = A.C, A.N
    kq = np.asarray(blocks.cross, dtype=float)
    Q = kq.shape[1]

    b = ws.apply_psi_precision(kappa / ws.omega)
    Atb = A.apply_transpose(b).reshape(C, N)
    means = kq.T @ Atb.T + mean_const  # (Q, C)

    # A K* for all queries at once: columns indexed (c, q)
    Kstar = np.zeros((C, N, C, Q))
    for c in range(C):
        Kstar[c, :, c, :] = kq
    Kstar = Kstar.reshape(C * N, C * Q)
    AK = A.apply(Kstar)
    GAK = ws.apply_psi_precision(AK)
    quad = np.einsum("jcq,jdq->qcd", AK.reshape(-1, C, Q), GAK.reshape(-1, C, Q))
    out = []
    for q in range(Q):
        cov = blocks.diag[q] * np.eye(C) - quad[q]
        out.append(PredictiveGaussian(means[q], cov))
    return out


def _pairwise_marginals(g):
    """Means and variances of f_c - f_j for every ordered pair (c, j)."""
    m = g.mean[:, None] - g.mean[None, :]
    d = np.diag(g.cov)
    v = d[:, None] + d[None, :] - 2.0 * g.cov
    return m, np.maximum(v, 0.0)


def _gh_rule(nodes):
    x, w = np.polynomial.hermite.hermgauss(nodes)
    return x, w / math.sqrt(math.pi)


def expected_sigmoid(mean, var, nodes=64):
    """E[sigmoid(z)] for z ~ N(mean, var) by Gauss-Hermite quadrature."""
    x, w = _gh_rule(nodes)
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    pts = mean[..., None] + math.sqrt(2.0) * sd[..., None] * x
    return np.sum(w * sigmoid(pts), axis=-1)


def class_probs_quadrature(g, nodes=64, normalize=True):
    """OVE class probabilities by per-dimension Gauss-Hermite quadrature.

    For class c each non-trivial dimension of A^c f* is f_c - f_j; its marginal
    expectation of the sigmoid is computed in 1-D and the C - 1 factors are
    multiplied, ignoring the correlation between dimensions. The
    self-comparison factor sigmoid(0) is dropped (it cancels on normalizing).
    """
    if nodes < 2:
        raise InvalidArgument("need at least 2 quadrature nodes")
    m, v = _pairwise_marginals(g)
    es = expected_sigmoid(m, v, nodes)
    C = es.shape[0]
    logs = np.log(np.maximum(es, 1e-300))
    logs[np.arange(C), np.arange(C)] = 0.0
    score = np.exp(logs.sum(axis=1))
    return score / score.sum() if normalize else score


def class_probs_mc(g, samples, rng, normalize=True, batch=200_000):
    """Monte Carlo average of OVE probabilities over f* ~ N(mu*, Sigma*).

    With ``normalize`` each draw's class vector is renormalized before
    averaging; otherwise the raw likelihood values are averaged.
    """
    gen = as_generator(rng)
    C = g.mean.size
    w, V = np.linalg.eigh(g.cov)
    root = V * np.sqrt(np.maximum(w, 0.0))
    total = np.zeros(C)
    done = 0
    while done < samples:
        n = min(batch, samples - done)
        F = g.mean + gen.standard_normal((n, C)) @ root.T
        if normalize:
            total += normalized_probs("ove", F).sum(axis=0)
        else:
            total += np.exp(log_lik_table("ove", F)).sum(axis=0)
        done += n
    return total / samples


def average_over_chains(probs):
    probs = np.asarray(probs, dtype=float)
    if probs.ndim < 2 or probs.shape[0] == 0:
        raise InvalidArgument("need at least one chain")
    return probs.mean(axis=0)


def plug_in_predict(f_bar, lik_kind):
    """Apply the normalized likelihood to the predictive mean logits."""
    return normalized_probs(lik_kind, f_bar)


def predict_proba(K, blocks, A, omegas, mean_const=0.0, nodes=64):
    """Chain-averaged quadrature probabilities, shape (Q, C)."""
    per_chain = []
    for om in omegas:
        gs = predictive_f_star(K, blocks, A, om, mean_const)
        per_chain.append([class_probs_quadrature(g, nodes) for g in gs])
    return average_over_chains(np.asarray(per_chain))


def predictive_mean_from_samples(K, blocks, f_samples, mean_const=0.0):
    """E[f* | data] as the average over posterior samples of the GP conditional mean.

    E[f*_c | f] = m + k(x*, X) K^-1 (f_c - m). Returns (Q, C).
    """
    f_bar = np.mean(np.atleast_2d(f_samples), axis=0)
    C = K.C
    alpha = K.solve(f_bar - mean_const).reshape(C, K.N)
    return blocks.cross.T @ alpha.T + mean_const
