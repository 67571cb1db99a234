"""Covariance hyperparameter learning with Gibbs-sampled Polya-Gamma variables.

Marginal likelihood (ML): the gradient of log p(Y | X) is estimated through
Fisher's identity as the average, over posterior omega draws, of the gradient
of log p(Y | X, omega), which is a Gaussian log-density in psi-space:

    log N(Omega^-1 kappa | A mu, A K A^T + Omega^-1)

Predictive likelihood (PL): omega is drawn from the support-set posterior and
the query log-probabilities are differentiated by central differences.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from .errors import Divergence, InvalidArgument, OvePGError
from .inference import KAPPA, EfficientSamplerWorkspace, GibbsConfig, run_gibbs_with
from .kernels import build_block_kernel, kernel_param_grad, prior_mean
from .likelihoods import OveTransform, onehot_to_labels
from .predictive import QueryKernelBlocks, class_probs_quadrature, predict_proba, predictive_f_star

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


def _setup(spec, X, Y, jitter):
    labels = onehot_to_labels(Y)
    C = np.asarray(Y).shape[1]
    K = build_block_kernel(spec, X, C, jitter=jitter)
    A = OveTransform(labels, C)
    return K, A, prior_mean(spec, labels.size, C)


def log_evidence_given_omega(spec, X, Y, omega, jitter=1e-6, kappa=KAPPA):
    """log N(Omega^-1 kappa | A mu, A K A^T + Omega^-1) in O(C N^3).

    Terms that depend on omega alone (the PG prior density and the
    completing-the-square constants of the augmented likelihood) are omitted;
    they do not affect gradients with respect to the hyperparameters.
    ``kappa`` is exposed only so tests can probe the Gaussian mode.
    """
    K, A, mu = _setup(spec, X, Y, jitter)
    omega = np.asarray(omega, dtype=float)
    ws = EfficientSamplerWorkspace(K, A, omega)
    r = kappa / omega - A.apply(mu)
    quad = float(r @ ws.apply_psi_precision(r))
    return -0.5 * quad - 0.5 * ws.logdet_psi_cov() - 0.5 * r.size * _LOG_2PI


def _kernel_grads(spec, X, K):
    """d(K_N + jitter I)/d theta for each learnable kernel parameter.

    The jitter is proportional to the mean diagonal, which scales with the
    output scale and does not depend on the lengthscale.
    """
    grads = {}
    for name in spec.param_names():
        if name == "mean_const":
            continue
        dK = kernel_param_grad(spec, X, name)
        if name == "log_scale":
            dK = dK + K.jitter * np.eye(K.N)
        grads[name] = dK
    return grads


def grad_log_evidence(spec, X, Y, omega, jitter=1e-6):
    """Gradient of ``log_evidence_given_omega`` with respect to ``spec.get_params()``.

    With Sigma_psi = A K A^T + Omega^-1 and a = Sigma_psi^-1 (Omega^-1 kappa - A mu):
        d/d theta = 1/2 a^T A dK A^T a - 1/2 tr(Sigma_psi^-1 A dK A^T) + a^T A dmu
    """
    K, A, mu = _setup(spec, X, Y, jitter)
    omega = np.asarray(omega, dtype=float)
    ws = EfficientSamplerWorkspace(K, A, omega)
    C, N = A.C, A.N
    r = KAPPA / omega - A.apply(mu)
    a = ws.apply_psi_precision(r)
    beta = A.apply_transpose(a).reshape(C, N)

    # diagonal blocks of H = A^T Sigma_psi^-1 A, one class at a time
    H = np.empty((C, N, N))
    eye = np.eye(N)
    for c in range(C):
        cols = np.zeros((C, N, N))
        cols[c] = eye
        Ac = A.apply(cols.reshape(C * N, N))
        H[c] = Ac.T @ ws.apply_psi_precision(Ac)

    dKs = _kernel_grads(spec, X, K)
    out = []
    for name in spec.param_names():
        if name == "mean_const":
            # A annihilates constant vectors, so a shared mean cannot move psi
            out.append(float(a @ A.apply(np.ones(C * N))))
            continue
        dK = dKs[name]
        fit = 0.5 * float(np.einsum("ci,ij,cj->", beta, dK, beta))
        trace = 0.5 * float(np.einsum("cij,ji->", H, dK))
        out.append(fit - trace)
    return np.array(out)


def grad_ml(spec, X, Y, omegas, jitter=1e-6):
    """Fisher-identity estimate: mean of per-sample gradients over omega draws."""
    omegas = np.atleast_2d(omegas)
    if omegas.shape[0] < 1:
        raise InvalidArgument("need at least one omega sample")
    return np.mean([grad_log_evidence(spec, X, Y, om, jitter) for om in omegas], axis=0)


def pl_objective(spec, support, query, omegas, jitter=1e-6, nodes=64):
    """(1/M) sum_m sum_j log p(y*_j | x*_j, S, omega_m) with quadrature probabilities."""
    Xs, Ys = support
    Xq, Yq = query
    K, A, _ = _setup(spec, Xs, Ys, jitter)
    yq = onehot_to_labels(Yq)
    blocks = QueryKernelBlocks.build(spec, Xs, Xq)
    total = 0.0
    omegas = np.atleast_2d(omegas)
    for om in omegas:
        gs = predictive_f_star(K, blocks, A, om, spec.mean_const)
        for g, y in zip(gs, yq):
            total += math.log(class_probs_quadrature(g, nodes)[y])
    return total / omegas.shape[0]


def grad_pl(spec, support, query, omegas, jitter=1e-6, rel_step=1e-4):
    """Central-difference gradient of ``pl_objective``; step h = rel_step * (1 + |theta|)."""
    theta = spec.get_params()
    grad = np.empty_like(theta)
    for k in range(theta.size):
        h = rel_step * (1.0 + abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        f_up = pl_objective(spec.with_params(up), support, query, omegas, jitter)
        f_dn = pl_objective(spec.with_params(dn), support, query, omegas, jitter)
        grad[k] = (f_up - f_dn) / (2.0 * h)
    return grad


# --------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgument("learning rate must be positive")


def adam_step(opt, params, grad):
    """One Adam ascent step. Returns ``(new_params, new_state)``; inputs are untouched."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise Divergence("non-finite gradient")
    params = np.asarray(params, dtype=float)
    m = np.zeros_like(params) if opt.m is None else opt.m
    v = np.zeros_like(params) if opt.v is None else opt.v
    t = opt.step + 1
    m = opt.beta1 * m + (1.0 - opt.beta1) * grad
    v = opt.beta2 * v + (1.0 - opt.beta2) * grad**2
    m_hat = m / (1.0 - opt.beta1**t)
    v_hat = v / (1.0 - opt.beta2**t)
    new = params + opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return new, replace(opt, step=t, m=m, v=v)


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "ML"
    epochs: int = 10
    episodes_per_epoch: int = 10
    gibbs: GibbsConfig = field(default_factory=lambda: GibbsConfig(chains=20, steps=1))
    lr: float = 1e-3
    seed: int = 0
    jitter: float = 1e-6

    def __post_init__(self):
        if self.objective not in ("ML", "PL"):
            raise InvalidArgument("objective must be 'ML' or 'PL'")


@dataclass
class TrainResult:
    spec: object
    history: List[dict]
    skipped: List[dict]


def _final_omegas(support_X, support_Y, spec, gibbs, jitter):
    K, A, mu = _setup(spec, support_X, support_Y, jitter)
    traces = run_gibbs_with(K, mu, A, gibbs)
    return np.array([tr.final_omega for tr in traces])


def train_loop(task_source: Callable[[int], object], spec, cfg: TrainConfig, history_path=None):
    """Hyperparameter learning over episodes.

    ``task_source(k)`` returns the k-th ``EpisodeTask`` (global episode index).
    For ML, support and query are merged before sampling; for PL, omega is
    drawn from the support posterior and the query likelihood is ascended.
    A failing episode is logged, recorded in ``skipped`` and not applied.
    """
    if not spec.param_names():
        raise InvalidArgument(f"{spec.kind} kernel has no learnable hyperparameters")
    opt = OptimizerState(lr=cfg.lr)
    params = spec.get_params()
    history, skipped = [], []
    sink = open(history_path, "w") if history_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            objectives = []
            for e in range(cfg.episodes_per_epoch):
                k = epoch * cfg.episodes_per_epoch + e
                task = task_source(k)
                cur = spec.with_params(params)
                gibbs = replace(cfg.gibbs, master_seed=_episode_seed(cfg.seed, k))
                try:
                    if cfg.objective == "ML":
                        X = np.vstack([task.support.X, task.query.X])
                        Y = np.vstack([task.support.Y, task.query.Y])
                        omegas = _final_omegas(X, Y, cur, gibbs, cfg.jitter)
                        grad = grad_ml(cur, X, Y, omegas, cfg.jitter)
                        obj = float(np.mean([log_evidence_given_omega(cur, X, Y, om, cfg.jitter) for om in omegas]))
                    else:
                        sup = (task.support.X, task.support.Y)
                        qry = (task.query.X, task.query.Y)
                        omegas = _final_omegas(*sup, cur, gibbs, cfg.jitter)
                        grad = grad_pl(cur, sup, qry, omegas, cfg.jitter)
                        obj = pl_objective(cur, sup, qry, omegas, cfg.jitter)
                    params, opt = adam_step(opt, params, grad)
                    objectives.append(obj)
                except (OvePGError, np.linalg.LinAlgError) as exc:
                    logger.warning("episode %d skipped: %s", k, exc)
                    skipped.append({"episode": k, "error": str(exc)})
            row = {
                "epoch": epoch,
                "objective": float(np.mean(objectives)) if objectives else None,
                "params": dict(zip(spec.param_names(), map(float, params))),
                "wall_time": time.perf_counter() - t0,
            }
            history.append(row)
            if sink:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return TrainResult(spec.with_params(params), history, skipped)


def _episode_seed(seed, k):
    return int(np.random.SeedSequence(seed, spawn_key=(k,)).generate_state(1, dtype=np.uint64)[0])


def evaluate_episode(spec, task, gibbs, jitter=1e-6, nodes=64):
    """Quadrature predictive probabilities for the query set, conditioning on support only."""
    K, A, mu = _setup(spec, task.support.X, task.support.Y, jitter)
    traces = run_gibbs_with(K, mu, A, gibbs)
    blocks = QueryKernelBlocks.build(spec, task.support.X, task.query.X)
    return predict_proba(K, blocks, A, [tr.final_omega for tr in traces], spec.mean_const, nodes)
