"""Gibbs sampling for the Polya-Gamma augmented one-vs-each GP posterior.

Given auxiliary variables omega, the stacked logits have the Gaussian
conditional

    f | omega ~ N(Sigma (K^-1 mu + A^T kappa), Sigma),  Sigma = (K^-1 + A^T Omega A)^-1

with kappa = 1/2. The naive sampler factorises the CN x CN precision. The
efficient sampler never forms it: it draws a joint prior sample (f0, z0) and
corrects it, using A^T Omega A = D - S P S^T so that every solve is either
block-diagonal (N x N per class) or a single 2N x 2N system.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, lu_factor, lu_solve, solve_triangular

from .errors import ChainError, InvalidArgument, InvalidLabels, NotPositiveDefinite, NumericalBreakdown
from .kernels import build_block_kernel, prior_mean
from .likelihoods import OveTransform, log_lik_data, onehot_to_labels
from .polyagamma import sample_pg1
from .rng import RngStream, as_generator

KAPPA = 0.5


@dataclass
class AugmentationState:
    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        if np.any(self.omega <= 0):
            raise InvalidArgument("Polya-Gamma variables must be strictly positive")

    @property
    def kappa(self):
        return np.full(self.omega.shape, KAPPA)


@dataclass(frozen=True)
class GibbsConfig:
    chains: int = 20
    steps: int = 50
    master_seed: int = 0
    use_efficient_sampler: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.steps < 1:
            raise InvalidArgument("chains and steps must both be >= 1")


@dataclass
class ChainTrace:
    """Trajectory of one chain. Row 0 is the initial state, row t the state after step t."""

    chain: int
    f: np.ndarray
    omega: np.ndarray

    @property
    def steps(self):
        return self.f.shape[0] - 1

    @property
    def final_f(self):
        return self.f[-1]

    @property
    def final_omega(self):
        return self.omega[-1]


def _labels(Y):
    Y = np.asarray(Y)
    if Y.ndim == 2:
        return onehot_to_labels(Y), Y.shape[1]
    raise InvalidLabels("expected an N x C one-hot label matrix")


# --------------------------------------------------------------------------
# conditional workspace


@dataclass
class EfficientSamplerWorkspace:
    """Per-omega quantities for the O(C N^3) solves.

    d[c, i] = Y[i, c] * sum_c' omega[c', i]
    D = Omega + diag(d)
    S = [Y_dag, W_dag]            (CN x 2N, at most two nonzeros per row)
    P = [[0, I], [I, 0]]
    E = (K^-1 + D)^-1              (block diagonal)
    inner = S^T E S - P^-1         (the only dense 2N x 2N system)
    """

    K: object
    A: OveTransform
    omega: np.ndarray
    d: np.ndarray = field(init=False, repr=False)
    Ddiag: np.ndarray = field(init=False, repr=False)
    E: np.ndarray = field(init=False, repr=False)
    ES: np.ndarray = field(init=False, repr=False)
    inner: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        C, N = self.A.C, self.A.N
        self.omega = np.asarray(self.omega, dtype=float)
        W = self.omega.reshape(C, N)
        Y = self.A.Y.T  # (C, N)
        self.Yg, self.Wg = Y, W
        self.d = Y * W.sum(axis=0)[None, :]
        self.Ddiag = W + self.d
        Kb = self.K.base
        eye = np.eye(N)
        self._logdet_B = 0.0
        self.E = np.empty((C, N, N))
        for c in range(C):
            # E_c = (K^-1 + D_c)^-1 = K - V^T V with V = L^-1 s K, L L^T = I + s K s, s = sqrt(D_c)
            s = np.sqrt(self.Ddiag[c])
            try:
                L = cholesky(eye + s[:, None] * Kb * s[None, :], lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                raise NotPositiveDefinite(f"I + D^1/2 K D^1/2 not positive definite for class {c}") from None
            V = solve_triangular(L, s[:, None] * Kb, lower=True, check_finite=False)
            Ec = Kb - V.T @ V
            self.E[c] = 0.5 * (Ec + Ec.T)
            self._logdet_B += 2.0 * float(np.sum(np.log(np.diag(L))))
        # E S, block by block: columns scaled by Y_c and by omega_c
        self.ES = np.concatenate([self.E * Y[:, None, :], self.E * W[:, None, :]], axis=2)
        # S^T E S: rows of E S weighted by Y (top half) and by omega (bottom half)
        StES = np.vstack([np.einsum("ci,cik->ik", Y, self.ES), np.einsum("ci,cik->ik", W, self.ES)])
        # subtract P = [[0, I], [I, 0]] in place
        idx = np.arange(N)
        StES[idx, idx + N] -= 1.0
        StES[idx + N, idx] -= 1.0
        self.inner = StES
        try:
            self._inner_lu = lu_factor(self.inner, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise NumericalBreakdown(f"inner 2N x 2N system failed: {exc}") from None
        piv_diag = np.abs(np.diag(self._inner_lu[0]))
        if not np.all(np.isfinite(piv_diag)) or piv_diag.min() <= 1e-14 * max(piv_diag.max(), 1.0):
            raise NumericalBreakdown("inner 2N x 2N system is singular")

    @staticmethod
    def pairing(N):
        Z, I = np.zeros((N, N)), np.eye(N)
        return np.block([[Z, I], [I, Z]])

    @property
    def S(self):
        """Dense S, for checks only."""
        C = self.A.C
        Ydag = np.vstack([np.diag(self.Yg[c]) for c in range(C)])
        Wdag = np.vstack([np.diag(self.Wg[c]) for c in range(C)])
        return np.hstack([Ydag, Wdag])

    @property
    def D(self):
        return self.Ddiag.ravel()

    # block-diagonal helpers ------------------------------------------------

    def _blocks(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape((self.A.C, self.A.N) + x.shape[1:]), x.shape

    def apply_E(self, x):
        X, shape = self._blocks(x)
        return np.einsum("cij,cj...->ci...", self.E, X).reshape(shape)

    def apply_ES(self, y):
        """E S y for y of leading dimension 2N."""
        out = np.einsum("cik,k...->ci...", self.ES, np.asarray(y, dtype=float))
        return out.reshape((-1,) + np.shape(y)[1:])

    def apply_ES_T(self, x):
        """(E S)^T x = S^T E x."""
        X, _ = self._blocks(x)
        return np.einsum("cik,ci...->k...", self.ES, X)

    def apply_AtOmegaA(self, x):
        x = np.asarray(x, dtype=float)
        w = self.omega.reshape((-1,) + (1,) * (x.ndim - 1))
        return self.A.apply_transpose(w * self.A.apply(x))

    def inner_solve(self, y):
        return lu_solve(self._inner_lu, y)

    # the solves the rest of the package needs ------------------------------

    def apply_sigma(self, x):
        """(K^-1 + A^T Omega A)^-1 x via E - E S (S^T E S - P)^-1 S^T E."""
        u = self.apply_E(x)
        return u - self.apply_ES(self.inner_solve(self.apply_ES_T(x)))

    def apply_psi_precision(self, r):
        """(A K A^T + Omega^-1)^-1 r = Omega r - Omega A Sigma A^T Omega r."""
        r = np.asarray(r, dtype=float)
        w = self.omega.reshape((-1,) + (1,) * (r.ndim - 1))
        wr = w * r
        return wr - w * self.A.apply(self.apply_sigma(self.A.apply_transpose(wr)))

    def logdet_psi_cov(self):
        """log det(A K A^T + Omega^-1) without forming the CN x CN matrix."""
        total = -np.sum(np.log(self.omega))
        # log det(K + D^-1) + log det D = log det(I + D^1/2 K D^1/2)
        total += self._logdet_B
        sign, logabs = np.linalg.slogdet(self.inner)
        if sign * (-1) ** self.A.N <= 0:
            raise NumericalBreakdown("inner determinant has the wrong sign")
        return float(total + logabs)

    def correction(self, f0, z0, kappa=KAPPA):
        """Map a joint prior draw (f0, z0) to an exact conditional draw.

        f = f0 + K v - K B E v + K B E S (S^T E S - P)^-1 S^T E v,
        v = A^T Omega (Omega^-1 kappa - z0),  B = A^T Omega A.
        ``f0`` and ``z0`` may carry a trailing batch axis.
        """
        z0 = np.asarray(z0, dtype=float)
        w = self.omega.reshape((-1,) + (1,) * (z0.ndim - 1))
        v = self.A.apply_transpose(kappa - w * z0)
        Ev = self.apply_E(v)
        ESy = self.apply_ES(self.inner_solve(self.apply_ES_T(v)))
        Kmv = self.K.matvec
        return f0 + Kmv(v) - Kmv(self.apply_AtOmegaA(Ev)) + Kmv(self.apply_AtOmegaA(ESy))


def conditional_moments(K, mu, A, omega, kappa=KAPPA):
    """Dense mean and covariance of f | omega (reference path, O(C^3 N^3)).

    ``kappa`` is the per-row label weight; 0 removes the labels entirely.
    """
    Kd = K.dense()
    Ad = A.dense()
    prec = np.linalg.inv(Kd) + Ad.T @ np.diag(omega) @ Ad
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (K.solve(mu) + Ad.T @ np.full(A.C * A.N, kappa))
    return mean, cov


# --------------------------------------------------------------------------
# conditional samplers


def sample_omega_conditional(psi, rng):
    """omega_j ~ PG(1, psi_j) independently."""
    return AugmentationState(sample_pg1(np.asarray(psi, dtype=float), as_generator(rng)))


def sample_f_conditional_naive(K, mu, A, state, rng, kappa=KAPPA):
    """Exact draw through a dense CN x CN Cholesky of the conditional precision."""
    gen = as_generator(rng)
    omega = state.omega if isinstance(state, AugmentationState) else np.asarray(state)
    Ad = A.dense()
    Kinv = K.solve(np.eye(K.C * K.N))
    prec = Kinv + Ad.T @ (omega[:, None] * Ad)
    prec = 0.5 * (prec + prec.T)
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("conditional precision is not positive definite") from None
    rhs = K.solve(mu) + A.apply_transpose(np.full(A.C * A.N, kappa))
    mean = cho_solve((L, True), rhs)
    eps = gen.standard_normal(mean.size)
    return mean + np.linalg.solve(L.T, eps)


def sample_f_conditional_efficient(K, mu, A, state, rng, workspace=None, kappa=KAPPA):
    """Exact draw in O(C N^3): prior draw (f0, z0), then the decomposed correction."""
    gen = as_generator(rng)
    omega = state.omega if isinstance(state, AugmentationState) else np.asarray(state)
    ws = workspace if workspace is not None else EfficientSamplerWorkspace(K, A, omega)
    f0 = K.sample(mu, gen)
    z0 = A.apply(f0) + gen.standard_normal(omega.size) / np.sqrt(omega)
    return ws.correction(f0, z0, kappa)


# --------------------------------------------------------------------------
# Gibbs driver


def _run_chain(m, K, mu, A, cfg):
    gen = RngStream(cfg.master_seed, m).generator()
    CN = A.C * A.N
    fs = np.empty((cfg.steps + 1, CN))
    ws = np.empty((cfg.steps + 1, CN))
    ws[0] = sample_pg1(np.zeros(CN), gen)
    fs[0] = K.sample(mu, gen)
    step = sample_f_conditional_efficient if cfg.use_efficient_sampler else sample_f_conditional_naive
    for t in range(1, cfg.steps + 1):
        psi = A.apply(fs[t - 1])
        ws[t] = sample_pg1(psi, gen)
        fs[t] = step(K, mu, A, ws[t], gen)
    return ChainTrace(m, fs, ws)


def run_gibbs_with(K, mu, A, cfg):
    """Run ``cfg.chains`` independent chains on a prebuilt prior and transform."""

    def one(m):
        try:
            return _run_chain(m, K, mu, A, cfg)
        except Exception as exc:  # attach the chain index, keep the cause
            raise ChainError(m, exc) from exc

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            traces = list(pool.map(one, range(cfg.chains)))
    else:
        traces = [one(m) for m in range(cfg.chains)]
    return sorted(traces, key=lambda t: t.chain)


def run_gibbs(X, Y, spec, cfg, jitter=1e-6):
    """Algorithm: omega_0 ~ PG(1, 0), f_0 ~ prior; then psi = A f, omega ~ PG(1, psi), f ~ p(f | omega)."""
    labels, C = _labels(Y)
    if np.any(np.bincount(labels, minlength=C) == 0):
        raise InvalidLabels("every class must appear at least once")
    K = build_block_kernel(spec, X, C, jitter=jitter)
    A = OveTransform(labels, C)
    return run_gibbs_with(K, prior_mean(spec, len(labels), C), A, cfg)


def posterior_samples(traces, burn_fraction=0.5, field="f"):
    """Stack post-burn-in states of every chain (chain order, then time order)."""
    rows = []
    for tr in traces:
        arr = getattr(tr, field)[1:]
        start = int(math.floor(burn_fraction * arr.shape[0]))
        rows.append(arr[start:])
    return np.concatenate(rows, axis=0)


# --------------------------------------------------------------------------
# elliptical slice sampling oracle


def elliptical_slice(log_lik, K, mean, iterations, rng, f_init=None):
    """Elliptical slice sampling for a prior N(mean, K) and any log-likelihood.

    Returns an (iterations, CN) array of successive states.
    """
    gen = as_generator(rng)
    f = K.sample(mean, gen) if f_init is None else np.array(f_init, dtype=float)
    cur = log_lik(f)
    out = np.empty((iterations, f.size))
    for it in range(iterations):
        nu = K.sample(np.zeros_like(f), gen)
        level = cur + math.log(gen.random())
        theta = gen.uniform(0.0, 2.0 * math.pi)
        lo, hi = theta - 2.0 * math.pi, theta
        centered = f - mean
        while True:
            prop = mean + centered * math.cos(theta) + nu * math.sin(theta)
            val = log_lik(prop)
            if val > level:
                break
            if theta < 0:
                lo = theta
            else:
                hi = theta
            theta = gen.uniform(lo, hi)
        f, cur = prop, val
        out[it] = f
    return out


def ess_oracle(X, Y, spec, lik_kind, iterations, rng, jitter=1e-6, K=None):
    """Posterior samples of stacked logits under any supported likelihood.

    ``lik_kind`` is one of the names in ``likelihoods.LIKELIHOODS`` or ``"none"``
    (constant likelihood, for prior recovery).
    """
    labels, C = _labels(Y)
    N = labels.size
    if K is None:
        K = build_block_kernel(spec, X, C, jitter=jitter)
    mean = prior_mean(spec, N, C)
    if lik_kind == "none":
        def log_lik(f):
            return 0.0
    else:
        def log_lik(f):
            return log_lik_data(lik_kind, f.reshape(C, N).T, labels)
    return elliptical_slice(log_lik, K, mean, iterations, rng)
