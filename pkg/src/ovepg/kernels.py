"""Covariance functions and the class-block-diagonal prior covariance."""

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.spatial.distance import cdist

from .errors import DegenerateInput, InvalidArgument, MalformedDataset, NoSuchParam, NotPositiveDefinite

KERNELS = ("cosine", "linear", "rbf", "rbf_normalized", "raw_rbf")

# hyperparameters each kernel family exposes for learning
_KIND_PARAMS = {
    "cosine": ("log_scale",),
    "linear": ("log_scale",),
    "rbf": ("log_scale", "log_lengthscale"),
    "rbf_normalized": ("log_scale", "log_lengthscale"),
    "raw_rbf": (),
}


@dataclass(frozen=True)
class AffineMap:
    """Fixed feature map g(x) = x @ weight + bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, X):
        return np.asarray(X, dtype=float) @ self.weight + self.bias

    @property
    def out_dim(self):
        return self.weight.shape[1]

    @classmethod
    def from_csv(cls, path):
        """Read a weight file: one row per input dimension, then a bias row."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
        try:
            M = np.array([[float(v) for v in r] for r in rows])
        except ValueError as exc:
            raise MalformedDataset(f"non-numeric entry in feature map file: {exc}") from None
        if M.ndim != 2 or M.shape[0] < 2:
            raise MalformedDataset("feature map file needs >= 1 weight row and a bias row")
        return cls(M[:-1], M[-1])


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus its hyperparameters.

    ``log_scale`` and ``log_lengthscale`` are the log output scale and log
    lengthscale; ``mean_const`` is the constant prior mean shared by every
    class. ``linear_dim`` selects whether the linear kernel divides by the
    mapped ("mapped") or raw input ("raw") dimension.
    """

    kind: str = "cosine"
    log_scale: float = 0.0
    log_lengthscale: float = 0.0
    mean_const: float = 0.0
    feature_map: Optional[AffineMap] = field(default=None, compare=False)
    learn_mean: bool = False
    linear_dim: str = "mapped"

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise InvalidArgument(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        if self.kind == "raw_rbf" and (self.log_scale != 0.0 or self.log_lengthscale != 0.0):
            raise InvalidArgument("raw_rbf is the unit RBF kernel; scale and lengthscale are fixed at 0")
        if self.linear_dim not in ("mapped", "raw"):
            raise InvalidArgument("linear_dim must be 'mapped' or 'raw'")

    def param_names(self):
        names = _KIND_PARAMS[self.kind]
        return names + ("mean_const",) if self.learn_mean else names

    def get_params(self):
        return np.array([getattr(self, n) for n in self.param_names()], dtype=float)

    def with_params(self, values):
        return replace(self, **dict(zip(self.param_names(), map(float, values))))

    def features(self, X):
        X = np.asarray(X, dtype=float)
        return X if self.feature_map is None else self.feature_map(X)

    def to_dict(self):
        return {
            "kind": self.kind,
            "log_scale": self.log_scale,
            "log_lengthscale": self.log_lengthscale,
            "mean_const": self.mean_const,
            "learn_mean": self.learn_mean,
            "linear_dim": self.linear_dim,
        }


def _unit_rows(G):
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInput("zero-norm feature vector given to a normalized kernel")
    return G / norms


def _sqdist(A, B):
    return cdist(A, B, "sqeuclidean")


def _prepare(spec, X, X2):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = X if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
    if X.shape[1] != X2.shape[1]:
        raise InvalidArgument("input dimensions differ")
    return X, X2, spec.features(X), spec.features(X2)


def _scaled_sqdist(spec, X, X2):
    """Squared distance already divided by the lengthscale-dependent factor."""
    _, _, G, G2 = _prepare(spec, X, X2)
    ell2 = math.exp(2.0 * spec.log_lengthscale)
    if spec.kind == "rbf":
        return _sqdist(G, G2) / (G.shape[1] * ell2)
    if spec.kind == "rbf_normalized":
        return _sqdist(_unit_rows(G), _unit_rows(G2)) / ell2
    if spec.kind == "raw_rbf":
        return _sqdist(G, G2)
    raise NoSuchParam(f"{spec.kind} kernel has no lengthscale")


def eval_kernel(spec, X, X2=None):
    """Cross-covariance matrix k(X, X2) of shape (len(X), len(X2))."""
    X, X2, G, G2 = _prepare(spec, X, X2)
    scale = math.exp(spec.log_scale)
    if spec.kind == "cosine":
        K = _unit_rows(G) @ _unit_rows(G2).T
    elif spec.kind == "linear":
        D = G.shape[1] if spec.linear_dim == "mapped" else X.shape[1]
        K = G @ G2.T / D
    else:
        K = np.exp(-0.5 * _scaled_sqdist(spec, X, X2))
    K = scale * K
    if X2 is X:
        K = 0.5 * (K + K.T)
    return K


def kernel_diag(spec, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    scale = math.exp(spec.log_scale)
    if spec.kind == "linear":
        G = spec.features(X)
        D = G.shape[1] if spec.linear_dim == "mapped" else X.shape[1]
        return scale * np.sum(G**2, axis=1) / D
    if spec.kind in ("cosine", "rbf_normalized"):
        _unit_rows(spec.features(X))
    return np.full(X.shape[0], scale)


def kernel_param_grad(spec, X, param, X2=None):
    """Analytic derivative of k(X, X2) with respect to one hyperparameter."""
    if param not in _KIND_PARAMS[spec.kind]:
        raise NoSuchParam(f"{spec.kind} kernel has no hyperparameter {param!r}")
    K = eval_kernel(spec, X, X2)
    if param == "log_scale":
        return K
    # d/d ell of exp(-r^2 e^{-2 ell} / 2) is r^2 e^{-2 ell} k
    return K * _scaled_sqdist(spec, X, X2)


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockKernelMatrix:
    """Prior covariance with C identical N x N blocks on the diagonal.

    Only the shared block and its Cholesky factor are stored; every operation
    on the full CN x CN matrix works block by block.
    """

    base: np.ndarray
    C: int
    jitter: float
    chol: np.ndarray = field(repr=False)

    @property
    def N(self):
        return self.base.shape[0]

    def _grid(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.C * self.N:
            raise InvalidArgument(f"expected leading dimension {self.C * self.N}")
        return v.reshape((self.C, self.N) + v.shape[1:])

    def matvec(self, v):
        V = self._grid(v)
        return np.einsum("ij,cj...->ci...", self.base, V).reshape(np.shape(v))

    def solve(self, v):
        V = self._grid(v)
        cols = np.moveaxis(V, 0, 1).reshape(self.N, -1)
        out = cho_solve((self.chol, True), cols)
        return np.moveaxis(out.reshape((self.N, self.C) + V.shape[2:]), 1, 0).reshape(np.shape(v))

    def logdet(self):
        return self.C * 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def sample(self, mean, gen, size=None):
        """Draw from N(mean, K); ``size`` adds a leading batch axis."""
        shape = (self.C, self.N) if size is None else (size, self.C, self.N)
        eps = gen.standard_normal(shape)
        draw = eps @ self.chol.T
        return np.asarray(mean) + draw.reshape(draw.shape[:-2] + (-1,))

    def dense(self):
        return np.kron(np.eye(self.C), self.base)


def factor_with_jitter(K, jitter=1e-6, max_jitter=1e-2):
    """Cholesky of ``K + j I``, escalating the relative jitter ``j`` x10 on failure.

    Returns ``(L, absolute_jitter)``.
    """
    K = np.asarray(K, dtype=float)
    scale = float(np.mean(np.diag(K))) if K.size else 1.0
    scale = scale if scale > 0 else 1.0
    eye = np.eye(K.shape[0])
    rel = jitter
    while True:
        try:
            return np.linalg.cholesky(K + rel * scale * eye), rel * scale
        except np.linalg.LinAlgError:
            if rel >= max_jitter:
                raise NotPositiveDefinite(
                    f"kernel matrix not positive definite with jitter {rel:g} x mean diagonal"
                ) from None
            rel = min(rel * 10.0, max_jitter)


def build_block_kernel(spec, X, C, jitter=1e-6, max_jitter=1e-2):
    """Assemble the block-diagonal prior covariance for C classes.

    ``jitter`` is relative to the mean diagonal of the Gram matrix.
    """
    K = eval_kernel(spec, X)
    L, absolute = factor_with_jitter(K, jitter, max_jitter)
    base = K + absolute * np.eye(K.shape[0])
    return BlockKernelMatrix(base, int(C), absolute, L)


def block_from_base(base, C):
    """Wrap an already positive-definite N x N matrix (no jitter)."""
    base = np.asarray(base, dtype=float)
    try:
        L = np.linalg.cholesky(base)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("block is not positive definite") from None
    return BlockKernelMatrix(base, int(C), 0.0, L)


def prior_mean(spec, N, C):
    return np.full(C * N, spec.mean_const, dtype=float)
