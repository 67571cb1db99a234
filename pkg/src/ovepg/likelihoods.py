"""Classification likelihoods and the one-vs-each pairwise transform.

Class indices are zero-based throughout. Stacked logit vectors are class-major:
``f.reshape(C, N)[c, i]`` is the logit of class ``c`` at example ``i``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, log_softmax

from .errors import DegenerateInput, InvalidArgument, InvalidLabels, ShapeError

LIKELIHOODS = ("softmax", "ove", "lsm", "gaussian")

_LOG_NORM_CONST = -0.5 * math.log(2.0 * math.pi)


def sigmoid(x):
    return expit(x)


def log_sigmoid(x):
    return log_expit(x)


def _check(f, y):
    f = np.asarray(f, dtype=float)
    if f.ndim != 1:
        raise ShapeError("logits must be a length-C vector")
    if not 0 <= y < f.size:
        raise InvalidLabels(f"class index {y} out of range for C={f.size}")
    return f


def log_softmax_lik(f, y):
    f = _check(f, y)
    return float(log_softmax(f)[y])


def log_ove_lik(f, y):
    f = _check(f, y)
    diffs = np.delete(f[y] - f, y)
    return float(log_sigmoid(diffs).sum())


def log_lsm_lik(f, y):
    f = _check(f, y)
    ls = log_sigmoid(f)
    return float(ls[y] - np.logaddexp.reduce(ls))


def log_gaussian_lik(f, y):
    f = _check(f, y)
    target = -np.ones_like(f)
    target[y] = 1.0
    return float(f.size * _LOG_NORM_CONST - 0.5 * np.sum((target - f) ** 2))


def softmax_lik(f, y):
    return math.exp(log_softmax_lik(f, y))


def ove_lik(f, y):
    """Product of sigmoid(f_y - f_j) over j != y; a lower bound on softmax."""
    return math.exp(log_ove_lik(f, y))


def lsm_lik(f, y):
    return math.exp(log_lsm_lik(f, y))


def gaussian_lik(f, y):
    return math.exp(log_gaussian_lik(f, y))


def log_lik_table(kind, F):
    """Log-likelihood of every class for a batch of logit rows.

    Parameters
    ----------
    kind : str
        One of ``LIKELIHOODS``.
    F : array (..., C)

    Returns
    -------
    array (..., C) whose entry ``[..., c]`` is ``log L(f | y = c)``.
    """
    F = np.asarray(F, dtype=float)
    if kind == "softmax":
        return log_softmax(F, axis=-1)
    if kind == "ove":
        diff = F[..., :, None] - F[..., None, :]
        ls = log_sigmoid(diff)
        # drop the self-comparison term log sigmoid(0)
        return ls.sum(axis=-1) - math.log(0.5)
    if kind == "lsm":
        ls = log_sigmoid(F)
        return ls - np.logaddexp.reduce(ls, axis=-1, keepdims=True)
    if kind == "gaussian":
        C = F.shape[-1]
        # target +1 at class c, -1 elsewhere
        base = -0.5 * np.sum((F + 1.0) ** 2, axis=-1, keepdims=True)
        # switching class c's target from -1 to +1 adds 2 f_c
        return C * _LOG_NORM_CONST + base + 2.0 * F
    raise ValueError(f"unknown likelihood {kind!r}; expected one of {LIKELIHOODS}")


def normalized_probs(kind, F):
    """Per-class likelihood values renormalized to sum to one along the last axis."""
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise InvalidArgument("logits must be finite")
    with np.errstate(over="ignore"):
        logs = log_lik_table(kind, F)
    if np.any(np.all(np.isneginf(logs), axis=-1)):
        raise DegenerateInput("all class likelihoods underflow to zero")
    logs = logs - logs.max(axis=-1, keepdims=True)
    p = np.exp(logs)
    return p / p.sum(axis=-1, keepdims=True)


def log_lik_data(kind, F, labels):
    """Total log-likelihood of labels under logits ``F`` (N, C)."""
    table = log_lik_table(kind, F)
    return float(table[np.arange(len(labels)), labels].sum())


# --------------------------------------------------------------------------
# one-hot labels and the OVE transform


def labels_to_onehot(labels, C=None):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InvalidLabels("labels must be a 1-D integer array")
    if C is None:
        C = int(labels.max()) + 1 if labels.size else 0
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InvalidLabels("label outside [0, C)")
    Y = np.zeros((labels.size, C))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def onehot_to_labels(Y):
    Y = np.asarray(Y)
    if Y.ndim != 2:
        raise InvalidLabels("one-hot labels must be an N x C matrix")
    if not np.all((Y == 0) | (Y == 1)) or not np.all(Y.sum(axis=1) == 1):
        raise InvalidLabels("every row must contain exactly one 1 and zeros elsewhere")
    return Y.argmax(axis=1)


@dataclass(frozen=True)
class OveTransform:
    """Sparse CN x CN matrix sending stacked logits to pairwise differences.

    Block (c, c') is ``diag(Y[:, c']) - [c == c'] I``, so that
    ``(A f)[c, i] = f[y_i, i] - f[c, i]``.
    """

    labels: np.ndarray
    C: int
    N: int = field(init=False)

    def __post_init__(self):
        labels = np.array(self.labels, copy=True)
        if labels.ndim != 1 or (labels.size and not np.issubdtype(labels.dtype, np.integer)):
            raise InvalidLabels("labels must be a 1-D integer array")
        if labels.size and (labels.min() < 0 or labels.max() >= self.C):
            raise InvalidLabels(f"label outside [0, {self.C})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "N", labels.size)

    @property
    def Y(self):
        return labels_to_onehot(self.labels, self.C)

    def _grid(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.C * self.N:
            raise ShapeError(f"expected leading dimension {self.C * self.N}, got {v.shape[0]}")
        return v.reshape((self.C, self.N) + v.shape[1:])

    def apply(self, f):
        """``A @ f`` in O(CN); ``f`` may carry trailing column dimensions."""
        F = self._grid(f)
        own = F[self.labels, np.arange(self.N)]
        return (own[None] - F).reshape(f.shape)

    def apply_transpose(self, v):
        V = self._grid(v)
        out = -V.copy()
        out[self.labels, np.arange(self.N)] += V.sum(axis=0)
        return out.reshape(np.shape(v))

    def dense(self):
        Y = self.Y
        blocks = [
            [np.diag(Y[:, cp]) - (c == cp) * np.eye(self.N) for cp in range(self.C)]
            for c in range(self.C)
        ]
        return np.block(blocks)

    def self_rows(self):
        """Flat indices of the rows comparing each true logit with itself."""
        return self.labels * self.N + np.arange(self.N)


def build_ove_transform(Y):
    """Build the transform from an N x C one-hot matrix."""
    labels = onehot_to_labels(Y)
    return OveTransform(labels, np.asarray(Y).shape[1])


def ove_log_lik_psi(psi, N):
    """log(2^N prod_j sigmoid(psi_j)); the 2^N undoes the N self-comparisons."""
    psi = np.asarray(psi, dtype=float)
    return float(N * math.log(2.0) + log_sigmoid(psi).sum())
