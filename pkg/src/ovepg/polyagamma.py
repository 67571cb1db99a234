"""Polya-Gamma random variates.

``sample_pg1`` is the exact alternating-series rejection sampler for PG(1, c)
(Devroye's construction as adapted by Polson, Scott and Windle): it draws
J*(1, c/2) from a mixture of a truncated exponential and a truncated inverse
Gaussian proposal and accepts by evaluating the alternating series for the
density until the decision is certain. The implementation is vectorised: every
pending draw advances through the same rounds of proposal and series
evaluation.

``sample_pg_oracle`` is the truncated Gamma-convolution representation, kept as
an independent (biased, but controllably so) check on the exact sampler.
"""

import math

import numpy as np
from scipy.special import expit, log_ndtr

from .rng import as_generator

__all__ = ["sample_pg1", "sample_pg", "pg_mean", "sample_pg_oracle"]

_TRUNC = 0.64
_TRUNC_RECIP = 1.0 / _TRUNC
_MAX_SERIES_TERMS = 200


def pg_mean(b, c):
    """Mean of PG(b, c), continuous through c = 0 where it equals b/4."""
    half = 0.5 * np.abs(np.asarray(c, dtype=float))
    small = half < 1e-4
    safe = np.where(small, 1.0, half)
    ratio = np.where(small, 1.0 - half**2 / 3.0, np.tanh(safe) / safe)
    out = 0.25 * np.asarray(b, dtype=float) * ratio
    return float(out) if out.ndim == 0 else out


def _series_coef(n, x):
    """n-th coefficient of the alternating series for the J*(1, 0) density."""
    k = (n + 0.5) * math.pi
    out = np.empty_like(x)
    right = x > _TRUNC
    out[right] = k * np.exp(-0.5 * k * k * x[right])
    left = ~right
    xl = x[left]
    out[left] = np.exp(
        -1.5 * (math.log(0.5 * math.pi) + np.log(xl)) + math.log(k) - 2.0 * (n + 0.5) ** 2 / xl
    )
    return out


def _right_mass(z):
    """Probability of proposing from the exponential tail (x > TRUNC)."""
    t = _TRUNC
    fz = 0.125 * math.pi**2 + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = np.log(fz) + fz * t
    xb = x0 - z + log_ndtr(b)
    xa = x0 + z + log_ndtr(a)
    log_q_over_p = math.log(4.0 / math.pi) + np.logaddexp(xb, xa)
    return expit(-log_q_over_p)


def _truncated_inverse_gaussian(z, gen):
    """Inverse-Gaussian(1/z, 1) draws truncated to (0, TRUNC)."""
    t = _TRUNC
    x = np.full(z.shape, t + 1.0)

    # mean beyond the truncation point: propose from the z = 0 law and thin
    flat = np.flatnonzero(z < _TRUNC_RECIP)
    pending = flat
    while pending.size:
        m = pending.size
        e1 = gen.standard_exponential(m)
        e2 = gen.standard_exponential(m)
        bad = np.flatnonzero(e1 * e1 > 2.0 * e2 / t)
        while bad.size:
            e1[bad] = gen.standard_exponential(bad.size)
            e2[bad] = gen.standard_exponential(bad.size)
            bad = bad[e1[bad] ** 2 > 2.0 * e2[bad] / t]
        prop = t / (1.0 + e1 * t) ** 2
        alpha = np.exp(-0.5 * z[pending] ** 2 * prop)
        ok = gen.random(m) <= alpha
        x[pending[ok]] = prop[ok]
        pending = pending[~ok]

    # mean inside the truncation region: draw the full IG and reject overshoot
    pending = np.flatnonzero(z >= _TRUNC_RECIP)
    while pending.size:
        mu = 1.0 / z[pending]
        y = gen.standard_normal(pending.size) ** 2
        mu_y = mu * y
        prop = mu + 0.5 * mu * mu_y - 0.5 * mu * np.sqrt(4.0 * mu_y + mu_y * mu_y)
        flip = gen.random(pending.size) > mu / (mu + prop)
        prop[flip] = mu[flip] ** 2 / prop[flip]
        ok = prop <= t
        x[pending[ok]] = prop[ok]
        pending = pending[~ok]
    return x


def _draw_jstar(z, gen):
    out = np.empty_like(z)
    pending = np.arange(z.size)
    while pending.size:
        zp = z[pending]
        fz = 0.125 * math.pi**2 + 0.5 * zp * zp
        x = np.empty_like(zp)
        right = gen.random(zp.size) < _right_mass(zp)
        x[right] = _TRUNC + gen.standard_exponential(int(right.sum())) / fz[right]
        left = ~right
        if left.any():
            x[left] = _truncated_inverse_gaussian(zp[left], gen)

        s = _series_coef(0, x)
        y = gen.random(zp.size) * s
        undecided = np.ones(zp.size, dtype=bool)
        accepted = np.zeros(zp.size, dtype=bool)
        n = 0
        while undecided.any():
            n += 1
            if n > _MAX_SERIES_TERMS:
                break
            idx = np.flatnonzero(undecided)
            coef = _series_coef(n, x[idx])
            if n % 2:
                s[idx] -= coef
                hit = y[idx] <= s[idx]
                accepted[idx[hit]] = True
                undecided[idx[hit]] = False
            else:
                s[idx] += coef
                undecided[idx[y[idx] > s[idx]]] = False
        out[pending[accepted]] = x[accepted]
        pending = pending[~accepted]
    return out


def sample_pg1(c, rng):
    """Exact draws from PG(1, c); ``c`` may be a scalar or an array."""
    gen = as_generator(rng)
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ValueError("PG tilt parameter must be finite")
    z = 0.5 * np.abs(c).ravel()
    draws = 0.25 * _draw_jstar(z, gen)
    if c.ndim == 0:
        return float(draws[0])
    return draws.reshape(c.shape)


def sample_pg(b, c, rng):
    """PG(b, c) for integer b as a sum of b independent PG(1, c) draws."""
    if int(b) != b or b < 1:
        raise ValueError("b must be a positive integer")
    gen = as_generator(rng)
    c = np.asarray(c, dtype=float)
    total = sum(np.asarray(sample_pg1(c, gen)) for _ in range(int(b)))
    return float(total) if c.ndim == 0 else total


def sample_pg_oracle(b, c, terms, rng, size=None):
    """Truncated Gamma-convolution approximation to PG(b, c).

    omega ~= 1/(2 pi^2) sum_{k=1..terms} Ga(b, 1) / ((k - 1/2)^2 + c^2 / (4 pi^2))

    The truncation only drops positive terms, so the draws are biased low and
    the bias shrinks monotonically as ``terms`` grows.
    """
    if terms < 1:
        raise ValueError("terms must be >= 1")
    gen = as_generator(rng)
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    k = np.arange(1, terms + 1)
    denom = (k - 0.5) ** 2 + float(c) ** 2 / (4.0 * math.pi**2)
    g = gen.gamma(float(b), 1.0, size=shape + (terms,))
    out = (g / denom).sum(axis=-1) / (2.0 * math.pi**2)
    return float(out) if size is None else out
