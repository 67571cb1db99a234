import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from ovepg.errors import InvalidArgument
from ovepg.likelihoods import log_lik_data
from ovepg.metrics import (
    PredictionRecord,
    auroc,
    calibration,
    confidence_histogram,
    elbo,
    gaussian_cross_entropy,
    gaussian_entropy,
    moment_match,
    out_of_episode_scores,
)
from ovepg.kernels import KernelSpec, build_block_kernel
from ovepg.rng import make_generator


def _kl(m0, S0, m1, S1):
    d = m0.size
    S1inv = np.linalg.inv(S1)
    diff = m1 - m0
    return 0.5 * (np.trace(S1inv @ S0) + diff @ S1inv @ diff - d + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])


def _spd(gen, d):
    B = gen.normal(size=(d, d))
    return B @ B.T + 0.5 * np.eye(d)


# ---- calibration ---------------------------------------------------------------


def test_perfect_predictions():
    rep = calibration(np.eye(3), np.arange(3))
    assert (rep.ece, rep.mce, rep.brier, rep.accuracy) == (0.0, 0.0, 0.0, 1.0)


def test_single_occupied_bin():
    recs = [PredictionRecord(np.array([0.9, 0.1]), 0), PredictionRecord(np.array([0.9, 0.1]), 1)]
    rep = calibration(recs)
    assert rep.ece == pytest.approx(0.4) and rep.mce == pytest.approx(0.4)
    assert sum(b["count"] > 0 for b in rep.bins) == 1
    assert rep.bins[8]["count"] == 2  # 0.9 sits at the closed right edge of (0.8, 0.9]


def test_uniform_five_class_brier(frozen):
    rep = calibration(np.full((5, 5), 0.2), np.arange(5))
    assert rep.brier == pytest.approx(frozen["uniform_5_class_brier"], abs=1e-12)
    assert round(rep.brier, 3) == 0.8


def test_calibration_errors():
    with pytest.raises(InvalidArgument):
        calibration([])
    with pytest.raises(InvalidArgument):
        calibration(np.full((2, 2), 0.5), np.array([0]))
    with pytest.raises(InvalidArgument):
        calibration(np.full((2, 2), 0.5), np.array([0, 1]), bins=0)
    with pytest.raises(InvalidArgument):
        PredictionRecord(np.array([0.5, 0.6]), 0)


@given(st.integers(1, 40), st.integers(2, 5), st.integers(1, 20), st.integers(0, 2**32 - 1))
@settings(max_examples=60)
def test_calibration_invariants(n, C, bins, seed):
    gen = np.random.default_rng(seed)
    P = gen.dirichlet(np.ones(C), size=n)
    y = gen.integers(0, C, size=n)
    rep = calibration(P, y, bins=bins)
    assert 0.0 <= rep.ece <= rep.mce + 1e-15 <= 1.0 + 1e-15
    assert sum(b["count"] for b in rep.bins) == n
    assert rep.bins[0]["lower"] == 0.0 and rep.bins[-1]["upper"] == 1.0
    perm = gen.permutation(n)
    rep2 = calibration(P[perm], y[perm], bins=bins)
    assert (rep2.ece, rep2.mce, rep2.brier) == (rep.ece, rep.mce, rep.brier)
    assert calibration(P, y, bins=bins).to_dict() == rep.to_dict()


@pytest.mark.parametrize("p", [0.2, 0.5, 0.8])
def test_brier_is_proper(p):
    # ten records whose empirical class-0 frequency is exactly p
    y = np.array([0] * round(10 * p) + [1] * round(10 * (1 - p)))
    scores = {}
    for q in np.round(np.linspace(0.0, 1.0, 21), 10):
        P = np.tile([q, 1 - q], (10, 1))
        scores[q] = calibration(P, y).brier
    assert min(scores, key=scores.get) == pytest.approx(p)


# ---- ELBO ---------------------------------------------------------------------------


def test_kl_identity():
    gen = np.random.default_rng(0)
    for d in (1, 3, 6):
        mq, Sq, mp, Sp = gen.normal(size=d), _spd(gen, d), gen.normal(size=d), _spd(gen, d)
        val = gaussian_cross_entropy(mq, Sq, mp, Sp) + gaussian_entropy(Sq)
        assert val == pytest.approx(-_kl(mq, Sq, mp, Sp), abs=1e-8)


def test_block_kernel_covariance_accepted():
    X = np.random.default_rng(1).normal(size=(3, 2))
    K = build_block_kernel(KernelSpec("rbf"), X, 2)
    m = np.zeros(6)
    assert gaussian_entropy(K) == pytest.approx(gaussian_entropy(K.dense()), abs=1e-10)
    S = _spd(np.random.default_rng(2), 6)
    assert gaussian_cross_entropy(m, S, m, K) == pytest.approx(gaussian_cross_entropy(m, S, m, K.dense()), abs=1e-10)


def test_elbo_prior_q_with_flat_likelihood():
    gen = np.random.default_rng(3)
    S = _spd(gen, 4)
    m = gen.normal(size=4)
    val = elbo(m, S, m, S, np.array([0, 1]), 50, make_generator(0), lik=lambda F: -1.25)
    assert val == pytest.approx(-1.25, abs=1e-10)


def test_elbo_conjugate_posterior_beats_prior():
    gen = np.random.default_rng(4)
    for _ in range(5):
        N, C = 3, 2
        X = gen.normal(size=(N, 2))
        labels = np.array([0, 1, 1])
        K = build_block_kernel(KernelSpec("rbf"), X, C).dense()
        t = np.where(np.arange(C)[:, None] == labels[None], 1.0, -1.0).ravel()
        post_cov = np.linalg.inv(np.linalg.inv(K) + np.eye(C * N))
        post_mean = post_cov @ t
        prior_mean = np.zeros(C * N)
        post = elbo(post_mean, post_cov, prior_mean, K, labels, 4000, make_generator(5), lik="gaussian")
        prior = elbo(prior_mean, K, prior_mean, K, labels, 4000, make_generator(5), lik="gaussian")
        # for the conjugate model the exact posterior attains the log evidence
        evidence = multivariate_normal(np.zeros(C * N), K + np.eye(C * N)).logpdf(t)
        assert post >= prior
        assert post == pytest.approx(evidence, abs=0.05)


def test_elbo_below_softmax_evidence():
    axis = np.linspace(-9, 9, 901)
    F1, F2 = np.meshgrid(axis, axis, indexing="ij")
    dens = np.exp(-0.5 * (F1**2 + F2**2)) / (2 * math.pi)
    lik = 1 / (1 + np.exp(F2 - F1))
    cell = (axis[1] - axis[0]) ** 2
    log_evidence = math.log(np.sum(dens * lik) * cell)
    w = dens * lik / np.sum(dens * lik)
    mean = np.array([np.sum(w * F1), np.sum(w * F2)])
    cov = np.array([[np.sum(w * F1 * F1), np.sum(w * F1 * F2)], [np.sum(w * F1 * F2), np.sum(w * F2 * F2)]]) - np.outer(mean, mean)
    for q_mean, q_cov in ((mean, cov), (np.zeros(2), np.eye(2)), (mean + 0.5, 0.5 * cov)):
        val = elbo(q_mean, q_cov, np.zeros(2), np.eye(2), np.array([0]), 100_000, make_generator(6))
        assert val <= log_evidence + 1e-3


def test_elbo_softmax_term_matches_direct_average():
    gen = np.random.default_rng(7)
    m, S = gen.normal(size=4), _spd(gen, 4)
    labels = np.array([1, 0])
    val = elbo(m, S, np.zeros(4), np.eye(4), labels, 1000, make_generator(8))
    draws = m + make_generator(8).standard_normal((1000, 4)) @ np.linalg.cholesky(S).T
    ll = np.mean([log_lik_data("softmax", d.reshape(2, 2).T, labels) for d in draws])
    assert val == pytest.approx(ll - _kl(m, S, np.zeros(4), np.eye(4)), abs=1e-8)


def test_elbo_rejects_non_spd():
    with pytest.raises(InvalidArgument):
        elbo(np.zeros(2), -np.eye(2), np.zeros(2), np.eye(2), np.array([0]), 10, make_generator(0))


# ---- moment matching ------------------------------------------------------------------


def test_moment_match_examples():
    m, S = moment_match(np.ones((5, 3)))
    assert np.allclose(m, 1.0) and np.allclose(S, 1e-8 * np.eye(3))
    draws = make_generator(9).standard_normal((100_000, 3))
    m, S = moment_match(draws)
    assert np.all(np.abs(m) < 0.02) and np.allclose(S, np.eye(3), atol=0.05)
    with pytest.raises(InvalidArgument):
        moment_match(np.zeros((3, 3)))


def test_moment_match_affine_equivariance():
    gen = np.random.default_rng(10)
    s = gen.normal(size=(50, 3))
    B, c = gen.normal(size=(3, 3)), gen.normal(size=3)
    m, S = moment_match(s, reg=0.0)
    m2, S2 = moment_match(s @ B.T + c, reg=0.0)
    assert np.allclose(m2, B @ m + c) and np.allclose(S2, B @ S @ B.T)


# ---- prior confidence ---------------------------------------------------------------------


def test_confidence_histogram_schema_and_bounds():
    res = confidence_histogram("softmax", 5, 5000, make_generator(11))
    assert res["confidences"].min() >= 0.2
    assert res["counts"].sum() == 5000 and len(res["edges"]) == 51
    assert set(res["quantiles"]) == {"0.05", "0.25", "0.5", "0.75", "0.95"}


def test_prior_confidence_findings():
    res = {k: confidence_histogram(k, 5, 50_000, make_generator(12)) for k in ("softmax", "ove", "lsm", "gaussian")}
    assert res["lsm"]["frac_above_0.45"] < 0.02
    assert res["ove"]["mean"] > res["softmax"]["mean"]
    assert res["gaussian"]["mean"] > res["softmax"]["mean"]


def test_confidence_histogram_rejects_zero_sims():
    with pytest.raises(InvalidArgument):
        confidence_histogram("ove", 3, 0, make_generator(0))


# ---- AUROC ------------------------------------------------------------------------------------


def test_auroc_examples(frozen):
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == frozen["auroc_example"]
    with pytest.raises(InvalidArgument):
        auroc([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auroc_matches_pair_enumeration(rows):
    scores = np.array([r[0] for r in rows], dtype=float)
    labels = np.array([r[1] for r in rows], dtype=int)
    if labels.min() == labels.max():
        return
    pos, neg = scores[labels == 1], scores[labels == 0]
    pairs = (pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()
    assert auroc(scores, labels) == pytest.approx(pairs / (pos.size * neg.size))


def test_out_of_episode_scores():
    assert np.array_equal(out_of_episode_scores(np.array([[1.0, 3.0], [-2.0, -1.0]])), [-3.0, 1.0])
