import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.stats import multivariate_normal

from gscem.inference import (StateContexts, accumulate, batch_moments,
                             build_state_contexts, cholesky_jitter,
                             dump_state_weights, log_likelihood,
                             point_log_likelihoods, point_moments,
                             posterior_over_states)
from gscem.model import (PI_FLOOR, InputError, ModelParams, NumericalError,
                         random_gsc_params, sample_gsc)

import oracles


def _params(rng, D, H):
    return ModelParams(*oracles.random_params(rng, D, H))


def test_empty_state_context():
    p = ModelParams([[1.0, 2.0], [0.5, -1.0]], [[2.0, 0.3], [0.3, 1.0]], [0.4, 0.6])
    c = build_state_contexts(p)[0]
    assert c.Lambda_active.shape == (0, 0)
    assert c.gain_active.shape == (0, 2)
    assert_allclose(c.C, p.Sigma)
    assert c.log_det_C == pytest.approx(np.linalg.slogdet(p.Sigma)[1], abs=1e-14)


def test_scalar_hand_values():
    # W=2, Sigma=1: C = 5, Lambda = (4 + 1)^-1, gain = 0.2 * 2 * 1
    ctx = build_state_contexts(ModelParams([[2.0]], [[1.0]], [0.5]))[1]
    assert_allclose(ctx.C, [[5.0]], rtol=1e-15)
    assert_allclose(ctx.Lambda_active, [[0.2]], rtol=1e-15)
    assert_allclose(ctx.gain_active, [[0.4]], rtol=1e-15)
    assert ctx.log_det_C == pytest.approx(np.log(5.0), abs=1e-15)
    assert ctx.log_prior == pytest.approx(np.log(0.5))
    assert_allclose(ctx.chol_C, [[np.sqrt(5.0)]])


def test_all_on_single_state(rng):
    p = ModelParams(rng.standard_normal((3, 2)), np.eye(3), [1.0, 1.0])
    contexts = build_state_contexts(p)
    finite = [np.isfinite(c.log_prior) for c in contexts]
    assert finite == [False, False, False, True]
    assert_allclose(contexts[3].C, p.W @ p.W.T + np.eye(3))
    post = posterior_over_states(contexts, rng.standard_normal(3))
    assert post.weights[3] == 1.0


@pytest.mark.parametrize("D,H", [(1, 1), (2, 2), (3, 2), (2, 3), (4, 3)])
def test_contexts_match_dense_formulas(rng, D, H):
    p = _params(rng, D, H)
    Sinv = np.linalg.inv(p.Sigma)
    for ctx in build_state_contexts(p):
        a = list(ctx.state.active_set)
        Wa = p.W[:, a]
        C = Wa @ Wa.T + p.Sigma
        assert ctx.log_det_C == pytest.approx(np.linalg.slogdet(C)[1], abs=1e-12)
        if a:
            Lam = np.linalg.inv(Wa.T @ Sinv @ Wa + np.eye(len(a)))
            assert_allclose(ctx.Lambda_active, Lam, atol=1e-12)
            assert_allclose(ctx.gain_active, Lam @ Wa.T @ Sinv, atol=1e-12)
            ev = np.linalg.eigvalsh(ctx.Lambda_active)
            assert np.all(ev > 0) and np.all(ev <= 1 + 1e-12)


def test_orthonormal_weight_ratio():
    # y = 0, Sigma = I, orthonormal W: weight ratio k-active / empty = 2^(-k/2)
    Q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((4, 3)))
    contexts = build_state_contexts(ModelParams(Q, np.eye(4), [0.5] * 3))
    post = posterior_over_states(contexts, np.zeros(4))
    w = post.weights
    for i, k in enumerate(contexts.popcount):
        assert w[i] / w[0] == pytest.approx(2.0 ** (-k / 2), rel=1e-12)


def test_weights_match_density_products(rng):
    p = _params(rng, 2, 2)
    y = rng.standard_normal(2)
    post = posterior_over_states(build_state_contexts(p), y)
    dens = []
    for s in oracles.all_states(2):
        Ws = p.W * s
        dens.append(np.exp(oracles.log_prior(s, p.pi))
                    * multivariate_normal(np.zeros(2), Ws @ Ws.T + p.Sigma).pdf(y))
    dens = np.array(dens)
    assert_allclose(post.weights, dens / dens.sum(), rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_posterior_invariants(seed):
    rng = np.random.default_rng(seed)
    D, H = rng.integers(1, 5, size=2)
    p = _params(rng, D, H)
    post = posterior_over_states(build_state_contexts(p), rng.standard_normal(D) * 3)
    assert abs(np.logaddexp.reduce(post.log_weights)) < 1e-10
    from gscem.model import state_bits
    assert np.all(post.kappa[state_bits(H) == 0] == 0.0)


def test_non_finite_observation():
    contexts = build_state_contexts(ModelParams(np.eye(2), np.eye(2), [0.5, 0.5]))
    with pytest.raises(InputError):
        posterior_over_states(contexts, [np.nan, 0.0])
    with pytest.raises(InputError):
        point_moments(contexts, [1.0, 2.0, 3.0])


def test_floor_pi_reduces_to_noise(rng):
    p = ModelParams(rng.standard_normal((3, 2)), np.eye(3), [PI_FLOOR, PI_FLOOR])
    y = rng.standard_normal(3)
    m = point_moments(build_state_contexts(p), y)
    assert np.all(np.abs(m.Es) < 1e-5)
    assert np.all(np.abs(m.Esz) < 1e-4)
    assert np.all(np.abs(m.Eszsz) < 1e-4)
    assert m.log_lik == pytest.approx(multivariate_normal(np.zeros(3), np.eye(3)).logpdf(y),
                                      abs=1e-5)


def test_all_on_matches_ppca_posterior(rng):
    W = rng.standard_normal((4, 2))
    Sigma = np.diag(rng.uniform(0.5, 2.0, 4))
    y = rng.standard_normal(4)
    m = point_moments(build_state_contexts(ModelParams(W, Sigma, [1.0, 1.0])), y)
    Sinv = np.linalg.inv(Sigma)
    Lam = np.linalg.inv(W.T @ Sinv @ W + np.eye(2))
    assert_allclose(m.Esz, Lam @ W.T @ Sinv @ y, atol=1e-12)
    assert_allclose(m.Eszsz, Lam + np.outer(m.Esz, m.Esz), atol=1e-12)
    assert_allclose(m.Es, [1.0, 1.0])


def test_masking_exact_zero_rows():
    # pi_2 = 0 removes every state with s_2 = 1
    p = ModelParams(np.ones((2, 3)), np.eye(2), [0.5, 0.5, 0.0])
    m = point_moments(build_state_contexts(p), [1.0, -2.0])
    assert m.Es[2] == 0.0
    assert np.all(m.Eszsz[2] == 0.0) and np.all(m.Eszsz[:, 2] == 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_moment_invariants(seed):
    rng = np.random.default_rng(100 + seed)
    D, H = rng.integers(1, 5, size=2)
    p = _params(rng, D, H)
    Y = 2 * rng.standard_normal((25, D))
    Es, Esz, Eszsz, _ = batch_moments(build_state_contexts(p), Y)
    assert np.all((Es >= 0) & (Es <= 1))
    for n in range(len(Y)):
        assert_allclose(Eszsz[n], Eszsz[n].T, atol=1e-12)
        assert np.linalg.eigvalsh(Eszsz[n]).min() >= -1e-9
        assert np.all(np.abs(Esz[n]) <= np.sqrt(np.diag(Eszsz[n])) + 1e-9)


@pytest.mark.parametrize("D,H", [(2, 2), (3, 3), (2, 1), (3, 2)])
def test_brute_force_oracle(rng, D, H):
    p = _params(rng, D, H)
    contexts = build_state_contexts(p)
    for _ in range(3):
        y = 2 * rng.standard_normal(D)
        m = point_moments(contexts, y)
        Es, Esz, Eszsz, ll, _ = oracles.brute_moments(p.W, p.Sigma, p.pi, y)
        assert_allclose(m.Es, Es, atol=1e-10)
        assert_allclose(m.Esz, Esz, atol=1e-10)
        assert_allclose(m.Eszsz, Eszsz, atol=1e-10)
        assert m.log_lik == pytest.approx(ll, abs=1e-10)


def test_quadrature_oracle_2d():
    rng = np.random.default_rng(7)
    p = _params(rng, 2, 2)
    y = rng.standard_normal(2)
    m = point_moments(build_state_contexts(p), y)
    Es, Esz, Eszsz, ll = oracles.quadrature_moments(p.W, p.Sigma, p.pi, y)
    assert_allclose(m.Es, Es, atol=1e-6)
    assert_allclose(m.Esz, Esz, atol=1e-6)
    assert_allclose(m.Eszsz, Eszsz, atol=1e-6)
    assert m.log_lik == pytest.approx(ll, abs=1e-6)


@pytest.mark.parametrize("H", [1, 2, 3])
def test_likelihood_equals_mixture_density(rng, H):
    p = _params(rng, 3, H)
    Y = rng.standard_normal((40, 3))
    ref = oracles.mixture_loglik(p.W, p.Sigma, p.pi, Y)
    assert_allclose(point_log_likelihoods(p, Y), ref, rtol=0, atol=1e-10)
    assert log_likelihood(p, Y) == pytest.approx(ref.sum(), abs=1e-9)


def test_likelihood_all_on_gaussian(rng):
    p = ModelParams(rng.standard_normal((3, 2)), np.diag([1.0, 0.5, 2.0]), [1.0, 1.0])
    Y = rng.standard_normal((50, 3))
    ref = multivariate_normal(np.zeros(3), p.W @ p.W.T + p.Sigma).logpdf(Y).sum()
    assert log_likelihood(p, Y) == pytest.approx(ref, abs=1e-10)


def test_likelihood_floor_pi_noise(rng):
    p = ModelParams(rng.standard_normal((3, 2)), np.eye(3), [PI_FLOOR] * 2)
    Y = rng.standard_normal((50, 3))
    ref = multivariate_normal(np.zeros(3), np.eye(3)).logpdf(Y).sum()
    assert abs(log_likelihood(p, Y) - ref) < 1e-6 * 50


def test_likelihood_sum_of_point_moments(rng):
    p = _params(rng, 3, 2)
    Y = rng.standard_normal((10, 3))
    contexts = build_state_contexts(p)
    total = sum(point_moments(contexts, y).log_lik for y in Y)
    assert log_likelihood(p, Y) == pytest.approx(total, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(c=st.floats(0.1, 10.0), seed=st.integers(0, 10_000))
def test_scale_consistency(c, seed):
    rng = np.random.default_rng(seed)
    D, H = 3, 2
    p = _params(rng, D, H)
    y = rng.standard_normal(D)
    L = np.linalg.cholesky(p.Sigma)
    q = ModelParams(c * p.W, (c * L) @ (c * L).T, p.pi)
    a = posterior_over_states(build_state_contexts(p), y)
    b = posterior_over_states(build_state_contexts(q), c * y)
    assert_allclose(b.weights, a.weights, atol=1e-9)
    shift = log_likelihood(q, c * y[None]) - log_likelihood(p, y[None])
    assert shift == pytest.approx(-D * np.log(c), abs=1e-9)


def test_accumulate_matches_point_sums(rng):
    p = _params(rng, 3, 3)
    Y = rng.standard_normal((30, 3))
    contexts = build_state_contexts(p)
    acc = accumulate(contexts, Y)
    pm = [point_moments(contexts, y) for y in Y]
    assert_allclose(acc["sum_s"], sum(m.Es for m in pm), atol=1e-12)
    assert_allclose(acc["sum_y_xT"], sum(np.outer(y, m.Esz) for y, m in zip(Y, pm)), atol=1e-12)
    assert_allclose(acc["sum_xxT"], sum(m.Eszsz for m in pm), atol=1e-12)
    assert_allclose(acc["sum_yyT"], Y.T @ Y)
    assert acc["n_points"] == 30
    assert acc["total_log_lik"] == pytest.approx(sum(m.log_lik for m in pm), abs=1e-10)


def test_accumulate_chunking_is_exact_up_to_rounding(rng, monkeypatch):
    import gscem.inference as inf
    p = _params(rng, 3, 3)
    Y = rng.standard_normal((257, 3))
    full = accumulate(StateContexts(p), Y)
    monkeypatch.setattr(inf, "_CHUNK_ELEMENTS", 8 * 3 * 16)
    chunked = accumulate(StateContexts(p), Y)
    for key in ("sum_y_xT", "sum_xxT", "sum_s"):
        assert_allclose(chunked[key], full[key], rtol=1e-12)
    again = accumulate(StateContexts(p), Y)
    assert np.array_equal(again["sum_xxT"], chunked["sum_xxT"])


def test_high_dim_no_underflow():
    p = random_gsc_params(30, 3, seed=2)
    ds = sample_gsc(p, 20, seed=3)
    ll = point_log_likelihoods(p, 50 * ds.Y)
    assert np.all(np.isfinite(ll))


def test_cholesky_jitter():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = cholesky_jitter(A)
    assert_allclose(L @ L.T, A, atol=1e-8)
    with pytest.raises(NumericalError, match="my matrix"):
        cholesky_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]), "my matrix")


def test_dump_state_weights(tmp_path, rng):
    p = _params(rng, 2, 2)
    path = tmp_path / "w.csv"
    dump_state_weights(build_state_contexts(p), [0.3, -1.0], path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["state_index", "popcount", "log_weight"]
    assert [r[1] for r in rows[1:]] == ["0", "1", "1", "2"]
    assert np.exp([float(r[2]) for r in rows[1:]]).sum() == pytest.approx(1.0)
