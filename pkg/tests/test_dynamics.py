import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpg_lab.dynamics import (GmmPrior, TvLinearModel, _conditional, encode_actions, fit_dynamics, gmm_inference,
                              gmm_loglik, state_jacobian, update_gmm_prior)
from rpg_lab.nn import rng_fork


def linear_data(rng, T=3, n=2, d_a=2, N=12, discrete=None, noise=0.0):
    A = rng.normal(size=(T, n, n))
    k = discrete or d_a
    B = rng.normal(size=(T, n, k))
    c = rng.normal(size=(T, n))
    per_t = []
    for t in range(T):
        x = rng.normal(size=(N, n))
        if discrete:
            u = rng.integers(discrete, size=N)
            ue = encode_actions(u, discrete)
        else:
            u = rng.normal(size=(N, d_a))
            ue = u
        xn = x @ A[t].T + ue @ B[t].T + c[t] + noise * rng.normal(size=(N, n))
        per_t.append((x, u, xn))
    return A, B, c, per_t


def test_encode_actions_one_hot():
    e = encode_actions(np.array([0, 2, 1, 2]), 3)
    assert np.array_equal(e.sum(axis=1), np.ones(4))
    assert np.array_equal(np.argmax(e, axis=1), [0, 2, 1, 2])


def test_noiseless_recovery_continuous(rng):
    A, B, c, data = linear_data(rng)
    m = fit_dynamics(None, data)
    assert np.abs(m.A - A).max() <= 1e-6
    assert np.abs(m.B - B).max() <= 1e-6
    assert np.abs(m.c - c).max() <= 1e-6


def test_noiseless_recovery_discrete(rng):
    A, B, c, data = linear_data(rng, discrete=3, N=20)
    m = fit_dynamics(None, data, n_actions=3)
    assert np.abs(m.A - A).max() <= 1e-6
    # one-hot columns are only identified up to a shift shared with the intercept
    pred = m.B + m.c[:, :, None]
    assert np.abs(pred - (B + c[:, :, None])).max() <= 1e-6


def test_constant_next_state(rng):
    data = [(rng.normal(size=(10, 2)), rng.normal(size=(10, 1)), np.tile([0.3, -1.0], (10, 1)))]
    m = fit_dynamics(None, data)
    assert np.abs(m.A).max() <= 1e-10 and np.abs(m.B).max() <= 1e-10
    assert np.allclose(m.c[0], [0.3, -1.0])


def test_zero_prior_weight_equals_ols(rng):
    _, _, _, data = linear_data(rng, noise=0.1, N=30)
    prior = update_gmm_prior(None, np.concatenate([np.concatenate([x, u, xn], 1) for x, u, xn in data]),
                             rng_fork(0, "g"), n_components=2)
    with_prior = fit_dynamics(prior, data, prior_strength=0.0)
    tiny = fit_dynamics(prior, data, prior_strength=1e-12)
    for t, (x, u, xn) in enumerate(data):
        X = np.concatenate([x, u, np.ones((len(x), 1))], 1)
        coef, *_ = np.linalg.lstsq(X, xn, rcond=None)
        for m in (with_prior, tiny):
            assert np.abs(m.A[t] - coef[:2].T).max() <= 1e-8
            assert np.abs(m.B[t] - coef[2:4].T).max() <= 1e-8
            assert np.abs(m.c[t] - coef[4]).max() <= 1e-8


def test_strong_prior_gives_prior_conditional(rng):
    d = 5  # x (2), u (1), x' (2)
    L = rng.normal(size=(d, d))
    mean = rng.normal(size=d)
    prior = GmmPrior(np.ones(1), mean[None], (L @ L.T + np.eye(d))[None])
    x, u, xn = rng.normal(size=(1, 2)), rng.normal(size=(1, 1)), rng.normal(size=(1, 2))
    m = fit_dynamics(prior, [(x, u, xn)], prior_strength=1e8, reg=0.0)
    coef, icpt, _ = _conditional(prior.means[0], prior.covs[0], 3, 0.0, 0, 0, [])
    assert np.abs(m.A[0] - coef[:, :2]).max() <= 1e-6
    assert np.abs(m.B[0] - coef[:, 2:]).max() <= 1e-6
    assert np.abs(m.c[0] - icpt).max() <= 1e-6


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_covariance_psd_and_finite(seed):
    rng = np.random.default_rng(seed)
    _, _, _, data = linear_data(rng, N=int(rng.integers(1, 8)), noise=0.05, discrete=2)
    z = np.concatenate([np.concatenate([x, encode_actions(u, 2), xn], 1) for x, u, xn in data])
    prior = update_gmm_prior(None, z, rng, n_components=2)
    m = fit_dynamics(prior, data, n_actions=2)
    for F in m.F:
        assert np.allclose(F, F.T)
        assert np.linalg.eigvalsh(F).min() >= 1e-6 * (1 - 1e-6)
    assert all(np.all(np.isfinite(arr)) for arr in (m.A, m.B, m.c, m.F))


def test_identity_dynamics(rng):
    data = []
    for _ in range(4):
        x = rng.normal(size=(15, 3))
        data.append((x, rng.integers(2, size=15), x.copy()))
    m = fit_dynamics(None, data, n_actions=2)
    for t in range(4):
        assert np.allclose(state_jacobian(m, t), np.eye(3), atol=1e-8)


def test_state_jacobian_bounds(rng):
    _, _, _, data = linear_data(rng)
    m = fit_dynamics(None, data)
    with pytest.raises(IndexError):
        state_jacobian(m, m.horizon)
    with pytest.raises(IndexError):
        state_jacobian(m, -1)


def test_step_function_dynamics_bracketed(rng):
    # x' = 1[x > 0]: one-sided slopes are zero, the fit smooths the jump into a finite positive slope
    x = rng.uniform(-1, 1, size=(200, 1))
    xn = (x > 0).astype(float)
    m = fit_dynamics(None, [(x, np.zeros((200, 1)), xn)])
    a = m.A[0, 0, 0]
    assert np.isfinite(a) and 0.0 < a < 1.0 / (2 * 0.05)


def test_kinked_dynamics_between_one_sided_slopes(rng):
    x = rng.uniform(-1, 1, size=(200, 1))
    xn = np.where(x > 0, 2.0 * x, 0.5 * x)
    m = fit_dynamics(None, [(x, np.zeros((200, 1)), xn)])
    assert 0.5 <= m.A[0, 0, 0] <= 2.0


def test_singular_regressors_logged(rng):
    x = np.tile(rng.normal(size=(1, 2)), (5, 1))
    m = fit_dynamics(None, [(x, np.zeros(5, dtype=int), x + 1.0)], n_actions=2)
    assert m.events and "ridge" in m.events[0]
    assert np.all(np.isfinite(m.A))


def test_fit_rejects_empty_timestep():
    with pytest.raises(ValueError):
        fit_dynamics(None, [(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 2)))])


def test_model_json(rng):
    _, _, _, data = linear_data(rng)
    doc = json.loads(fit_dynamics(None, data).to_json())
    assert doc["horizon"] == 3 and len(doc["steps"]) == 3 and len(doc["steps"][0]["A"]) == 2


def test_gmm_single_component_closed_form(rng):
    z = rng.normal(size=(200, 3)) @ rng.normal(size=(3, 3))
    g = update_gmm_prior(None, z, rng, n_components=1, reg=1e-6)
    assert np.allclose(g.means[0], z.mean(axis=0))
    assert np.allclose(g.covs[0], np.cov(z.T, bias=True) + 1e-6 * np.eye(3), atol=1e-10)
    assert g.weights[0] == pytest.approx(1.0)


def test_gmm_recovers_separated_means():
    rng = rng_fork(5, "gmm-sep")
    a = rng.normal(size=(300, 2)) * 0.3 + np.array([-4.0, 0.0])
    b = rng.normal(size=(300, 2)) * 0.3 + np.array([4.0, 1.0])
    g = update_gmm_prior(None, np.concatenate([a, b]), rng, n_components=2, max_iter=200, tol=1e-10)
    got = g.means[np.argsort(g.means[:, 0])]
    assert np.abs(got - [[-4.0, 0.0], [4.0, 1.0]]).max() <= 0.1


@given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_gmm_em_monotone(seed, k):
    rng = np.random.default_rng(seed)
    z = np.concatenate([rng.normal(size=(40, 3)) + rng.normal(scale=3, size=3) for _ in range(3)])
    g = update_gmm_prior(None, z, rng, n_components=k, max_iter=40, tol=0.0)
    obj = np.array(g.objective)
    assert np.all(np.diff(obj) >= -1e-9 * np.maximum(1.0, np.abs(obj[:-1])))
    ll = np.array(g.loglik)
    assert np.all(np.diff(ll) >= -1e-9 * np.maximum(1.0, np.abs(ll[:-1])))


def test_gmm_weights_and_covs_valid(rng):
    z = rng.normal(size=(50, 4))
    g = update_gmm_prior(None, z, rng, n_components=8)
    assert np.all(g.weights >= 0) and g.weights.sum() == pytest.approx(1.0)
    for c in g.covs:
        assert np.allclose(c, c.T) and np.linalg.eigvalsh(c).min() > 0


def test_gmm_warm_start_and_reinit(rng):
    z = rng.normal(size=(60, 2))
    g = update_gmm_prior(None, z, rng, n_components=2)
    far = GmmPrior(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [1e3, 1e3]]), np.repeat(np.eye(2)[None], 2, 0))
    g2 = update_gmm_prior(far, z, rng, n_components=2)
    assert any("reinitialised" in e for e in g2.events)
    assert np.all(np.isfinite(g2.means))
    assert gmm_loglik(g2, z) >= gmm_loglik(far, z)
    g3 = update_gmm_prior(g, z, rng, n_components=2)
    assert gmm_loglik(g3, z) >= gmm_loglik(g, z) - 1e-9


def test_gmm_inference_collapse(rng):
    g = GmmPrior(np.array([0.5, 0.5]), np.array([[0.0], [2.0]]), np.array([[[1.0]], [[1.0]]]))
    mu, phi = gmm_inference(g, np.array([[1.0]]))
    assert mu == pytest.approx([1.0]) and phi[0, 0] == pytest.approx(2.0)


def test_gmm_rejects_empty(rng):
    with pytest.raises(ValueError):
        update_gmm_prior(None, np.zeros((0, 3)), rng)
