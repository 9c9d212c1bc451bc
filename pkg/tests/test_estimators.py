import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_grad, rel_err
from rpg_lab.diagnostics import (LogitPolicy, SineSystem, chain_toy, random_toy, relaxed_objective,
                                 sample_toy)
from rpg_lab.dynamics import TvLinearModel
from rpg_lab.envs import make_env
from rpg_lab.estimators import (CemDistribution, Trajectory, ValueBaseline, annotate, cem_iteration, cem_noise,
                                pathwise_gradient, reinforce_gradient, rollout_objective, rpg_gradient, rpg_single)
from rpg_lab.nn import ContractError, MlpParams, rng_fork
from rpg_lab.policy import DiscretePolicy
from rpg_lab.trainer import sample_trajectories


def test_trajectory_shape_checks():
    with pytest.raises(ContractError):
        Trajectory(np.zeros((3, 2)), np.zeros(3), np.zeros(3), np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ContractError):
        Trajectory(np.zeros((3, 2)), np.zeros(2), np.zeros(2), np.zeros((3, 1)), np.zeros(3))


def _toy_trajs(n=200, seed=0):
    toy = chain_toy()
    pol = LogitPolicy(np.array([0.4]))
    return toy, pol, sample_toy(toy, pol, n, rng_fork(seed, "chain"))


def test_forward_and_adjoint_agree():
    rng = rng_fork(0, "modes")
    for _ in range(10):
        toy, pol = random_toy(rng)
        trajs = sample_toy(toy, pol, 5, rng)
        model = TvLinearModel(rng.normal(size=(toy.horizon, 2, 2)), np.zeros((toy.horizon, 2, toy.n_actions)),
                              np.zeros((toy.horizon, 2)), np.zeros((toy.horizon, 2, 2)))
        for tr in trajs:
            assert np.allclose(rpg_single(tr, model, mode="forward"), rpg_single(tr, model, mode="adjoint"),
                               rtol=1e-10, atol=1e-12)


def _decayed_oracle(tr, model, decay):
    # double sum over (action step s, reward step t) with explicit propagators
    fhat = tr.states[1:] - tr.states[:-1]
    g = np.zeros(tr.logp_grad_phi.shape[1])
    for s in range(tr.length):
        col = fhat[s]
        for t in range(s + 1, tr.length + 1):
            g += (tr.reward_grads[t] @ col) * tr.logp_grad_phi[s]
            if t < tr.length:
                col = decay * (model.A[t] @ col + fhat[t] * (tr.logp_grad_x[t] @ col))
    return g


@pytest.mark.parametrize("decay", [1.0, 0.9, 0.5])
def test_credit_decay_matches_double_sum(decay):
    rng = rng_fork(1, "decay")
    for _ in range(5):
        toy, pol = random_toy(rng)
        model = TvLinearModel(rng.normal(size=(toy.horizon, 2, 2)), np.zeros((toy.horizon, 2, toy.n_actions)),
                              np.zeros((toy.horizon, 2)), np.zeros((toy.horizon, 2, 2)))
        for tr in sample_toy(toy, pol, 3, rng):
            want = _decayed_oracle(tr, model, decay)
            for mode in ("forward", "adjoint"):
                assert np.allclose(rpg_single(tr, model, mode=mode, decay=decay), want, rtol=1e-10, atol=1e-12)


def test_credit_decay_range():
    toy, pol, trajs = _toy_trajs(2)
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError, match="decay"):
            rpg_gradient(trajs, toy.exact_model(), decay=bad)


def test_rpg_zero_reward_gradient():
    toy, pol, trajs = _toy_trajs(20)
    for tr in trajs:
        tr.reward_grads[:] = 0.0
    assert not rpg_gradient(trajs, toy.exact_model()).grad.any()


def test_rpg_zero_horizon():
    pol = LogitPolicy(np.array([0.1]))
    tr = Trajectory(np.zeros((1, 1)), np.zeros(0, dtype=int), np.zeros(0), np.ones((1, 1)), np.zeros(1))
    annotate(tr, pol)
    assert not rpg_gradient([tr], chain_toy().exact_model()).grad.any()


def test_rpg_shape_mismatch():
    toy, pol, trajs = _toy_trajs(2)
    bad = TvLinearModel(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), np.zeros((3, 2)), np.zeros((3, 2, 2)))
    with pytest.raises(ContractError):
        rpg_gradient(trajs, bad)
    short = TvLinearModel(np.ones((2, 1, 1)), np.zeros((2, 1, 2)), np.zeros((2, 1)), np.zeros((2, 1, 1)))
    with pytest.raises(ContractError):
        rpg_gradient(trajs, short)


def test_rpg_chain_monte_carlo_matches_relaxed_objective():
    toy, pol, trajs = _toy_trajs(100_000, seed=3)
    est = rpg_gradient(trajs, toy.exact_model())
    fd = fd_grad(lambda v: relaxed_objective(toy, LogitPolicy(v)), pol.theta)
    se = np.sqrt(est.variance / est.n_traj)
    assert np.all(np.abs(est.grad - fd) <= 3 * se)


def test_rpg_model_baseline_is_unbiased():
    toy, pol, trajs = _toy_trajs(50_000, seed=4)
    model = toy.exact_model()
    a = rpg_gradient(trajs, model, baseline="delta")
    b = rpg_gradient(trajs, model, baseline="model")
    se = np.sqrt(a.variance / a.n_traj + b.variance / b.n_traj)
    assert np.all(np.abs(a.grad - b.grad) <= 3 * se + 1e-12)


def test_rpg_truncated_episode_uses_own_length(rng):
    env = make_env("cartpole")
    pol = DiscretePolicy(MlpParams.init([4, 8, 2], rng), 1.0)
    trajs = sample_trajectories(pol, env, 4, rng, horizon=60)
    T = max(tr.length for tr in trajs)
    model = TvLinearModel(np.repeat(np.eye(4)[None], T, 0), np.zeros((T, 4, 2)), np.zeros((T, 4)),
                          np.zeros((T, 4, 4)))
    est = rpg_gradient(trajs, model)
    assert np.all(np.isfinite(est.grad)) and est.n_traj == 4


def test_reinforce_zero_rewards():
    toy, pol, trajs = _toy_trajs(10)
    for tr in trajs:
        tr.rewards[:] = 0.0
    assert not reinforce_gradient(trajs).grad.any()


def test_reinforce_bandit():
    r = np.array([1.0, 3.0])
    pol = LogitPolicy(np.array([0.3]))
    rng = rng_fork(0, "bandit")
    a = pol.sample_action(np.zeros((100_000, 1)), rng)
    trajs = []
    for ai in a:
        tr = Trajectory(np.zeros((2, 1)), np.array([ai]), np.array([r[ai]]), np.zeros((2, 1)), np.zeros(2))
        trajs.append(annotate(tr, pol))
    est = reinforce_gradient(trajs)
    p = pol._p()
    exact = p[0] * p[1] * (r[1] - r[0])
    assert abs(est.grad[0] - exact) <= 3 * np.sqrt(est.variance[0] / est.n_traj)
    shifted = reinforce_gradient(trajs, baseline=2.0)
    se = np.sqrt(shifted.variance[0] / shifted.n_traj)
    assert abs(shifted.grad[0] - exact) <= 3 * se
    assert shifted.variance[0] < est.variance[0]


def test_value_baseline_fits_returns(rng):
    env = make_env("cartpole")
    pol = DiscretePolicy(MlpParams.init([4, 16, 2], rng), 1.0)
    trajs = sample_trajectories(pol, env, 5, rng, horizon=50)
    vb = ValueBaseline(16, lr=0.05, value_scale=5.0)
    first = vb.fit(pol, trajs, 1)
    last = vb.fit(pol, trajs, 300)
    assert last < first
    assert vb.values(pol, trajs[0].states[:-1]).shape == (trajs[0].length,)


def test_pathwise_matches_fd():
    rng = rng_fork(1, "pw")
    for _ in range(20):
        sys_ = SineSystem.random(0.9, 2, 1, rng)
        p = MlpParams.init([2, 5, 1], rng)
        x0 = rng.normal(size=2)
        g = pathwise_gradient(p, sys_, x0, 6).grad
        fd = fd_grad(lambda v: rollout_objective(MlpParams.unflatten(p.sizes, v), sys_, x0, 6), p.flat())
        assert rel_err(g, fd) <= 1e-6


class Lqr1d:
    """x' = a x + b u, reward -q x^2."""
    discrete = False

    def __init__(self, a, b, q):
        self.a, self.b, self.q = a, b, q

    def dynamics(self, x, u):
        return self.a * x + self.b * u

    def jac_x(self, x, u):
        return np.array([[self.a]])

    def jac_a(self, x, u):
        return np.array([[self.b]])

    def reward(self, x):
        return -self.q * float(x[0] ** 2)

    def reward_grad(self, x):
        return -2 * self.q * x


def test_pathwise_lqr_closed_form():
    # linear policy u = k x + c: x_t = (a + b k)^t x0 + c b sum_{s<t} (a + b k)^s
    a, b, q, T, x0 = 0.9, 0.5, 1.3, 5, 0.7
    k, c = -0.4, 0.2
    sys_ = Lqr1d(a, b, q)
    p = MlpParams.unflatten([1, 1], np.array([k, c]))
    g = pathwise_gradient(p, sys_, np.array([x0]), T).grad
    m = a + b * k
    dk = dc = 0.0
    for t in range(1, T + 1):
        xt = m ** t * x0 + c * b * sum(m ** s for s in range(t))
        dxdk = t * m ** (t - 1) * b * x0 + c * b * sum(s * m ** (s - 1) * b for s in range(1, t))
        dxdc = b * sum(m ** s for s in range(t))
        dk += -2 * q * xt * dxdk
        dc += -2 * q * xt * dxdc
    assert np.allclose(g, [dk, dc], rtol=1e-12)


def test_pathwise_zero_reward_and_discrete_rejected():
    sys_ = Lqr1d(0.9, 0.5, 0.0)
    p = MlpParams.unflatten([1, 1], np.array([0.3, 0.1]))
    assert not pathwise_gradient(p, sys_, np.array([1.0]), 4).grad.any()
    with pytest.raises(ValueError):
        pathwise_gradient(p, make_env("cartpole"), np.zeros(4), 3)


def test_cem_quadratic_converges():
    target = np.array([1.0, -2.0, 0.5])
    dist = CemDistribution(np.zeros(3), np.ones(3))
    rng = rng_fork(0, "cem")
    for i in range(50):
        dist, stats = cem_iteration(dist, lambda v: -np.sum((v - target) ** 2), rng, population=100, n_elite=2,
                                    extra_var=cem_noise(i))
        assert dist.std.min() >= 1e-3
    assert np.abs(dist.mean - target).max() <= 1e-2


@pytest.mark.parametrize("seed", range(20))
def test_cem_quadratic_converges_across_seeds(seed):
    target = rng_fork(seed, "target").normal(size=4)
    dist = CemDistribution(np.zeros(4), np.ones(4))
    rng = rng_fork(seed, "cem")
    for i in range(50):
        dist, _ = cem_iteration(dist, lambda v: -np.sum((v - target) ** 2), rng, population=100, n_elite=2,
                                extra_var=cem_noise(i))
    assert np.abs(dist.mean - target).max() <= 1e-2


def test_cem_full_elite_is_sample_moments():
    rng1, rng2 = rng_fork(1, "c"), rng_fork(1, "c")
    dist = CemDistribution(np.zeros(2), np.ones(2))
    new, _ = cem_iteration(dist, lambda v: float(v.sum()), rng1, population=10, n_elite=10)
    samples = rng2.standard_normal((10, 2))
    assert np.allclose(new.mean, samples.mean(0))
    assert np.allclose(new.std, np.maximum(samples.std(0), 1e-3))


def test_cem_all_equal_widens():
    dist = CemDistribution(np.ones(2), np.full(2, 0.5))
    new, stats = cem_iteration(dist, lambda v: 3.0, rng_fork(0, "c"), population=5)
    assert stats.widened and np.array_equal(new.mean, dist.mean) and np.allclose(new.std, 0.55)


@given(seed=st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_estimators_deterministic(seed):
    toy, pol = random_toy(np.random.default_rng(seed))
    a = sample_toy(toy, pol, 4, rng_fork(seed, "d"))
    b = sample_toy(toy, pol, 4, rng_fork(seed, "d"))
    model = toy.exact_model()
    assert np.array_equal(rpg_gradient(a, model).grad, rpg_gradient(b, model).grad)
    assert np.array_equal(reinforce_gradient(a).grad, reinforce_gradient(b).grad)
