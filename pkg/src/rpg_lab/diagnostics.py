"""Executable checks: finite-difference gradient suites, exact enumeration of
the relaxed-gradient expectation on tiny MDPs, the deviation bound between
true and relaxed rollouts, and surrogate-reward sandwich checks."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dynamics import TvLinearModel
from .envs import make_env, mollified_indicator_1d, sigmoid
from .estimators import Trajectory, annotate, pathwise_gradient, reinforce_gradient, rollout_objective, rpg_single
from .nn import MlpParams, mlp_backward, mlp_forward, rng_fork
from .policy import DiscretePolicy, GaussianPolicy, expected_next_state


def rel_error(a, b, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` on flattened vectors."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def central_fd(fn, x, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn`` at vector ``x``."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


# -- toy MDPs -----------------------------------------------------------------

@dataclass(frozen=True)
class ToyMdp:
    """Affine dynamics ``x' = A x + B e_a + c`` with reward ``w . x + v . sin(x)``."""
    A: np.ndarray  # (n, n)
    B: np.ndarray  # (n, |A|)
    c: np.ndarray  # (n,)
    x0: np.ndarray
    horizon: int
    w: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        n = self.A.shape[0]
        if not 1 <= n <= 2 or self.A.shape != (n, n):
            raise ValueError("toy MDPs have a 1-d or 2-d state")
        if not 2 <= self.n_actions <= 3 or not 1 <= self.horizon <= 4:
            raise ValueError("toy MDPs have 2-3 actions and horizon <= 4")

    @property
    def n_actions(self) -> int:
        return self.B.shape[1]

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def enumerable(self) -> bool:
        return self.n_actions ** self.horizon <= 100

    def dynamics(self, x, a):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.A.T + self.B[:, np.asarray(a)].T.reshape(x.shape) + self.c

    def reward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.w + np.sin(x) @ self.v

    def reward_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.w + self.v * np.cos(x)

    def exact_model(self) -> TvLinearModel:
        T, n = self.horizon, self.state_dim
        return TvLinearModel(np.repeat(self.A[None], T, 0), np.repeat(self.B[None], T, 0),
                             np.repeat(self.c[None], T, 0), np.zeros((T, n, n)))


def chain_toy(horizon: int = 3, x0: float = 0.0) -> ToyMdp:
    """``x' = x + a`` with ``a`` in {-1, +1} and reward ``x``."""
    return ToyMdp(np.eye(1), np.array([[-1.0, 1.0]]), np.zeros(1), np.array([x0]), horizon,
                  np.ones(1), np.zeros(1))


@dataclass(frozen=True)
class LogitPolicy:
    """State-independent softmax over logits ``(0, theta_1, ..., theta_{k-1}) / lam``."""
    theta: np.ndarray
    lam: float = 1.0

    discrete = True

    @property
    def n_actions(self) -> int:
        return self.theta.size + 1

    def _p(self):
        z = np.concatenate([[0.0], self.theta]) / self.lam
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def probs(self, state):
        s = np.asarray(state)
        return np.broadcast_to(self._p(), s.shape[:-1] + (self.n_actions,)).copy()

    def sample_action(self, state, rng):
        s = np.asarray(state)
        u = rng.random(s.shape[:-1])
        return (u[..., None] >= np.cumsum(self._p())[:-1]).sum(axis=-1)

    def log_prob_grads(self, state, action):
        s = np.asarray(state, dtype=np.float64)
        a = np.asarray(action).astype(int)
        p = self._p()
        onehot = np.eye(self.n_actions)[a]
        logp = np.log(p[a])
        gphi = (onehot - p)[..., 1:] / self.lam
        return logp, gphi, np.zeros_like(s)

    @property
    def params(self):
        return _Flat(self.theta)


@dataclass(frozen=True)
class _Flat:
    v: np.ndarray

    @property
    def n_params(self) -> int:
        return self.v.size


def random_toy(rng: np.random.Generator) -> tuple[ToyMdp, DiscretePolicy]:
    """Random toy on ``x = (u, p)`` plus a network policy that reads only ``u``.

    ``u' = k u + d`` ignores the action and ``p`` enters the dynamics affinely and
    the reward linearly, so the per-step action distribution along any sampled
    path is the one along the expected path.
    """
    n_a = int(rng.integers(2, 4))
    horizon = int(rng.integers(2, 5))
    k, d = rng.uniform(0.5, 1.1), rng.uniform(-0.5, 0.5)
    m, cu = rng.uniform(0.5, 1.1), rng.uniform(-0.5, 0.5)
    A = np.array([[k, 0.0], [cu, m]])
    B = np.vstack([np.zeros(n_a), rng.normal(size=n_a)])
    c = np.array([d, rng.normal(scale=0.3)])
    toy = ToyMdp(A, B, c, rng.normal(size=2), horizon, np.array([rng.normal(), rng.normal()]),
                 np.array([rng.normal(), 0.0]))
    params = MlpParams.init([2, 4, n_a], rng)
    params = MlpParams.unflatten(params.sizes, 2.0 * params.flat())
    form = "merged" if rng.random() < 0.5 else "prior"
    policy = DiscretePolicy(params, float(rng.uniform(0.5, 2.0)), form, np.array([1.0, 0.0]))
    return toy, policy


def relaxed_objective(toy: ToyMdp, policy) -> float:
    """``sum_{t=1..T} r(xbar_t)`` along the expected-dynamics rollout."""
    x = toy.x0.astype(np.float64)
    total = 0.0
    for _ in range(toy.horizon):
        x = expected_next_state(policy, toy, x)
        total += float(toy.reward(x))
    return total


def enumerate_rpg(toy: ToyMdp, policy, model: TvLinearModel | None = None) -> np.ndarray:
    """Exact ``E[g]`` by summing the estimator over all action sequences."""
    if not toy.enumerable:
        raise ValueError(f"{toy.n_actions}^{toy.horizon} action sequences is too many to enumerate")
    model = model or toy.exact_model()
    total = None
    for seq in itertools.product(range(toy.n_actions), repeat=toy.horizon):
        xs = [toy.x0.astype(np.float64)]
        prob = 1.0
        for a in seq:
            prob *= float(policy.probs(xs[-1])[a])
            xs.append(toy.dynamics(xs[-1], a))
        if prob == 0.0:
            continue
        states = np.array(xs)
        rg = np.array([toy.reward_grad(x) for x in states])
        tr = Trajectory(states, np.array(seq), np.array([toy.reward(x) for x in states[1:]]), rg,
                        np.array([toy.reward(x) for x in states]))
        annotate(tr, policy)
        g = prob * rpg_single(tr, model)
        total = g if total is None else total + g
    return total


def _param_fn(policy):
    if isinstance(policy, LogitPolicy):
        return policy.theta, lambda v: LogitPolicy(v, policy.lam)
    sizes = policy.params.sizes
    return policy.params.flat(), lambda v: policy.with_params(MlpParams.unflatten(sizes, v))


@dataclass
class UnbiasednessReport:
    expected_grad: np.ndarray
    fd_grad: np.ndarray
    rel_error: float
    n_sequences: int


def check_unbiasedness(toy: ToyMdp, policy, h: float = 1e-6) -> UnbiasednessReport:
    """Enumerated ``E[g]`` against central differences of the relaxed objective."""
    eg = enumerate_rpg(toy, policy)
    flat, rebuild = _param_fn(policy)
    fd = central_fd(lambda v: relaxed_objective(toy, rebuild(v)), flat, h)
    return UnbiasednessReport(eg, fd, rel_error(eg, fd), toy.n_actions ** toy.horizon)


def unbiasedness_suite(n_toys: int = 20, seed: int = 0) -> list[UnbiasednessReport]:
    rng = rng_fork(seed, "toys")
    return [check_unbiasedness(*random_toy(rng)) for _ in range(n_toys)]


def bias_report(n_toys: int = 20, seed: int = 0) -> list[float]:
    """Same toys with the policy also reading ``p``: the sampled action distribution
    then varies across paths and enumeration departs from the relaxed gradient."""
    rng = rng_fork(seed, "toys")
    errs = []
    for _ in range(n_toys):
        toy, pol = random_toy(rng)
        errs.append(check_unbiasedness(toy, DiscretePolicy(pol.params, pol.lam, pol.form, None)).rel_error)
    return errs


# -- variance comparison ------------------------------------------------------

@dataclass
class VarianceReport:
    var_rpg: np.ndarray
    var_reinforce: np.ndarray
    mean_rpg: np.ndarray
    mean_reinforce: np.ndarray
    n: int
    p_value: np.ndarray
    passed: bool


def chain_variance(theta: float = 0.3, n: int = 20000, seed: int = 0, horizon: int = 3) -> VarianceReport:
    """Per-trajectory RPG and REINFORCE estimates on the chain at equal sample counts.

    Passes unless RPG's variance is significantly larger (one-sided F test, 5%).
    """
    toy = chain_toy(horizon)
    pol = LogitPolicy(np.array([theta]))
    model = toy.exact_model()
    rng = rng_fork(seed, "chain")
    trajs = sample_toy(toy, pol, n, rng)
    g_rpg = np.stack([rpg_single(tr, model) for tr in trajs])
    g_rf = reinforce_gradient(trajs).per_traj
    v1, v2 = g_rpg.var(axis=0, ddof=1), g_rf.var(axis=0, ddof=1)
    p = stats.f.sf(v1 / np.maximum(v2, 1e-300), n - 1, n - 1)
    return VarianceReport(v1, v2, g_rpg.mean(0), g_rf.mean(0), n, p, bool(np.all(p > 0.05)))


def sample_toy(toy: ToyMdp, policy, n: int, rng: np.random.Generator) -> list[Trajectory]:
    xs = np.repeat(toy.x0[None].astype(np.float64), n, 0)
    states, actions = [xs], []
    for _ in range(toy.horizon):
        a = policy.sample_action(xs, rng)
        xs = toy.dynamics(xs, a)
        states.append(xs)
        actions.append(a)
    S = np.stack(states, 1)
    Acts = np.stack(actions, 1)
    out = []
    for i in range(n):
        st = S[i]
        rew = toy.reward(st)
        tr = Trajectory(st, Acts[i], rew[1:], np.array([toy.reward_grad(x) for x in st]), rew)
        annotate(tr, policy)
        out.append(tr)
    return out


# -- deviation bound ----------------------------------------------------------

@dataclass(frozen=True)
class SineSystem:
    """``x' = rho * sin(U x + V a + w)`` with spectral norms of U, V at most one,
    hence ``rho``-Lipschitz in ``(x, a)`` under the sum of norms."""
    rho: float
    U: np.ndarray
    V: np.ndarray
    w: np.ndarray
    discrete = False

    @classmethod
    def random(cls, rho: float, n: int, d_a: int, rng: np.random.Generator) -> "SineSystem":
        U = rng.normal(size=(n, n))
        V = rng.normal(size=(n, d_a))
        return cls(rho, U / np.linalg.norm(U, 2), V / np.linalg.norm(V, 2), rng.normal(size=n))

    def dynamics(self, x, a):
        return self.rho * np.sin(np.asarray(x) @ self.U.T + np.asarray(a) @ self.V.T + self.w)

    def relaxed(self, x, mean, lam: float):
        """Exact expectation of ``dynamics`` for ``a ~ N(mean, lam^2 I)``."""
        damp = np.exp(-0.5 * lam ** 2 * np.sum(self.V ** 2, axis=1))
        return self.rho * damp * np.sin(np.asarray(x) @ self.U.T + np.asarray(mean) @ self.V.T + self.w)

    def jac_x(self, x, a):
        return (self.rho * np.cos(self.U @ x + self.V @ a + self.w))[:, None] * self.U

    def jac_a(self, x, a):
        return (self.rho * np.cos(self.U @ x + self.V @ a + self.w))[:, None] * self.V

    def reward(self, x):
        return -float(np.sum(np.asarray(x) ** 2))

    def reward_grad(self, x):
        return -2.0 * np.asarray(x)


@dataclass(frozen=True)
class TanhPolicy:
    """``pi(x) = rho_p * tanh(W x + b)`` with ``||W||_2 <= 1``."""
    rho_p: float
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def random(cls, rho_p: float, n: int, d_a: int, rng: np.random.Generator) -> "TanhPolicy":
        W = rng.normal(size=(d_a, n))
        return cls(rho_p, W / np.linalg.norm(W, 2), rng.normal(size=d_a))

    def __call__(self, x):
        return self.rho_p * np.tanh(np.asarray(x) @ self.W.T + self.b)


@dataclass(frozen=True)
class BoundExperiment:
    rho: float
    rho_p: float
    lam: float
    rollouts: int = 1000
    horizon: int = 20
    state_dim: int = 2
    action_dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.alpha >= 1.0:
            raise ValueError(f"alpha = rho (rho' + 1) = {self.alpha:.3f} must be < 1")
        if self.lam < 0 or self.rollouts < 2:
            raise ValueError("invalid experiment")

    @property
    def alpha(self) -> float:
        return self.rho * (self.rho_p + 1.0)

    @property
    def M(self) -> float:
        return self.action_dim * self.lam ** 2

    @property
    def bound(self) -> float:
        return float(np.sqrt(self.M) / (1.0 - self.alpha))


@dataclass
class BoundReport:
    exp: BoundExperiment
    mean: float
    se: float
    bound: float
    deviations: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.mean <= self.bound + 3 * self.se


def bound_deviations(exp: BoundExperiment) -> np.ndarray:
    """``||x_T - xtilde_T||`` per rollout: true dynamics under the deterministic
    policy against expected dynamics under ``N(pi(x), lam^2 I)``; ``x_0`` is random."""
    rng = rng_fork(exp.seed, "bound-system")
    system = SineSystem.random(exp.rho, exp.state_dim, exp.action_dim, rng)
    pol = TanhPolicy.random(exp.rho_p, exp.state_dim, exp.action_dim, rng)
    x = rng_fork(exp.seed, "bound-x0").normal(size=(exp.rollouts, exp.state_dim))
    xt = x.copy()
    for _ in range(exp.horizon):
        x = system.dynamics(x, pol(x))
        xt = system.relaxed(xt, pol(xt), exp.lam)
    return np.linalg.norm(x - xt, axis=1)


def check_bound(exp: BoundExperiment) -> BoundReport:
    d = bound_deviations(exp)
    return BoundReport(exp, float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size)), exp.bound, d)


BOUND_GRID = [(rho, rho_p, lam) for rho in (0.3, 0.6) for rho_p in (0.2, 0.5) for lam in (0.01, 0.1, 0.3)]


def bound_suite(rollouts: int = 1000, seed: int = 0) -> list[BoundReport]:
    return [check_bound(BoundExperiment(r, rp, lam, rollouts, seed=seed)) for r, rp, lam in BOUND_GRID]


def deviation_monotone(rho: float, rho_p: float, lams=(0.0, 0.01, 0.1, 0.3), rollouts: int = 1000,
                       seed: int = 0) -> tuple[bool, list[float]]:
    """Deviation non-increasing as ``lam`` shrinks: no paired difference significantly negative."""
    devs = [bound_deviations(BoundExperiment(rho, rho_p, lam, rollouts, seed=seed)) for lam in sorted(lams)]
    ok = True
    for lo, hi in zip(devs, devs[1:]):
        diff = hi - lo
        se = diff.std(ddof=1) / np.sqrt(diff.size)
        if diff.mean() < -1.645 * se:
            ok = False
    return ok, [float(d.mean()) for d in devs]


def lemma_variance_check(n_cases: int = 10, samples: int = 4000, seed: int = 0) -> list[tuple[float, float, float]]:
    """``E||X - EX|| <= sqrt(tr Sigma)`` for random Gaussians: (mean, se, sqrt tr) per case."""
    rng = rng_fork(seed, "lemma")
    out = []
    for _ in range(n_cases):
        d = int(rng.integers(1, 5))
        L = rng.normal(size=(d, d))
        cov = L @ L.T
        x = rng.multivariate_normal(np.zeros(d), cov, size=samples)
        nrm = np.linalg.norm(x, axis=1)
        out.append((float(nrm.mean()), float(nrm.std(ddof=1) / np.sqrt(samples)), float(np.sqrt(np.trace(cov)))))
    return out


# -- finite-difference suites -------------------------------------------------

@dataclass
class GradCheckReport:
    suite: str
    cases: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def _check_mlp(rng, cases, h):
    worst = 0.0
    for _ in range(cases):
        sizes = [int(rng.integers(1, 5)), int(rng.integers(2, 7)), int(rng.integers(2, 7)), int(rng.integers(1, 4))]
        p = MlpParams.init(sizes, rng)
        x = rng.normal(size=sizes[0])
        u = rng.normal(size=sizes[-1])
        _, tape = mlp_forward(p, x)
        gp, gx = mlp_backward(tape, u)
        fp = central_fd(lambda v: float(mlp_forward(MlpParams.unflatten(sizes, v), x)[0] @ u), p.flat(), h)
        fx = central_fd(lambda v: float(mlp_forward(p, v)[0] @ u), x, h)
        worst = max(worst, rel_error(gp, fp), rel_error(gx, fx))
    return worst


def _check_log_prob(rng, cases, h):
    worst = 0.0
    for i in range(cases):
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 4))
        p = MlpParams.init([n, 5, k], rng)
        scale = rng.uniform(0.5, 2.0, size=n)
        if i % 3 == 2:
            pol = GaussianPolicy(MlpParams.init([n, 5, k], rng), float(rng.uniform(0.3, 2.0)), scale)
            a = pol.sample_action(rng.normal(size=n), rng)
        else:
            pol = DiscretePolicy(p, float(rng.uniform(0.3, 2.0)), "merged" if i % 3 == 0 else "prior", scale)
            a = int(rng.integers(k))
        x = rng.normal(size=n)
        sizes = pol.params.sizes
        _, gphi, gx = pol.log_prob_grads(x, a)
        fphi = central_fd(lambda v: float(pol.with_params(MlpParams.unflatten(sizes, v)).log_prob_grads(x, a)[0]),
                          pol.params.flat(), h)
        fx = central_fd(lambda v: float(pol.log_prob_grads(v, a)[0]), x, h)
        worst = max(worst, rel_error(gphi, fphi), rel_error(gx, fx))
    return worst


def _check_surrogate(rng, cases, h):
    worst = 0.0
    envs = [make_env(e, sharpness=float(s)) for e in ("cartpole", "acrobot", "mountaincar", "handmass")
            for s in (1.0, 10.0)]
    for i in range(cases):
        env = envs[i % len(envs)]
        x = env.reset(rng) + 0.1 * rng.normal(size=env.spec.state_dim)
        _, g = env.surrogate(x)
        fd = central_fd(lambda v: float(env.surrogate(v)[0]), x, h)
        worst = max(worst, rel_error(g, fd))
    moll = mollified_indicator_1d((-0.5, 0.5), (-1.0, 1.0))
    for _ in range(cases):
        x = rng.uniform(-1.1, 1.1)
        fd = (moll(x + h) - moll(x - h)) / (2 * h)
        worst = max(worst, rel_error(moll.grad(x), fd, floor=1e-6))
    return worst


def _check_pathwise(rng, cases, h):
    worst = 0.0
    for _ in range(cases):
        n, d_a = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        system = SineSystem.random(0.9, n, d_a, rng)
        p = MlpParams.init([n, 4, d_a], rng)
        x0 = rng.normal(size=n)
        T = int(rng.integers(1, 6))
        g = pathwise_gradient(p, system, x0, T).grad
        fd = central_fd(lambda v: rollout_objective(MlpParams.unflatten(p.sizes, v), system, x0, T), p.flat(), h)
        worst = max(worst, rel_error(g, fd))
    return worst


GRAD_SUITES = {"mlp": _check_mlp, "log_prob": _check_log_prob, "surrogate": _check_surrogate,
               "pathwise": _check_pathwise}


def check_gradients(selector: str = "all", cases: int = 100, h: float = 1e-5, seed: int = 0,
                    tol: float = 1e-4) -> list[GradCheckReport]:
    """Central-difference comparisons for the selected suite (or ``all``)."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    names = list(GRAD_SUITES) if selector == "all" else [selector]
    out = []
    for name in names:
        if name not in GRAD_SUITES:
            raise ValueError(f"unknown gradient suite {name!r}; expected one of {', '.join(GRAD_SUITES)} or all")
        worst = GRAD_SUITES[name](rng_fork(seed, "gradcheck-" + name), cases, h)
        out.append(GradCheckReport(name, cases, worst, tol))
    return out


# -- surrogate envelopes ------------------------------------------------------

def sigmoid_envelope(alpha: float, h) -> np.ndarray:
    """Distance of ``sigmoid(alpha h)`` to the step ``1[h > 0]`` (1/2 at 0);
    equals ``sigmoid(-alpha |h|)`` and so vanishes as ``alpha`` grows for every ``h != 0``."""
    h = np.asarray(h, dtype=np.float64)
    step = np.where(h > 0, 1.0, np.where(h < 0, 0.0, 0.5))
    return np.abs(sigmoid(alpha * h) - step)


def check_sigmoid_envelope(alphas=(1.0, 10.0, 100.0), grid=None) -> bool:
    grid = np.linspace(-3, 3, 2001) if grid is None else grid
    ok = True
    prev = None
    for a in sorted(alphas):
        gap = sigmoid_envelope(a, grid)
        ok &= bool(np.all(gap <= sigmoid(-a * np.abs(grid)) + 1e-15))
        ok &= bool(np.all(gap <= 0.5 + 1e-15))
        if prev is not None:
            ok &= bool(np.all(gap <= prev + 1e-15))
        prev = gap
    return ok


def check_mollifier(inner=(-0.5, 0.5), outer=(-1.0, 1.0), n: int = 10_000) -> bool:
    psi = mollified_indicator_1d(inner, outer)
    lo, hi = outer
    span = hi - lo
    x = np.linspace(lo - 0.25 * span, hi + 0.25 * span, n)
    v = psi(x)
    ind_k = ((x >= inner[0]) & (x <= inner[1])).astype(float)
    ind_o = ((x > lo) & (x < hi)).astype(float)
    return bool(np.all(ind_k <= v) and np.all(v <= ind_o))
