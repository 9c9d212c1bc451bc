"""Policy-gradient estimators: relaxed policy gradient, REINFORCE (+ value
baseline), exact pathwise derivatives for differentiable systems, and CEM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import TvLinearModel
from .nn import AdamState, ContractError, MlpParams, adam_step, mlp_backward, mlp_forward

ESTIMATORS = ("rpg", "reinforce", "a2c", "cem", "pathwise")


@dataclass
class Trajectory:
    """One episode.

    ``rewards[t]`` is the true reward of transition ``t`` (paid on ``x_{t+1}``);
    ``reward_grads[t]`` is the surrogate-reward gradient at ``x_t``. The log-prob
    gradients are cached for ``(x_t, a_t)``, ``t < length``.
    """
    states: np.ndarray  # (L+1, n)
    actions: np.ndarray  # (L,) or (L, d_a)
    rewards: np.ndarray  # (L,)
    reward_grads: np.ndarray  # (L+1, n)
    surrogate: np.ndarray  # (L+1,)
    logp_grad_phi: np.ndarray | None = None  # (L, P)
    logp_grad_x: np.ndarray | None = None  # (L, n)
    probs: np.ndarray | None = None  # (L, |A|) for discrete policies
    terminated: bool = False

    def __post_init__(self):
        n_steps = len(self.actions)
        if self.states.shape[0] != n_steps + 1 or len(self.rewards) != n_steps:
            raise ContractError("trajectory arrays have inconsistent lengths")
        if self.reward_grads.shape != self.states.shape:
            raise ContractError("reward gradients must align with states")
        for arr in (self.logp_grad_phi, self.logp_grad_x):
            if arr is not None and arr.shape[0] != n_steps:
                raise ContractError("cached log-prob gradients must align with actions")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def surrogate_return(self) -> float:
        return float(np.sum(self.surrogate[1:]))


def annotate(traj: Trajectory, policy) -> Trajectory:
    """Fill in the cached log-prob gradients for ``traj`` under ``policy``."""
    if traj.length == 0:
        n_p = policy.params.n_params
        traj.logp_grad_phi = np.zeros((0, n_p))
        traj.logp_grad_x = np.zeros((0, traj.states.shape[1]))
        return traj
    _, gphi, gx = policy.log_prob_grads(traj.states[:-1], traj.actions)
    traj.logp_grad_phi = gphi
    traj.logp_grad_x = gx
    if policy.discrete:
        traj.probs = policy.probs(traj.states[:-1])
    return traj


@dataclass
class GradEstimate:
    grad: np.ndarray
    n_traj: int
    variance: np.ndarray
    mean_return: float = float("nan")
    per_traj: np.ndarray | None = field(default=None, repr=False)

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def _combine(per_traj: np.ndarray, returns) -> GradEstimate:
    m = per_traj.shape[0]
    grad = per_traj.mean(axis=0)
    var = per_traj.var(axis=0, ddof=1) if m > 1 else np.zeros_like(grad)
    return GradEstimate(grad, m, var, float(np.mean(returns)) if len(returns) else float("nan"), per_traj)


# -- relaxed policy gradient ------------------------------------------------------

def _state_deltas(traj: Trajectory, model: TvLinearModel, baseline: str):
    x = traj.states
    if baseline == "delta":
        return x[1:] - x[:-1]
    if baseline == "model":
        if traj.probs is None:
            raise ContractError("model baseline needs cached action probabilities")
        L = traj.length
        pred = (np.einsum("tij,tj->ti", model.A[:L], x[:-1]) + np.einsum("tij,tj->ti", model.B[:L], traj.probs)
                + model.c[:L])
        return x[1:] - pred
    raise ValueError(f"unknown state-delta baseline {baseline!r}")


def rpg_single(traj: Trajectory, model: TvLinearModel, baseline: str = "delta", mode: str = "adjoint",
               decay: float = 1.0):
    """Relaxed policy gradient of one trajectory.

    ``forward`` carries the full Jacobian of the state w.r.t. the parameters,
    ``J_{t+1} = A_t J_t + f_t (grad_phi log pi + grad_x log pi . J_t)^T`` with
    ``f_t = x_{t+1} - x_t``, and accumulates ``sum_t grad_x r(x_t) . J_t``.
    ``adjoint`` computes the same sum with a backward sweep over ``n``-vectors.

    ``decay < 1`` shrinks the propagated part of the Jacobian by ``decay`` per
    step, so a reward ``k`` steps after an action gets weight ``decay**(k-1)``.
    ``decay = 1`` is the exact estimator.
    """
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    L = traj.length
    n = traj.states.shape[1]
    if traj.logp_grad_phi is None or traj.logp_grad_x is None:
        raise ContractError("trajectory has no cached log-prob gradients")
    n_params = traj.logp_grad_phi.shape[1]
    if L == 0:
        return np.zeros(n_params)
    if model.state_dim != n:
        raise ContractError(f"model state dim {model.state_dim} != trajectory state dim {n}")
    if model.horizon < L:
        raise ContractError(f"model horizon {model.horizon} shorter than trajectory length {L}")
    fhat = _state_deltas(traj, model, baseline)
    gphi, gx, rg = traj.logp_grad_phi, traj.logp_grad_x, traj.reward_grads
    if mode == "forward":
        jac = np.zeros((n, n_params))  # d x_0 / d phi = 0
        g = np.zeros(n_params)
        for t in range(L):
            jac = decay * (model.A[t] @ jac + np.outer(fhat[t], gx[t] @ jac)) + np.outer(fhat[t], gphi[t])
            g += rg[t + 1] @ jac
        return g
    if mode != "adjoint":
        raise ValueError(f"unknown mode {mode!r}")
    weights = np.empty(L)
    lam = rg[L].copy()
    for t in range(L - 1, -1, -1):
        weights[t] = lam @ fhat[t]
        lam = rg[t] + decay * (model.A[t].T @ lam + gx[t] * (fhat[t] @ lam))
    return weights @ gphi


def rpg_gradient(trajectories, model: TvLinearModel, baseline: str = "delta",
                 mode: str = "adjoint", decay: float = 1.0) -> GradEstimate:
    if not trajectories:
        raise ValueError("no trajectories")
    per = np.stack([rpg_single(tr, model, baseline, mode, decay) for tr in trajectories])
    return _combine(per, [tr.total_reward for tr in trajectories])


# -- REINFORCE --------------------------------------------------------------------

def reward_to_go(rewards) -> np.ndarray:
    return np.cumsum(np.asarray(rewards, dtype=np.float64)[::-1])[::-1]


def reinforce_gradient(trajectories, baseline=None) -> GradEstimate:
    """``sum_t (G_t - b(x_t)) grad_phi log pi(a_t|x_t)`` averaged over trajectories.

    ``baseline`` may be ``None``, a constant, or a callable mapping a state
    array ``(L, n)`` to values ``(L,)``.
    """
    if not trajectories:
        raise ValueError("no trajectories")
    rows = []
    for tr in trajectories:
        if tr.logp_grad_phi is None:
            raise ContractError("trajectory has no cached log-prob gradients")
        if tr.length == 0:
            rows.append(np.zeros(tr.logp_grad_phi.shape[1]))
            continue
        adv = reward_to_go(tr.rewards)
        if callable(baseline):
            adv = adv - np.asarray(baseline(tr.states[:-1]), dtype=np.float64)
        elif baseline is not None:
            adv = adv - float(baseline)
        rows.append(adv @ tr.logp_grad_phi)
    return _combine(np.stack(rows), [tr.total_reward for tr in trajectories])


class ValueBaseline:
    """Linear value head on the policy network's last hidden layer.

    The trunk features are treated as fixed inputs when fitting the head, so
    only the head's weights receive value-loss gradients.
    """

    def __init__(self, n_features: int, lr: float = 1e-2, value_scale: float = 1.0):
        self.w = np.zeros(n_features + 1)
        self.opt = AdamState.zeros(n_features + 1, lr=lr)
        self.value_scale = value_scale

    @staticmethod
    def features(policy, states) -> np.ndarray:
        x = policy._scaled(states)
        _, tape = mlp_forward(policy.params, x)
        h = tape.acts[-1]
        return np.concatenate([h, np.ones((h.shape[0], 1))], axis=1)

    def values(self, policy, states) -> np.ndarray:
        return self.value_scale * (self.features(policy, states) @ self.w)

    def fit(self, policy, trajectories, steps: int = 1) -> float:
        feats, targets = [], []
        for tr in trajectories:
            if tr.length:
                feats.append(self.features(policy, tr.states[:-1]))
                targets.append(reward_to_go(tr.rewards) / self.value_scale)
        if not feats:
            return 0.0
        phi = np.concatenate(feats)
        y = np.concatenate(targets)
        loss = 0.0
        for _ in range(steps):
            err = phi @ self.w - y
            loss = float(np.mean(err ** 2))
            grad = 2.0 * phi.T @ err / len(y)
            self.w, self.opt = adam_step(self.opt, self.w, grad)
        return loss


# -- exact pathwise derivative ----------------------------------------------------

def pathwise_gradient(params: MlpParams, system, x0, horizon: int) -> GradEstimate:
    """Exact gradient of ``J = sum_{t=1..T} r(x_t)`` for ``x_{t+1} = f(x_t, pi(x_t))``.

    ``system`` must be continuous-action and expose ``dynamics``, ``jac_x``,
    ``jac_a``, ``reward`` and ``reward_grad``; ``pi`` is the network ``params``.
    """
    if getattr(system, "discrete", False) or getattr(getattr(system, "spec", None), "discrete", False):
        raise ValueError("pathwise derivatives need a continuous action space")
    x = np.asarray(x0, dtype=np.float64)
    n = x.shape[0]
    n_params = params.n_params
    d_a = params.n_out
    jac = np.zeros((n, n_params))
    g = np.zeros(n_params)
    total = 0.0
    eye = np.eye(d_a)
    for _ in range(horizon):
        a, tape = mlp_forward(params, x)
        dpi_dtheta = np.empty((d_a, n_params))
        dpi_dx = np.empty((d_a, n))
        for i in range(d_a):
            dpi_dtheta[i], dpi_dx[i] = mlp_backward(tape, eye[i])
        fx = system.jac_x(x, a)
        fa = system.jac_a(x, a)
        jac = fx @ jac + fa @ (dpi_dtheta + dpi_dx @ jac)
        x = system.dynamics(x, a)
        total += float(system.reward(x))
        g += system.reward_grad(x) @ jac
    est = GradEstimate(g, 1, np.zeros(n_params), total, g[None])
    return est


def rollout_objective(params: MlpParams, system, x0, horizon: int) -> float:
    x = np.asarray(x0, dtype=np.float64)
    total = 0.0
    for _ in range(horizon):
        a, _ = mlp_forward(params, x)
        x = system.dynamics(x, a)
        total += float(system.reward(x))
    return total


# -- cross-entropy method ---------------------------------------------------------

@dataclass(frozen=True)
class CemDistribution:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class CemStats:
    scores: np.ndarray
    elite_mean_score: float
    best_score: float
    widened: bool


def cem_noise(iteration: int, scale: float = 0.1, decay: float = 0.8) -> float:
    """Decaying extra variance that keeps a small elite set from collapsing early."""
    return scale * decay ** iteration


def cem_iteration(dist: CemDistribution, score_fn, rng: np.random.Generator, population: int = 20,
                  n_elite: int = 1, std_floor: float = 1e-3,
                  extra_var: float = 0.0) -> tuple[CemDistribution, CemStats]:
    """Sample a population, keep the ``n_elite`` best, refit a diagonal Gaussian.

    The refit variance is the elite sample variance plus ``extra_var``. If every
    candidate scores the same the mean is kept and the spread widened by 10%.
    """
    if population < 1 or not 1 <= n_elite <= population:
        raise ValueError(f"invalid population {population} / elite {n_elite}")
    samples = dist.mean + dist.std * rng.standard_normal((population, dist.mean.size))
    scores = np.array([float(score_fn(s)) for s in samples])
    if np.all(scores == scores[0]):
        new = CemDistribution(dist.mean.copy(), np.maximum(dist.std * 1.1, std_floor))
        return new, CemStats(scores, float(scores[0]), float(scores[0]), True)
    order = np.argsort(-scores, kind="stable")
    elite = samples[order[:n_elite]]
    std = np.sqrt(elite.var(axis=0) + extra_var)
    new = CemDistribution(elite.mean(axis=0), np.maximum(std, std_floor))
    return new, CemStats(scores, float(scores[order[:n_elite]].mean()), float(scores[order[0]]), False)
