"""Deterministic classical-control tasks with true and smoothed rewards.

Every environment is a stateless object holding constants; states are plain
float64 arrays passed in and out, so ``dynamics`` / ``reward`` / ``terminal``
accept a leading batch dimension.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import constants as C


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    n_actions: int | None = None
    action_dim: int | None = None
    horizon: int = 1
    solve_threshold: float | None = None
    dt: float | None = None
    terminal_reward_only: bool = False
    # the goal is absorbing: reaching it early keeps paying for the rest of the horizon
    absorbing_goal: bool = False
    obs_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.state_dim < 1 or self.horizon < 1:
            raise ValueError(f"invalid spec {self}")
        if self.n_actions is not None and self.n_actions < 2:
            raise ValueError("discrete action spaces need at least two actions")
        if (self.n_actions is None) == (self.action_dim is None):
            raise ValueError("exactly one of n_actions / action_dim must be set")

    @property
    def discrete(self) -> bool:
        return self.n_actions is not None


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int | np.ndarray
    next_state: np.ndarray
    reward: float
    terminal: bool
    surrogate: float
    surrogate_grad: np.ndarray


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


@dataclass(frozen=True)
class SurrogateRewardSpec:
    """``scale * sigmoid(sharpness * h(s))`` for a smooth event margin ``h``.

    ``event`` maps states ``(..., n)`` to ``(h, grad_h)`` with shapes
    ``(...)`` and ``(..., n)``.
    """
    event: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    scale: float = 1.0
    sharpness: float = 10.0

    def __call__(self, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return surrogate_reward(self, state)


def surrogate_reward(spec: SurrogateRewardSpec, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, dh = spec.event(np.asarray(state, dtype=np.float64))
    z = spec.sharpness * h
    s = sigmoid(z)
    value = spec.scale * s
    # s * sigmoid(-z) avoids the cancellation in 1 - s
    grad = (spec.scale * spec.sharpness * s * sigmoid(-z))[..., None] * dh
    return value, grad


# -- mollified indicator ----------------------------------------------------

def _bump(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)
_BUMP_MASS = float(np.sum(_GL_WEIGHTS * _bump(_GL_NODES)))


def _tail(u):
    """Gauss-Legendre integral of the bump from -1 to ``u <= 0``."""
    half = 0.5 * (u + 1.0)
    nodes = half[..., None] * (_GL_NODES + 1.0) - 1.0
    return half * np.sum(_GL_WEIGHTS * _bump(nodes), axis=-1)


def _bump_cdf(u):
    """Normalised integral of the bump from -1 to ``u``; the smaller tail is
    integrated directly so values near 0 and 1 keep their relative accuracy."""
    u = np.clip(np.asarray(u, dtype=np.float64), -1.0, 1.0)
    low = _tail(-np.abs(u)) / _BUMP_MASS
    return np.clip(np.where(u <= 0.0, low, 1.0 - low), 0.0, 1.0)


@dataclass(frozen=True)
class MollifiedIndicator:
    """Smooth psi with 1_K <= psi <= 1_Omega, from convolving an enlarged K with a bump."""
    inner: tuple[float, float]
    outer: tuple[float, float]
    lo: float = field(init=False)
    hi: float = field(init=False)
    width: float = field(init=False)

    def __post_init__(self):
        a, b = self.inner
        c, d = self.outer
        eps = 0.5 * min(a - c, d - b)
        object.__setattr__(self, "width", eps)
        object.__setattr__(self, "lo", a - eps)
        object.__setattr__(self, "hi", b + eps)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        e = self.width
        return _bump_cdf((self.hi - x) / e) - _bump_cdf((self.lo - x) / e)

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        e = self.width
        return (_bump((self.lo - x) / e) - _bump((self.hi - x) / e)) / (e * _BUMP_MASS)


def mollified_indicator_1d(inner: Sequence[float], outer: Sequence[float]) -> MollifiedIndicator:
    a, b = map(float, inner)
    c, d = map(float, outer)
    if not (a <= b):
        raise ValueError(f"empty inner interval {inner}")
    if not (c < a and b < d):
        raise ValueError(f"inner interval {inner} is not inside the open interval {outer}")
    return MollifiedIndicator((a, b), (c, d))


# -- environments -----------------------------------------------------------

class Env:
    spec: EnvSpec
    constants: dict
    surrogate_terms: tuple[SurrogateRewardSpec, ...] = ()

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def reset_batch(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return np.stack([self.reset(rng) for _ in range(batch)])

    def dynamics(self, state: np.ndarray, action) -> np.ndarray:
        raise NotImplementedError

    def reward(self, state, action, next_state, t_next=None) -> np.ndarray:
        raise NotImplementedError

    def terminal(self, next_state) -> np.ndarray:
        return np.zeros(np.shape(next_state)[:-1], dtype=bool)

    def surrogate(self, state) -> tuple[np.ndarray, np.ndarray]:
        """Smoothed reward and its state gradient, summed over the surrogate terms."""
        state = np.asarray(state, dtype=np.float64)
        value = np.zeros(state.shape[:-1])
        grad = np.zeros_like(state)
        for term in self.surrogate_terms:
            v, g = surrogate_reward(term, state)
            value = value + v
            grad = grad + g
        return value, grad

    def check_action(self, action):
        a = np.asarray(action)
        if self.spec.discrete:
            if not np.issubdtype(a.dtype, np.integer) or np.any(a < 0) or np.any(a >= self.spec.n_actions):
                raise ValueError(f"invalid action {action!r} for {self.spec.n_actions} actions")
        return a

    def step(self, state, action, t: int = 0) -> Transition:
        state = np.asarray(state, dtype=np.float64)
        if not np.all(np.isfinite(state)):
            raise ValueError("non-finite state")
        a = self.check_action(action)
        nxt = self.dynamics(state, a)
        term = bool(self.terminal(nxt))
        r = float(self.reward(state, a, nxt, t + 1))
        sv, sg = self.surrogate(nxt)
        act = int(a) if self.spec.discrete else a
        return Transition(state, act, nxt, r, term, float(sv), sg)

    def constants_json(self) -> str:
        return json.dumps({"env_id": self.spec.env_id, **self.constants}, indent=2, sort_keys=True)


class CartPole(Env):
    def __init__(self, sharpness: float = 10.0, horizon: int | None = None):
        k = self.constants = dict(C.CARTPOLE)
        self.spec = EnvSpec("cartpole", 4, n_actions=2, horizon=horizon or k["horizon"],
                            solve_threshold=k["solve_threshold"], dt=k["tau"],
                            obs_scale=(1.0, 1.0, 1.0, 1.0))
        th, xt = k["theta_threshold"], k["x_threshold"]

        def angle_margin(s):
            g = np.zeros_like(s)
            g[..., 2] = -2.0 * s[..., 2] / th ** 2
            return 1.0 - (s[..., 2] / th) ** 2, g

        def track_margin(s):
            g = np.zeros_like(s)
            g[..., 0] = -2.0 * s[..., 0] / xt ** 2
            return 1.0 - (s[..., 0] / xt) ** 2, g

        self.surrogate_terms = (SurrogateRewardSpec(angle_margin, 0.5, sharpness),
                                SurrogateRewardSpec(track_margin, 0.5, sharpness))

    def reset(self, rng):
        r = self.constants["init_range"]
        return rng.uniform(-r, r, size=4)

    def dynamics(self, state, action):
        k = self.constants
        s = np.asarray(state, dtype=np.float64)
        x, x_dot, theta, theta_dot = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
        force = np.where(np.asarray(action) == 1, k["force_mag"], -k["force_mag"])
        total_mass = k["masspole"] + k["masscart"]
        pml = k["masspole"] * k["length"]
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + pml * theta_dot ** 2 * sin) / total_mass
        theta_acc = (k["gravity"] * sin - cos * temp) / (
            k["length"] * (4.0 / 3.0 - k["masspole"] * cos ** 2 / total_mass))
        x_acc = temp - pml * theta_acc * cos / total_mass
        tau = k["tau"]
        return np.stack([x + tau * x_dot, x_dot + tau * x_acc,
                         theta + tau * theta_dot, theta_dot + tau * theta_acc], axis=-1)

    def terminal(self, s):
        k = self.constants
        s = np.asarray(s)
        return (np.abs(s[..., 0]) > k["x_threshold"]) | (np.abs(s[..., 2]) > k["theta_threshold"])

    def reward(self, state, action, next_state, t_next=None):
        return np.ones(np.shape(next_state)[:-1])


class MountainCar(Env):
    def __init__(self, sharpness: float = 10.0, horizon: int | None = None):
        k = self.constants = dict(C.MOUNTAINCAR)
        self.spec = EnvSpec("mountaincar", 2, n_actions=3, horizon=horizon or k["horizon"],
                            absorbing_goal=True, obs_scale=(1.0, 1.0))
        goal = k["goal_position"]

        def goal_margin(s):
            g = np.zeros_like(s)
            g[..., 0] = 1.0
            return s[..., 0] - goal, g

        self.surrogate_terms = (SurrogateRewardSpec(goal_margin, 1.0, sharpness),)

    def reset(self, rng):
        k = self.constants
        return np.array([rng.uniform(k["init_low"], k["init_high"]), 0.0])

    def dynamics(self, state, action):
        k = self.constants
        s = np.asarray(state, dtype=np.float64)
        pos, vel = s[..., 0], s[..., 1]
        vel = vel + (np.asarray(action) - 1) * k["force"] + np.cos(3 * pos) * (-k["gravity"])
        vel = np.clip(vel, -k["max_speed"], k["max_speed"])
        pos = np.clip(pos + vel, k["min_position"], k["max_position"])
        vel = np.where((pos == k["min_position"]) & (vel < 0), 0.0, vel)
        return np.stack([pos, vel], axis=-1)

    def terminal(self, s):
        k = self.constants
        s = np.asarray(s)
        return (s[..., 0] >= k["goal_position"]) & (s[..., 1] >= k["goal_velocity"])

    def reward(self, state, action, next_state, t_next=None):
        return -np.ones(np.shape(next_state)[:-1])


class Acrobot(Env):
    """Acrobot on the 6-d observation (cos t1, sin t1, cos t2, sin t2, dt1, dt2).

    The observation determines the underlying angles, so the map from
    observation to next observation is deterministic and free of angle wrapping.
    """

    def __init__(self, sharpness: float = 10.0, horizon: int | None = None):
        k = self.constants = dict(C.ACROBOT)
        self.spec = EnvSpec("acrobot", 6, n_actions=3, horizon=horizon or k["horizon"],
                            solve_threshold=k["solve_threshold"], dt=k["dt"], absorbing_goal=True,
                            obs_scale=(1.0, 1.0, 1.0, 1.0, 1.0, 1.0))

        def tip_margin(s):
            c1, s1, c2, s2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
            h = -c1 - (c1 * c2 - s1 * s2) - 1.0
            g = np.zeros_like(s)
            g[..., 0] = -1.0 - c2
            g[..., 1] = s2
            g[..., 2] = -c1
            g[..., 3] = s1
            return h, g

        self.surrogate_terms = (SurrogateRewardSpec(tip_margin, 1.0, sharpness),)

    @staticmethod
    def to_obs(q):
        return np.stack([np.cos(q[..., 0]), np.sin(q[..., 0]), np.cos(q[..., 1]),
                         np.sin(q[..., 1]), q[..., 2], q[..., 3]], axis=-1)

    @staticmethod
    def to_angles(obs):
        return np.stack([np.arctan2(obs[..., 1], obs[..., 0]), np.arctan2(obs[..., 3], obs[..., 2]),
                         obs[..., 4], obs[..., 5]], axis=-1)

    def reset(self, rng):
        r = self.constants["init_range"]
        return self.to_obs(rng.uniform(-r, r, size=4))

    def _dsdt(self, q, torque):
        k = self.constants
        m1, m2 = k["link_mass_1"], k["link_mass_2"]
        l1, lc1, lc2 = k["link_length_1"], k["link_com_pos_1"], k["link_com_pos_2"]
        i1 = i2 = k["link_moi"]
        g = k["gravity"]
        t1, t2, dt1, dt2 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
        d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * np.cos(t2)) + i1 + i2
        d2 = m2 * (lc2 ** 2 + l1 * lc2 * np.cos(t2)) + i2
        phi2 = m2 * lc2 * g * np.cos(t1 + t2 - np.pi / 2.0)
        phi1 = (-m2 * l1 * lc2 * dt2 ** 2 * np.sin(t2) - 2 * m2 * l1 * lc2 * dt2 * dt1 * np.sin(t2)
                + (m1 * lc1 + m2 * l1) * g * np.cos(t1 - np.pi / 2) + phi2)
        ddt2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dt1 ** 2 * np.sin(t2) - phi2) / (
            m2 * lc2 ** 2 + i2 - d2 ** 2 / d1)
        ddt1 = -(d2 * ddt2 + phi1) / d1
        return np.stack([dt1, dt2, ddt1, ddt2], axis=-1)

    def dynamics(self, state, action):
        k = self.constants
        q = self.to_angles(np.asarray(state, dtype=np.float64))
        torque = np.asarray(k["torques"])[np.asarray(action)]
        dt = k["dt"]
        k1 = self._dsdt(q, torque)
        k2 = self._dsdt(q + dt / 2 * k1, torque)
        k3 = self._dsdt(q + dt / 2 * k2, torque)
        k4 = self._dsdt(q + dt * k3, torque)
        q = q + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        q = np.stack([q[..., 0], q[..., 1], np.clip(q[..., 2], -k["max_vel_1"], k["max_vel_1"]),
                      np.clip(q[..., 3], -k["max_vel_2"], k["max_vel_2"])], axis=-1)
        return self.to_obs(q)

    def terminal(self, s):
        s = np.asarray(s)
        c1, s1, c2, s2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
        return -c1 - (c1 * c2 - s1 * s2) > 1.0

    def reward(self, state, action, next_state, t_next=None):
        return np.where(self.terminal(next_state), 0.0, -1.0)


class HandMass(Env):
    """Hand holding a spring attached to a mass; state (x0, y0, x, y, vx, vy).

    Actions move the hand by a fixed step in +x, -x, +y, -y. The mass follows
    a damped spring with semi-implicit Euler. Reward is paid at the horizon only.
    """

    MOVES = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

    def __init__(self, sharpness: float = 10.0, horizon: int | None = None,
                 target: Sequence[float] | None = None):
        k = self.constants = dict(C.HANDMASS)
        if target is not None:
            k["target"] = tuple(float(v) for v in target)
        self.spec = EnvSpec("handmass", 6, n_actions=4, horizon=horizon or k["horizon"],
                            dt=k["dt"], terminal_reward_only=True, obs_scale=(1.0,) * 6)

    def reset(self, rng):
        return np.zeros(6)

    def dynamics(self, state, action):
        k = self.constants
        s = np.asarray(state, dtype=np.float64)
        hand = s[..., 0:2] + k["hand_step"] * self.MOVES[np.asarray(action)]
        pos, vel = s[..., 2:4], s[..., 4:6]
        acc = (k["spring_k"] * (hand - pos) - k["damping"] * vel) / k["mass"]
        vel = vel + k["dt"] * acc
        pos = pos + k["dt"] * vel
        return np.concatenate([hand, pos, vel], axis=-1)

    def final_reward(self, s):
        """Terminal reward and its state gradient."""
        s = np.asarray(s, dtype=np.float64)
        xt, yt = self.constants["target"]
        r = -(s[..., 2] - xt) ** 2 - (s[..., 3] - yt) ** 2 - s[..., 0] ** 2 - s[..., 1] ** 2
        g = np.zeros_like(s)
        g[..., 0] = -2 * s[..., 0]
        g[..., 1] = -2 * s[..., 1]
        g[..., 2] = -2 * (s[..., 2] - xt)
        g[..., 3] = -2 * (s[..., 3] - yt)
        return r, g

    def reward(self, state, action, next_state, t_next=None):
        r, _ = self.final_reward(next_state)
        if t_next is None:
            return r
        return np.where(np.asarray(t_next) >= self.spec.horizon, r, 0.0)

    def surrogate(self, state):
        # the true terminal reward is already smooth
        return self.final_reward(state)


ENV_IDS = ("cartpole", "acrobot", "mountaincar", "handmass")


def make_env(env_id: str, **kw) -> Env:
    classes = {"cartpole": CartPole, "acrobot": Acrobot, "mountaincar": MountainCar, "handmass": HandMass}
    if env_id not in classes:
        raise ValueError(f"unknown env id {env_id!r}; expected one of {', '.join(ENV_IDS)}")
    return classes[env_id](**kw)
