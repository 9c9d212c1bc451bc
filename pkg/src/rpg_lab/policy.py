"""Relaxed stochastic policies over a deterministic MLP policy class.

Two discrete forms are provided:

* ``merged``: ``pi(a|x) = softmax(g(x) / lam)``, the temperature form used for
  training.
* ``prior``: ``pi(a|x) ∝ exp(g(x)_a + 1[a = argmax g(x)] / lam)``, where the
  deterministic policy is the argmax of the same network. The argmax is
  piecewise constant, so it contributes nothing to either gradient.

Both reduce to ``argmax g(x)`` (lowest index on ties) at ``lam = 0``.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .nn import ContractError, MlpParams, mlp_backward, mlp_forward

FORMS = ("merged", "prior")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class DeterministicPolicy:
    """Rounded policy: argmax of logits (discrete) or the mean network (continuous)."""
    params: MlpParams
    discrete: bool
    obs_scale: np.ndarray | None = None

    def act(self, state):
        x = np.asarray(state, dtype=np.float64)
        if self.obs_scale is not None:
            x = x * self.obs_scale
        out, _ = mlp_forward(self.params, x)
        if self.discrete:
            return np.argmax(out, axis=-1)
        return out


@dataclass(frozen=True)
class DiscretePolicy:
    params: MlpParams
    lam: float = 1.0
    form: str = "merged"
    obs_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown policy form {self.form!r}")
        if self.lam < 0:
            raise ValueError("stochasticity must be non-negative")
        if self.params.n_out < 2:
            raise ContractError("a discrete policy needs at least two logits")

    @property
    def n_actions(self) -> int:
        return self.params.n_out

    @property
    def state_dim(self) -> int:
        return self.params.n_in

    @property
    def discrete(self) -> bool:
        return True

    def with_params(self, params: MlpParams) -> "DiscretePolicy":
        return replace(self, params=params)

    def with_lam(self, lam: float) -> "DiscretePolicy":
        return replace(self, lam=float(lam))

    def _scaled(self, state):
        x = np.asarray(state, dtype=np.float64)
        if x.shape[-1] != self.state_dim:
            raise ContractError(f"state dimension {x.shape[-1]} != network input {self.state_dim}")
        return x * self.obs_scale if self.obs_scale is not None else x

    def logits(self, state):
        out, _ = mlp_forward(self.params, self._scaled(state))
        return out

    def _effective_logits(self, g):
        """Logits of the relaxed distribution (only valid for lam > 0)."""
        if self.form == "merged":
            return g / self.lam
        bonus = np.zeros_like(g)
        np.put_along_axis(bonus, np.argmax(g, axis=-1)[..., None], 1.0 / self.lam, axis=-1)
        return g + bonus

    def _probs_from_logits(self, g):
        if self.lam == 0.0:
            out = np.zeros_like(g)
            np.put_along_axis(out, np.argmax(g, axis=-1)[..., None], 1.0, axis=-1)
            return out
        return _softmax(self._effective_logits(g))

    def probs(self, state):
        return self._probs_from_logits(self.logits(state))

    def sample_action(self, state, rng: np.random.Generator):
        """Categorical draw; at ``lam = 0`` this is the rounded (argmax) action."""
        p = self.probs(state)
        if self.lam == 0.0:
            return np.argmax(p, axis=-1)
        u = rng.random(p.shape[:-1])
        cdf = np.cumsum(p, axis=-1)
        a = (u[..., None] >= cdf[..., :-1]).sum(axis=-1)
        return a

    def log_prob_grads(self, state, action):
        """``log pi(a|x)`` with gradients w.r.t. flat parameters and the state.

        Accepts a single state or a batch; batched parameter gradients are per sample.
        """
        x = self._scaled(state)
        g, tape = mlp_forward(self.params, x)
        a = np.asarray(action).astype(int)
        if np.any(a < 0) or np.any(a >= self.n_actions):
            raise ValueError(f"action out of range for {self.n_actions} actions")
        onehot = np.zeros_like(g)
        if g.ndim == 1:
            onehot[int(a)] = 1.0
        else:
            onehot[np.arange(g.shape[0]), a] = 1.0
        if self.lam == 0.0:
            p = self._probs_from_logits(g)
            if np.any(np.sum(onehot * p, axis=-1) < 1.0):
                raise ValueError("action has zero probability under the deterministic policy")
            logp = np.zeros(g.shape[:-1])
            cot = np.zeros_like(g)
        else:
            z = self._effective_logits(g)
            logp = np.sum(onehot * _log_softmax(z), axis=-1)
            p = _softmax(z)
            cot = onehot - p
            if self.form == "merged":
                cot = cot / self.lam
        gphi, gin = mlp_backward(tape, cot, per_sample=True)
        gx = gin * self.obs_scale if self.obs_scale is not None else gin
        return logp, gphi, gx

    def round(self) -> DeterministicPolicy:
        return DeterministicPolicy(self.params, True, self.obs_scale)

    def entropy(self, state):
        p = self.probs(state)
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)


@dataclass(frozen=True)
class GaussianPolicy:
    """``N(mean_net(x), lam^2 I)``."""
    params: MlpParams
    lam: float = 1.0
    obs_scale: np.ndarray | None = None

    @property
    def action_dim(self) -> int:
        return self.params.n_out

    @property
    def state_dim(self) -> int:
        return self.params.n_in

    @property
    def discrete(self) -> bool:
        return False

    def with_params(self, params):
        return replace(self, params=params)

    def with_lam(self, lam):
        return replace(self, lam=float(lam))

    def _scaled(self, state):
        x = np.asarray(state, dtype=np.float64)
        if x.shape[-1] != self.state_dim:
            raise ContractError(f"state dimension {x.shape[-1]} != network input {self.state_dim}")
        return x * self.obs_scale if self.obs_scale is not None else x

    def mean(self, state):
        out, _ = mlp_forward(self.params, self._scaled(state))
        return out

    def sample_action(self, state, rng: np.random.Generator):
        mu = self.mean(state)
        if self.lam == 0.0:
            return mu
        return mu + self.lam * rng.standard_normal(mu.shape)

    def log_prob_grads(self, state, action):
        if self.lam == 0.0:
            raise ValueError("log-density is undefined for a deterministic Gaussian policy")
        x = self._scaled(state)
        mu, tape = mlp_forward(self.params, x)
        diff = np.asarray(action, dtype=np.float64) - mu
        var = self.lam ** 2
        d = mu.shape[-1]
        logp = -0.5 * np.sum(diff ** 2, axis=-1) / var - 0.5 * d * np.log(2 * np.pi * var)
        gphi, gin = mlp_backward(tape, diff / var, per_sample=True)
        gx = gin * self.obs_scale if self.obs_scale is not None else gin
        return logp, gphi, gx

    def density(self, state, action):
        logp, _, _ = self.log_prob_grads(state, action)
        return np.exp(logp)

    def round(self) -> DeterministicPolicy:
        return DeterministicPolicy(self.params, False, self.obs_scale)


def sample_action(policy, state, rng):
    return policy.sample_action(state, rng)


def log_prob_grads(policy, state, action):
    return policy.log_prob_grads(state, action)


def round_to_deterministic(policy) -> DeterministicPolicy:
    return policy.round()


def expected_next_state(policy, env, state, quadrature_order: int | None = None) -> np.ndarray:
    """``E_{a ~ pi(.|x)} f(x, a)``: exact sum (discrete) or Gauss-Hermite quadrature (continuous)."""
    x = np.asarray(state, dtype=np.float64)
    if policy.discrete:
        p = policy.probs(x)
        n_a = p.shape[-1]
        xs = np.broadcast_to(x[..., None, :], x.shape[:-1] + (n_a, x.shape[-1]))
        nxt = env.dynamics(xs, np.broadcast_to(np.arange(n_a), x.shape[:-1] + (n_a,)))
        return np.sum(p[..., None] * nxt, axis=-2)
    if quadrature_order is None:
        raise ValueError("continuous policies need a quadrature order")
    if x.ndim != 1:
        raise ContractError("quadrature path expects a single state")
    mu = policy.mean(x)
    if policy.lam == 0.0:
        return env.dynamics(x, mu)
    nodes, weights = np.polynomial.hermite.hermgauss(int(quadrature_order))
    d = mu.shape[-1]
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wgrid = np.meshgrid(*([weights] * d), indexing="ij")
    w = np.prod(np.stack([g.ravel() for g in wgrid], axis=-1), axis=-1) / np.pi ** (d / 2)
    actions = mu + np.sqrt(2.0) * policy.lam * pts
    nxt = env.dynamics(np.broadcast_to(x, (len(w), x.shape[-1])), actions)
    return w @ nxt


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "rpg-lab/policy"


def policy_to_dict(policy, env_id: str | None = None, **extra) -> dict:
    flat = policy.params.flat().astype("<f8")
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "kind": "discrete" if policy.discrete else "gaussian",
        "form": getattr(policy, "form", None),
        "env_id": env_id,
        "sizes": list(policy.params.sizes),
        "lam": float(policy.lam),
        "obs_scale": None if policy.obs_scale is None else [float(v) for v in policy.obs_scale],
        "n_params": int(flat.size),
        "dtype": "<f8",
        "params_b64": base64.b64encode(flat.tobytes()).decode("ascii"),
    }
    doc.update(extra)
    return doc


def policy_from_dict(doc: dict):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a policy checkpoint")
    flat = np.frombuffer(base64.b64decode(doc["params_b64"]), dtype="<f8").astype(np.float64)
    if flat.size != doc["n_params"]:
        raise ValueError("checkpoint parameter count mismatch")
    params = MlpParams.unflatten(doc["sizes"], flat)
    scale = None if doc.get("obs_scale") is None else np.asarray(doc["obs_scale"], dtype=np.float64)
    if doc["kind"] == "discrete":
        return DiscretePolicy(params, doc["lam"], doc.get("form") or "merged", scale)
    return GaussianPolicy(params, doc["lam"], scale)


def save_checkpoint(policy, path, env_id: str | None = None, **extra) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy, env_id, **extra), indent=1))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    return policy_from_dict(doc), doc
