"""Time-varying linear-Gaussian dynamics with a Gaussian-mixture prior.

Tuples ``z = (x_t, a_t, x_{t+1})`` from all timesteps feed a mixture model.
For each timestep the mixture is collapsed to a single Gaussian prior
(weighted by the responsibilities of that timestep's points), blended with the
empirical moments in normal-inverse-Wishart fashion, and the conditional
``x_{t+1} | x_t, a_t`` is read off the joint.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

log = logging.getLogger(__name__)


def encode_actions(actions, n_actions: int | None) -> np.ndarray:
    """One-hot encode discrete actions; continuous actions pass through as 2-d arrays."""
    a = np.asarray(actions)
    if n_actions is None:
        a = a.astype(np.float64)
        return a[:, None] if a.ndim == 1 else a
    out = np.zeros((a.shape[0], n_actions))
    out[np.arange(a.shape[0]), a.astype(int)] = 1.0
    return out


@dataclass(frozen=True)
class TvLinearModel:
    A: np.ndarray  # (T, n, n)
    B: np.ndarray  # (T, n, d_a)
    c: np.ndarray  # (T, n)
    F: np.ndarray  # (T, n, n)
    events: tuple[str, ...] = ()

    @property
    def horizon(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    def predict(self, t: int, x, u):
        return self.A[t] @ x + self.B[t] @ u + self.c[t]

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "state_dim": self.state_dim,
            "action_dim": int(self.B.shape[2]),
            "steps": [
                {"t": t, "A": self.A[t].tolist(), "B": self.B[t].tolist(),
                 "c": self.c[t].tolist(), "F": self.F[t].tolist()}
                for t in range(self.horizon)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def state_jacobian(model: TvLinearModel, t: int) -> np.ndarray:
    if not 0 <= t < model.horizon:
        raise IndexError(f"timestep {t} outside [0, {model.horizon})")
    return model.A[t]


# -- mixture prior ------------------------------------------------------------

@dataclass
class GmmPrior:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covs: np.ndarray  # (K, D, D)
    loglik: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _component_logpdf(data, means, covs):
    n, d = data.shape
    out = np.empty((n, means.shape[0]))
    for k in range(means.shape[0]):
        chol = np.linalg.cholesky(covs[k])
        sol = solve_triangular(chol, (data - means[k]).T, lower=True)
        out[:, k] = (-0.5 * np.sum(sol ** 2, axis=0) - np.sum(np.log(np.diag(chol)))
                     - 0.5 * d * np.log(2 * np.pi))
    return out


def _log_resp(prior: GmmPrior, data):
    with np.errstate(divide="ignore"):
        lp = _component_logpdf(data, prior.means, prior.covs) + np.log(prior.weights)
    norm = logsumexp(lp, axis=1)
    return lp - norm[:, None], norm


def _safe_cov(cov, floor):
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return (v * np.maximum(w, floor)) @ v.T


def update_gmm_prior(prior: GmmPrior | None, data, rng: np.random.Generator, n_components: int = 8,
                     max_iter: int = 50, tol: float = 1e-6, reg: float = 1e-6) -> GmmPrior:
    """EM refit of the mixture on ``data`` (N, D), warm-started from ``prior``.

    The M-step uses ``cov_k = (S_k + r I) / N_k`` with ``r = reg * N / K``, the
    exact maximiser of the log-likelihood penalised by ``-r/2 sum_k tr(cov_k^-1)``.
    ``objective`` records that penalised value, which EM never decreases;
    ``loglik`` records the plain log-likelihood.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("GMM update needs a non-empty (N, D) batch")
    n, d = data.shape
    k = n_components
    ridge = reg * n / k
    global_cov = np.cov(data.T, bias=True).reshape(d, d) + reg * np.eye(d)
    events: list[str] = []

    if prior is None or prior.dim != d or prior.n_components != k:
        idx = rng.choice(n, size=k, replace=n < k)
        prior = GmmPrior(np.full(k, 1.0 / k), data[idx].copy(), np.repeat(global_cov[None], k, axis=0))
    else:
        prior = GmmPrior(prior.weights.copy(), prior.means.copy(), prior.covs.copy())

    loglik: list[float] = []
    objective: list[float] = []
    for _ in range(max_iter):
        log_r, norm = _log_resp(prior, data)
        ll = float(np.sum(norm))
        pen = -0.5 * ridge * sum(float(np.trace(np.linalg.inv(c))) for c in prior.covs)
        obj = ll + pen
        if objective and abs(obj - objective[-1]) <= tol * abs(objective[-1]):
            loglik.append(ll)
            objective.append(obj)
            break
        loglik.append(ll)
        objective.append(obj)

        resp = np.exp(log_r)
        nk = resp.sum(axis=0)
        weights = nk / n
        means = np.empty_like(prior.means)
        covs = np.empty_like(prior.covs)
        reinit = False
        for j in range(k):
            if weights[j] < 1e-8:
                reinit = True
                i = int(rng.integers(n))
                means[j] = data[i]
                covs[j] = global_cov
                weights[j] = 1.0 / k
                events.append(f"component {j} degenerate (weight {nk[j] / n:.2e}); reinitialised at datum {i}")
                continue
            means[j] = resp[:, j] @ data / nk[j]
            diff = data - means[j]
            s = (resp[:, j, None] * diff).T @ diff
            covs[j] = _safe_cov((s + ridge * np.eye(d)) / nk[j], reg)
        weights = weights / weights.sum()
        prior = GmmPrior(weights, means, covs)
        if reinit:
            # the monotone sequence restarts after a reinitialisation
            loglik.clear()
            objective.clear()
    for e in events:
        log.info(e)
    prior.loglik = loglik
    prior.objective = objective
    prior.events = events
    return prior


def gmm_loglik(prior: GmmPrior, data) -> float:
    _, norm = _log_resp(prior, np.asarray(data, dtype=np.float64))
    return float(np.sum(norm))


def gmm_inference(prior: GmmPrior, points) -> tuple[np.ndarray, np.ndarray]:
    """Collapse the mixture to one Gaussian, weighting components by the points' mean responsibility."""
    log_r, _ = _log_resp(prior, np.asarray(points, dtype=np.float64))
    w = np.exp(logsumexp(log_r, axis=0) - np.log(log_r.shape[0]))
    w = w / w.sum()
    mu0 = w @ prior.means
    diff = prior.means - mu0
    phi = np.einsum("k,kij->ij", w, prior.covs) + np.einsum("k,ki,kj->ij", w, diff, diff)
    return mu0, 0.5 * (phi + phi.T)


# -- per-timestep fit -------------------------------------------------------------

def _conditional(mu, sigma, n_in, reg, structural_null, t, events):
    s_xx = sigma[:n_in, :n_in]
    s_xy = sigma[:n_in, n_in:]
    s_yy = sigma[n_in:, n_in:]
    w, v = np.linalg.eigh(s_xx)
    cutoff = 1e-12 * max(float(w.max()), 1e-300)
    rank_gap = int(np.sum(w <= cutoff)) - structural_null
    if rank_gap > 0:
        events.append(f"t={t}: regressor covariance singular (rank deficit {rank_gap}); ridge {reg:g} applied")
        s_xx = s_xx + reg * np.eye(n_in)
        w, v = np.linalg.eigh(s_xx)
        cutoff = 1e-12 * float(w.max())
    inv_w = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    gain = (v * inv_w) @ v.T @ s_xy  # (n_in, n)
    cov = s_yy - s_xy.T @ gain
    cov = 0.5 * (cov + cov.T)
    cw, cv = np.linalg.eigh(cov)
    cov = (cv * np.maximum(cw, 0.0)) @ cv.T + reg * np.eye(cov.shape[0])
    coef = gain.T
    intercept = mu[n_in:] - coef @ mu[:n_in]
    return coef, intercept, 0.5 * (cov + cov.T)


def fit_dynamics(prior: GmmPrior | None, tuples_per_t, n_actions: int | None = None,
                 prior_strength: float = 1.0, reg: float = 1e-6) -> TvLinearModel:
    """Per-timestep linear-Gaussian fit.

    ``tuples_per_t[t] = (X, U, Xn)`` with ``X, Xn`` of shape (N_t, n) and ``U``
    the actions (integer indices for discrete spaces). With ``prior`` the
    empirical moments are blended with the collapsed mixture at pseudo-count
    ``prior_strength``; ``prior=None`` gives ordinary least squares.
    """
    As, Bs, cs, Fs = [], [], [], []
    events: list[str] = []
    for t, (x, u, xn) in enumerate(tuples_per_t):
        x = np.asarray(x, dtype=np.float64)
        xn = np.asarray(xn, dtype=np.float64)
        if x.shape[0] < 1:
            raise ValueError(f"no samples at timestep {t}")
        ue = encode_actions(u, n_actions)
        z = np.concatenate([x, ue, xn], axis=1)
        n_pts, dim = z.shape
        n = x.shape[1]
        mu_hat = z.mean(axis=0)
        diff = z - mu_hat
        sig_hat = diff.T @ diff / n_pts
        if prior is not None and prior_strength > 0:
            mu0, phi = gmm_inference(prior, z)
            m0 = n0 = prior_strength
            dm = mu_hat - mu0
            mu = (n_pts * mu_hat + m0 * mu0) / (n_pts + m0)
            sigma = (n_pts * sig_hat + n0 * phi + (n_pts * m0 / (n_pts + m0)) * np.outer(dm, dm)) / (n_pts + n0)
        else:
            mu, sigma = mu_hat, sig_hat
        sigma = 0.5 * (sigma + sigma.T)
        n_in = n + ue.shape[1]
        structural = 1 if n_actions is not None else 0
        coef, intercept, cov = _conditional(mu, sigma, n_in, reg, structural, t, events)
        As.append(coef[:, :n])
        Bs.append(coef[:, n:])
        cs.append(intercept)
        Fs.append(cov)
    for e in events:
        log.debug(e)
    return TvLinearModel(np.array(As), np.array(Bs), np.array(cs), np.array(Fs), tuple(events))
