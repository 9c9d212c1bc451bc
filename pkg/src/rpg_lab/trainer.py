"""Training loops, evaluation and solve detection.

Each iteration of the relaxed-policy-gradient loop: sample ``m`` trajectories,
refit the mixture prior, fit per-timestep linear dynamics, estimate the
gradient, take an Adam ascent step and anneal ``lam``. REINFORCE, an
advantage baseline variant and CEM share the sampling and logging code.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, TrainConfig
from .dynamics import update_gmm_prior, fit_dynamics, encode_actions
from .envs import Env, make_env
from .estimators import (CemDistribution, Trajectory, ValueBaseline, annotate, cem_iteration, cem_noise,
                         reinforce_gradient, rpg_gradient)
from .nn import AdamState, MlpParams, adam_step, rng_fork
from .policy import DiscretePolicy, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "episodes", "samples", "mean_return", "se_return", "surrogate_return",
                  "lambda", "grad_norm", "wall_ms")


class TrainingAborted(RuntimeError):
    pass


def bitrepro_enabled(config: TrainConfig | None = None) -> bool:
    if os.environ.get("RPG_LAB_BITREPRO", "") not in ("", "0"):
        return True
    return bool(config is not None and config.trainer.bitrepro)


# -- rollouts -----------------------------------------------------------------

def sample_trajectories(policy, env: Env, m: int, rng: np.random.Generator, horizon: int | None = None,
                        with_grads: bool = True) -> list[Trajectory]:
    """Roll out ``m`` episodes in lockstep; finished episodes stop recording."""
    T = horizon or env.spec.horizon
    x = env.reset_batch(rng, m)
    n = x.shape[1]
    states = np.zeros((T + 1, m, n))
    actions = np.zeros((T, m), dtype=np.int64) if env.spec.discrete else np.zeros((T, m, env.spec.action_dim))
    rewards = np.zeros((T, m))
    lengths = np.full(m, T)
    done = np.zeros(m, dtype=bool)
    states[0] = x
    for t in range(T):
        a = policy.sample_action(x, rng)
        nxt = env.dynamics(x, a)
        if not np.all(np.isfinite(nxt[~done])):
            raise FloatingPointError(f"non-finite state at step {t + 1}")
        r = env.reward(x, a, nxt, t + 1)
        actions[t] = a
        rewards[t] = r
        states[t + 1] = nxt
        term = env.terminal(nxt) & ~done
        lengths[term] = t + 1
        done |= term
        x = nxt
        if done.all():
            break
    out = []
    for i in range(m):
        L = int(lengths[i])
        xs = states[: L + 1, i].copy()
        sv, sg = env.surrogate(xs)
        if env.spec.terminal_reward_only:
            # only the final state carries reward
            keep = np.zeros(L + 1)
            keep[L] = 1.0 if L == T else 0.0
            sv, sg = sv * keep, sg * keep[:, None]
        elif env.spec.absorbing_goal and L < T:
            # the goal state repeats for the remaining T - L steps
            sv, sg = sv.copy(), sg.copy()
            sv[L] *= T - L + 1
            sg[L] *= T - L + 1
        tr = Trajectory(xs, actions[:L, i].copy(), rewards[:L, i].copy(), sg, sv,
                        terminated=bool(L < T))
        if with_grads:
            annotate(tr, policy)
        out.append(tr)
    return out


@dataclass(frozen=True)
class EvalStats:
    mean: float
    std: float
    min: float
    max: float
    se: float
    episodes: int
    rounded: bool = False
    surrogate_mean: float = float("nan")


class _RoundedActor:
    def __init__(self, policy):
        self.det = policy.round()

    def sample_action(self, x, rng):
        return self.det.act(x)


def evaluate(policy, env: Env, episodes: int, rng: np.random.Generator, rounded: bool = False) -> EvalStats:
    """True-reward return statistics over ``episodes`` rollouts."""
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    actor = _RoundedActor(policy) if rounded else policy
    trajs = sample_trajectories(actor, env, episodes, rng, with_grads=False)
    ret = np.array([tr.total_reward for tr in trajs])
    sur = np.array([tr.surrogate_return for tr in trajs])
    std = float(ret.std())
    return EvalStats(float(ret.mean()), std, float(ret.min()), float(ret.max()), float(std / np.sqrt(len(ret))),
                     len(ret), rounded, float(sur.mean()))


def solve_check(returns, threshold: float, window: int = 5, counts=None):
    """First count at which the trailing mean over ``window`` evaluations reaches ``threshold``.

    ``returns`` is the stream of evaluation means and ``counts`` the sample
    count attached to each (defaults to the evaluation index). Early
    evaluations use the partial window. Returns ``None`` if never solved.
    """
    if threshold is None:
        raise ValueError("solve check needs a threshold")
    returns = [float(r) for r in returns]
    counts = list(range(len(returns))) if counts is None else list(counts)
    for i in range(len(returns)):
        lo = max(0, i - window + 1)
        if np.mean(returns[lo: i + 1]) >= threshold:
            return counts[i]
    return None


# -- run record ---------------------------------------------------------------

@dataclass
class IterationLog:
    iter: int
    episodes: int
    samples: int
    lam: float
    lr: float
    grad_norm: float
    surrogate_return: float
    train_return: float
    skipped: bool = False


@dataclass
class RunRecord:
    seed: int
    env_id: str
    algo: str
    rows: list[dict] = field(default_factory=list)
    iterations: list[IterationLog] = field(default_factory=list)
    solved: bool = False
    samples_until_solve: int | None = None
    transitions_until_solve: int | None = None
    final_eval: dict | None = None
    skipped_iterations: int = 0
    config: dict | None = None
    params: MlpParams | None = field(default=None, repr=False)
    policy: object = field(default=None, repr=False)

    def metrics_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "code_version": __version__,
            "env_id": self.env_id,
            "algo": self.algo,
            "seed": self.seed,
            "solved": self.solved,
            "samples_until_solve": self.samples_until_solve,
            "transitions_until_solve": self.transitions_until_solve,
            "final_eval": self.final_eval,
            "skipped_iterations": self.skipped_iterations,
            "n_evaluations": len(self.rows),
            "config": self.config,
        }


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# -- training -----------------------------------------------------------------

def build_policy(config: TrainConfig, env: Env, rng: np.random.Generator) -> DiscretePolicy:
    if not env.spec.discrete:
        raise ValueError("training loops drive discrete-action tasks")
    sizes = [env.spec.state_dim, *config.policy.hidden, env.spec.n_actions]
    scale = config.env.obs_scale if config.env.obs_scale is not None else env.spec.obs_scale
    scale = None if scale is None else np.asarray(scale, dtype=np.float64)
    return DiscretePolicy(MlpParams.init(sizes, rng), config.policy.lam, config.policy.form, scale)


def make_env_from(config: TrainConfig) -> Env:
    return make_env(config.env.id, sharpness=config.env.sharpness, horizon=config.env.horizon)


class _Runner:
    def __init__(self, config: TrainConfig, seed: int, out_dir: Path | None):
        self.cfg = config
        self.seed = seed
        self.out_dir = out_dir
        self.env = make_env_from(config)
        self.bitrepro = bitrepro_enabled(config)
        self.rng_env = rng_fork(seed, "rollouts")
        self.rng_eval = rng_fork(seed, "eval")
        self.rng_gmm = rng_fork(seed, "gmm")
        self.rng_cem = rng_fork(seed, "cem")
        self.policy = build_policy(config, self.env, rng_fork(seed, "init"))
        self.threshold = config.trainer.solve_threshold
        if self.threshold is None:
            self.threshold = self.env.spec.solve_threshold
        self.record = RunRecord(seed, config.env.id, config.trainer.algo, config=config.to_dict())
        self.episodes = 0
        self.samples = 0
        self.n_iter = 0
        self.t0 = time.perf_counter()
        self.last = {"surrogate_return": float("nan"), "grad_norm": 0.0}
        self.next_eval = 0

    # logging
    def _wall_ms(self) -> float:
        return 0.0 if self.bitrepro else 1e3 * (time.perf_counter() - self.t0)

    def maybe_eval(self, force: bool = False):
        if not force and self.episodes < self.next_eval:
            return
        every = max(1, self.cfg.trainer.eval_every)
        while self.next_eval <= self.episodes:
            self.next_eval += every
        st = evaluate(self.policy, self.env, self.cfg.trainer.eval_episodes, self.rng_eval)
        sur = self.last["surrogate_return"]
        row = {"iter": self.n_iter, "episodes": self.episodes, "samples": self.samples,
               "mean_return": st.mean, "se_return": st.se,
               "surrogate_return": st.surrogate_mean if not np.isfinite(sur) else sur,
               "lambda": float(self.policy.lam), "grad_norm": self.last["grad_norm"],
               "wall_ms": self._wall_ms()}
        self.record.rows.append(row)
        k = self.cfg.trainer.checkpoint_every
        if self.out_dir is not None and k > 0 and len(self.record.rows) % k == 0:
            save_checkpoint(self.policy, self.out_dir / f"checkpoint_{self.n_iter:06d}.json", self.cfg.env.id,
                            iteration=self.n_iter, episodes=self.episodes)
        log.debug("iter %d episodes %d return %.2f", self.n_iter, self.episodes, st.mean)

    def log_iteration(self, trajs, grad_norm, skipped):
        sur = float(np.mean([tr.surrogate_return for tr in trajs]))
        ret = float(np.mean([tr.total_reward for tr in trajs]))
        self.last = {"surrogate_return": sur, "grad_norm": grad_norm}
        self.record.iterations.append(IterationLog(self.n_iter, self.episodes, self.samples,
                                                   float(self.policy.lam), self.lr, grad_norm, sur, ret, skipped))

    def sample(self, m):
        trajs = sample_trajectories(self.policy, self.env, m, self.rng_env)
        self.episodes += m
        self.samples += sum(tr.length for tr in trajs)
        self.n_iter += 1
        return trajs

    # gradient-based loops
    def run_gradient(self):
        cfg, tc = self.cfg, self.cfg.trainer
        params = self.policy.params
        opt = AdamState.zeros(params.n_params, lr=tc.lr)
        self.lr = tc.lr
        prior = None
        window: deque = deque(maxlen=max(1, cfg.dynamics.window))
        value = None
        if tc.algo == "a2c":
            scale = max(1.0, float(self.env.spec.horizon) / 10.0)
            value = ValueBaseline(params.sizes[-2], lr=tc.value_lr, value_scale=scale)
        consecutive = 0
        while self.episodes < tc.episodes:
            m = min(tc.m, tc.episodes - self.episodes)
            trajs = self.sample(m)
            if tc.algo == "rpg":
                prior, model = self._fit_model(trajs, prior, window)
                est = rpg_gradient(trajs, model, tc.fhat_baseline, decay=tc.credit_decay)
            elif tc.algo == "reinforce":
                est = reinforce_gradient(trajs)
            else:
                pol = self.policy
                est = reinforce_gradient(trajs, baseline=lambda s: value.values(pol, s))
                value.fit(pol, trajs, tc.value_steps)
            g = est.grad
            gn = float(np.linalg.norm(g))
            if not np.all(np.isfinite(g)):
                consecutive += 1
                self.record.skipped_iterations += 1
                log.warning("non-finite gradient at iteration %d (lambda %.4g, lr %.4g); skipped",
                            self.n_iter, self.policy.lam, self.lr)
                self.log_iteration(trajs, float("nan"), True)
                if consecutive >= 3:
                    raise TrainingAborted(f"3 consecutive non-finite gradients ending at iteration {self.n_iter} "
                                          f"(lambda {self.policy.lam:.4g}, lr {self.lr:.4g})")
                continue
            consecutive = 0
            if tc.grad_normalize and gn > 0:
                g = g / gn
            elif tc.grad_clip > 0 and gn > tc.grad_clip:
                g = g * (tc.grad_clip / gn)
            params, opt = adam_step(opt, params, -g, lr=self.lr)
            self.policy = self.policy.with_params(params)
            self.log_iteration(trajs, gn, False)
            lam = self.policy.lam * cfg.policy.anneal_gamma
            if cfg.policy.anneal_gamma < 1.0:
                lam = max(lam, cfg.policy.lam_floor)
            self.policy = self.policy.with_lam(lam)
            self.lr *= tc.lr_decay
            self.maybe_eval()

    def _fit_model(self, trajs, prior, window):
        cfg = self.cfg
        n_a = self.env.spec.n_actions
        tuples = []
        for tr in trajs:
            if tr.length:
                tuples.append(np.concatenate([tr.states[:-1], encode_actions(tr.actions, n_a), tr.states[1:]], 1))
        window.append(np.concatenate(tuples))
        if cfg.dynamics.use_prior:
            prior = update_gmm_prior(prior, np.concatenate(list(window)), self.rng_gmm,
                                     cfg.dynamics.components, cfg.dynamics.em_iters, cfg.dynamics.em_tol,
                                     cfg.dynamics.reg)
        L = max(tr.length for tr in trajs)
        per_t = []
        for t in range(L):
            live = [tr for tr in trajs if tr.length > t]
            per_t.append((np.stack([tr.states[t] for tr in live]), np.array([tr.actions[t] for tr in live]),
                          np.stack([tr.states[t + 1] for tr in live])))
        model = fit_dynamics(prior if cfg.dynamics.use_prior else None, per_t, n_a,
                             cfg.dynamics.prior_strength, cfg.dynamics.reg)
        return prior, model

    def run_cem(self):
        tc = self.cfg.trainer
        self.lr = 0.0
        base = self.policy.params
        dist = CemDistribution(base.flat(), np.full(base.n_params, tc.cem_init_std))
        sizes = base.sizes
        while self.episodes + tc.cem_population <= tc.episodes:
            trajs_all = []

            def score(flat):
                pol = self.policy.with_params(MlpParams.unflatten(sizes, flat))
                tr = sample_trajectories(_RoundedActor(pol), self.env, 1, self.rng_cem, with_grads=False)[0]
                trajs_all.append(tr)
                return tr.total_reward

            extra = cem_noise(self.n_iter, tc.cem_noise * tc.cem_init_std ** 2, tc.cem_noise_decay)
            dist, stats = cem_iteration(dist, score, self.rng_cem, tc.cem_population, tc.cem_elite, extra_var=extra)
            self.episodes += tc.cem_population
            self.samples += sum(tr.length for tr in trajs_all)
            self.n_iter += 1
            self.policy = self.policy.with_params(MlpParams.unflatten(sizes, dist.mean)).with_lam(0.0)
            self.log_iteration(trajs_all, 0.0, False)
            self.maybe_eval()

    def finish(self):
        rec = self.record
        counts = [r["episodes"] for r in rec.rows]
        if self.threshold is not None:
            solved_at = solve_check([r["mean_return"] for r in rec.rows], self.threshold,
                                    self.cfg.trainer.solve_window, counts)
            if solved_at is not None:
                rec.solved = True
                rec.samples_until_solve = int(solved_at)
                rec.transitions_until_solve = int(rec.rows[counts.index(solved_at)]["samples"])
        st = evaluate(self.policy, self.env, self.cfg.trainer.final_eval_episodes, rng_fork(self.seed, "final"),
                      rounded=True)
        rec.final_eval = asdict(st)
        rec.params = self.policy.params
        rec.policy = self.policy
        return rec


def train(config: TrainConfig, seed: int = 0, out_dir: str | Path | None = None) -> RunRecord:
    """Run one seed of the configured algorithm; writes artifacts if ``out_dir`` is given."""
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    runner = _Runner(config, seed, out)
    runner.maybe_eval(force=True)
    try:
        if config.trainer.algo == "cem":
            runner.run_cem()
        else:
            runner.run_gradient()
    except TrainingAborted:
        if out is not None:
            write_artifacts(runner.record, out, aborted=True)
        raise
    # make sure the last state of training is evaluated
    if runner.record.rows[-1]["episodes"] != runner.episodes:
        runner.maybe_eval(force=True)
    rec = runner.finish()
    if out is not None:
        write_artifacts(rec, out)
    return rec


def write_artifacts(rec: RunRecord, out: Path, aborted: bool = False) -> None:
    (out / "metrics.csv").write_text(rec.metrics_csv())
    summ = rec.summary()
    summ["aborted"] = aborted
    (out / "summary.json").write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
    if rec.policy is not None:
        save_checkpoint(rec.policy, out / "checkpoint_final.json", rec.env_id, episodes=rec.rows[-1]["episodes"])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({k: (int(v) if k in ("iter", "episodes", "samples") else float(v)) for k, v in r.items()})
    return rows
