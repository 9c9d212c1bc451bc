import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpg_lab import trainer as T
from rpg_lab.config import load_config
from rpg_lab.envs import make_env, sigmoid
from rpg_lab.nn import rng_fork
from rpg_lab.policy import load_checkpoint


def small_config(env="cartpole", algo="rpg", **kw):
    ov = [f"env.id={env}", f"trainer.algo={algo}", "policy.hidden=[8]", "trainer.eval_episodes=3",
          "trainer.final_eval_episodes=3", "dynamics.components=2", "dynamics.em_iters=5"]
    ov += [f"{k}={v}" for k, v in kw.items()]
    return load_config(overrides=ov)


class _Fixed:
    """Always plays the same action."""

    def __init__(self, action):
        self.action = action

    def sample_action(self, x, rng):
        return np.full(len(x), self.action)


# -- rollouts ------------------------------------------------------------------

def test_sample_trajectories_shapes_and_annotation():
    cfg = small_config()
    env = T.make_env_from(cfg)
    pol = T.build_policy(cfg, env, rng_fork(0, "init"))
    trajs = T.sample_trajectories(pol, env, 4, rng_fork(0, "r"), horizon=30)
    assert len(trajs) == 4
    for tr in trajs:
        assert tr.states.shape == (tr.length + 1, 4)
        assert tr.logp_grad_phi.shape == (tr.length, pol.params.n_params)
        assert tr.probs.shape == (tr.length, 2)
        assert tr.terminated == (tr.length < 30)


def test_cartpole_degenerate_policy_returns_about_one():
    # pushing one way forever fails within a handful of steps
    env = make_env("cartpole")
    st_ = T.evaluate(_Fixed(0), env, 20, rng_fork(0, "e"))
    assert st_.max <= 12
    env_fail = make_env("cartpole", horizon=1)
    assert T.evaluate(_Fixed(0), env_fail, 5, rng_fork(0, "e")).mean == pytest.approx(1.0)


def test_evaluate_standard_error():
    env = make_env("cartpole")
    st_ = T.evaluate(_Fixed(1), env, 100, rng_fork(3, "e"))
    assert st_.episodes == 100
    assert st_.se == pytest.approx(st_.std / 10.0)
    assert st_.min <= st_.mean <= st_.max


def test_evaluate_rejects_zero_episodes():
    with pytest.raises(ValueError):
        T.evaluate(_Fixed(0), make_env("cartpole"), 0, rng_fork(0, "e"))


def test_absorbing_goal_credits_remaining_steps(monkeypatch):
    env = make_env("mountaincar", horizon=50)
    start = np.array([0.49, 0.05])
    monkeypatch.setattr(env, "reset_batch", lambda rng, m: np.tile(start, (m, 1)))
    (tr,) = T.sample_trajectories(_Fixed(2), env, 1, rng_fork(0, "r"), with_grads=False)
    assert tr.length == 1 and tr.terminated
    sv, sg = env.surrogate(tr.states)
    assert tr.surrogate[1] == pytest.approx(50 * sv[1])
    np.testing.assert_allclose(tr.reward_grads[1], 50 * sg[1])
    assert tr.surrogate[0] == pytest.approx(sv[0])


def test_terminal_reward_only_keeps_final_state():
    env = make_env("handmass", horizon=5)
    (tr,) = T.sample_trajectories(_Fixed(0), env, 1, rng_fork(0, "r"), with_grads=False)
    assert np.all(tr.surrogate[:-1] == 0.0)
    assert np.all(tr.reward_grads[:-1] == 0.0)
    assert tr.surrogate[-1] != 0.0


# -- solve check -----------------------------------------------------------------

def test_solve_check_always_above_threshold():
    assert T.solve_check([500, 500, 500], 495, 5, counts=[0, 10, 20]) == 0


def test_solve_check_known_crossing():
    returns = [10, 20, 500, 500, 500, 500, 500, 500]
    counts = [0, 10, 20, 30, 40, 50, 60, 70]
    # trailing 5-mean first reaches 495 once the low values leave the window
    assert T.solve_check(returns, 495, 5, counts) == 60
    assert T.solve_check(returns, 305, 5, counts) == 40


def test_solve_check_never_and_requires_threshold():
    assert T.solve_check([1, 2, 3], 10) is None
    with pytest.raises(ValueError):
        T.solve_check([1, 2], None)


@given(st.lists(st.floats(-500, 500), min_size=1, max_size=30), st.floats(-500, 500), st.integers(1, 8))
def test_solve_check_matches_bruteforce(returns, threshold, window):
    got = T.solve_check(returns, threshold, window)
    expect = None
    for i in range(len(returns)):
        w = returns[max(0, i - window + 1): i + 1]
        if sum(w) / len(w) >= threshold:
            expect = i
            break
    assert got == expect


# -- training loop ---------------------------------------------------------------

def test_zero_episodes_is_evaluation_only(tmp_path):
    cfg = small_config(**{"trainer.episodes": 0})
    rec = T.train(cfg, 0, tmp_path)
    init = T.build_policy(cfg, T.make_env_from(cfg), rng_fork(0, "init"))
    np.testing.assert_array_equal(rec.params.flat(), init.params.flat())
    assert len(rec.rows) == 1 and rec.rows[0]["episodes"] == 0 and rec.rows[0]["samples"] == 0
    summ = json.loads((tmp_path / "summary.json").read_text())
    assert summ["n_evaluations"] == 1 and summ["final_eval"]["rounded"]
    assert summ["solved"] is False and summ["samples_until_solve"] is None


def test_sample_accounting_and_rows(tmp_path):
    cfg = small_config(**{"trainer.episodes": 12, "trainer.m": 5, "trainer.eval_every": 5})
    rec = T.train(cfg, 1, tmp_path)
    its = rec.iterations
    assert [it.episodes for it in its] == [5, 10, 12]
    assert rec.rows[-1]["episodes"] == 12
    samples = [r["samples"] for r in rec.rows]
    assert all(b > a for a, b in zip(samples, samples[1:]))
    assert rec.rows[-1]["samples"] == its[-1].samples
    rows = T.read_metrics(tmp_path / "metrics.csv")
    assert [r["episodes"] for r in rows] == [r["episodes"] for r in rec.rows]


def test_sample_count_equals_summed_lengths(monkeypatch):
    cfg = small_config(**{"trainer.episodes": 10, "trainer.m": 5})
    lengths = []
    orig = T.sample_trajectories

    def spy(*a, **k):
        out = orig(*a, **k)
        if k.get("with_grads", True):
            lengths.extend(tr.length for tr in out)
        return out

    monkeypatch.setattr(T, "sample_trajectories", spy)
    rec = T.train(cfg, 0)
    assert rec.iterations[-1].samples == sum(lengths)


def test_lambda_sequence_is_geometric():
    cfg = small_config(**{"trainer.episodes": 20, "trainer.m": 2, "policy.lam": 2.0,
                          "policy.anneal_gamma": 0.9, "policy.lam_floor": 1e-6})
    rec = T.train(cfg, 0)
    lams = [it.lam for it in rec.iterations]
    np.testing.assert_allclose(lams, 2.0 * 0.9 ** np.arange(len(lams)), rtol=1e-12)
    assert all(b <= a for a, b in zip(lams, lams[1:]))


def test_lambda_floor():
    cfg = small_config(**{"trainer.episodes": 20, "trainer.m": 2, "policy.lam": 1.0,
                          "policy.anneal_gamma": 0.5, "policy.lam_floor": 0.1})
    rec = T.train(cfg, 0)
    assert min(it.lam for it in rec.iterations) == pytest.approx(0.1)


def test_fixed_lambda_by_default():
    rec = T.train(small_config(**{"trainer.episodes": 10, "trainer.m": 2}), 0)
    assert {it.lam for it in rec.iterations} == {1.0}


@pytest.mark.parametrize("algo", ["rpg", "reinforce", "a2c"])
def test_bitrepro_identical_metrics(tmp_path, algo):
    cfg = small_config(algo=algo, **{"trainer.episodes": 10, "trainer.m": 5, "trainer.bitrepro": "true"})
    a = T.train(cfg, 7, tmp_path / "a")
    b = T.train(cfg, 7, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert all(r["wall_ms"] == 0.0 for r in a.rows)
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())


def test_bitrepro_env_var(monkeypatch):
    monkeypatch.setenv("RPG_LAB_BITREPRO", "1")
    assert T.bitrepro_enabled(None)
    monkeypatch.setenv("RPG_LAB_BITREPRO", "0")
    assert not T.bitrepro_enabled(None)


def test_different_seeds_differ():
    cfg = small_config(**{"trainer.episodes": 5})
    a, b = T.train(cfg, 0), T.train(cfg, 1)
    assert not np.array_equal(a.params.flat(), b.params.flat())


def test_artifacts_written(tmp_path):
    cfg = small_config(**{"trainer.episodes": 10, "trainer.checkpoint_every": 1})
    T.train(cfg, 0, tmp_path)
    assert (tmp_path / "metrics.csv").is_file()
    assert sorted(p.name for p in tmp_path.glob("checkpoint_0*.json"))
    pol, doc = load_checkpoint(tmp_path / "checkpoint_final.json")
    assert doc["env_id"] == "cartpole" and pol.n_actions == 2
    summ = json.loads((tmp_path / "summary.json").read_text())
    assert summ["config"]["trainer"]["episodes"] == 10 and summ["aborted"] is False


def test_nonfinite_gradients_skip_then_abort(monkeypatch, tmp_path):
    cfg = small_config(**{"trainer.episodes": 50, "trainer.m": 2})
    calls = {"n": 0}
    real = T.rpg_gradient

    def bad(*a, **k):
        est = real(*a, **k)
        calls["n"] += 1
        est.grad = est.grad * np.nan
        return est

    monkeypatch.setattr(T, "rpg_gradient", bad)
    with pytest.raises(T.TrainingAborted, match="3 consecutive"):
        T.train(cfg, 0, tmp_path)
    assert calls["n"] == 3
    summ = json.loads((tmp_path / "summary.json").read_text())
    assert summ["aborted"] is True and summ["skipped_iterations"] == 3


def test_isolated_nonfinite_gradient_is_skipped(monkeypatch):
    cfg = small_config(**{"trainer.episodes": 12, "trainer.m": 2})
    real = T.rpg_gradient
    calls = {"n": 0}

    def flaky(*a, **k):
        est = real(*a, **k)
        calls["n"] += 1
        if calls["n"] in (2, 3):
            est.grad = est.grad * np.inf
        return est

    monkeypatch.setattr(T, "rpg_gradient", flaky)
    rec = T.train(cfg, 0)
    assert rec.skipped_iterations == 2
    assert [it.skipped for it in rec.iterations] == [False, True, True, False, False, False]


def test_grad_normalize_gives_unit_steps(monkeypatch):
    cfg = small_config(**{"trainer.episodes": 4, "trainer.m": 2, "trainer.grad_normalize": "true"})
    seen = []
    real = T.adam_step

    def spy(opt, params, g, lr):
        seen.append(np.linalg.norm(g))
        return real(opt, params, g, lr)

    monkeypatch.setattr(T, "adam_step", spy)
    T.train(cfg, 0)
    np.testing.assert_allclose(seen, 1.0)


def test_cem_loop_accounting():
    cfg = small_config(algo="cem", **{"trainer.episodes": 45, "trainer.cem_population": 10,
                                     "trainer.cem_elite": 2})
    rec = T.train(cfg, 0)
    assert [it.episodes for it in rec.iterations] == [10, 20, 30, 40]
    assert rec.policy.lam == 0.0


def test_handmass_rpg_runs():
    cfg = small_config(env="handmass", **{"trainer.episodes": 4})
    rec = T.train(cfg, 0)
    assert np.isfinite(rec.final_eval["mean"])


def test_read_metrics_rejects_bad_columns(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("iter,episodes\n0,0\n")
    with pytest.raises(ValueError, match="columns"):
        T.read_metrics(p)


@settings(max_examples=20, deadline=None)
@given(st.floats(-60, 60))
def test_surrogate_sigmoid_in_unit_interval(z):
    assert 0.0 <= sigmoid(z) <= 1.0
