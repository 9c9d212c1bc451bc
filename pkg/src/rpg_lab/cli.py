"""Command-line entry point: train, eval, verify, dump-dynamics, plot, compare.

Exit codes: 0 success, 2 usage or config error, 3 run aborted.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .trainer import TrainingAborted, evaluate, make_env_from, sample_trajectories, train

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3


class UsageError(Exception):
    pass


def _config(args):
    try:
        return load_config(args.config, args.set or ())
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg.trainer.out_dir = args.out
    if args.seed is not None:
        seeds = [args.seed]
    elif args.seeds is not None:
        seeds = list(range(args.seeds))
    else:
        seeds = list(cfg.trainer.seeds)
    cfg.trainer.seeds = seeds
    root = Path(cfg.trainer.out_dir)
    for seed in seeds:
        out = root / f"seed_{seed}"
        try:
            rec = train(cfg, seed, out)
        except TrainingAborted as exc:
            print(f"seed {seed}: aborted: {exc}", file=sys.stderr)
            return EXIT_ABORT
        fe = rec.final_eval
        solved = f"solved at {rec.samples_until_solve} episodes" if rec.solved else "not solved"
        print(f"seed {seed}: {solved}; final return {fe['mean']:.2f} ± {fe['se']:.2f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .envs import make_env
    from .nn import rng_fork
    from .policy import load_checkpoint

    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        policy, doc = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    env_id = args.env or doc.get("env_id")
    if env_id is None:
        raise UsageError("checkpoint does not name an environment; pass --env")
    try:
        env = make_env(env_id, sharpness=args.sharpness)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    st = evaluate(policy, env, args.episodes, rng_fork(args.seed, "eval"), rounded=args.rounded)
    print(json.dumps({"env_id": env_id, **asdict(st)}, indent=2))
    return EXIT_OK


def run_verify(quick: bool = False, seed: int = 0) -> list[dict]:
    from . import diagnostics as D

    cases = 20 if quick else 100
    results = []

    def add(name, passed, detail, soft=False):
        results.append({"check": name, "passed": bool(passed), "soft": soft, "detail": detail})

    for r in D.check_gradients("all", cases=cases, seed=seed):
        add(f"gradients/{r.suite}", r.passed, f"worst rel. error {r.worst:.2e} over {r.cases} cases")
    reps = D.unbiasedness_suite(5 if quick else 20, seed)
    worst = max(r.rel_error for r in reps)
    add("unbiasedness/enumeration", worst <= 1e-6, f"worst rel. error {worst:.2e} over {len(reps)} toys")
    bounds = D.bound_suite(200 if quick else 1000, seed)
    add("bound/grid", all(b.passed for b in bounds),
        f"max mean/bound {max(b.mean / b.bound for b in bounds):.3f} over {len(bounds)} settings")
    zero = D.check_bound(D.BoundExperiment(0.6, 0.5, 0.0, 200, seed=seed))
    add("bound/lambda0", zero.mean == 0.0, f"deviation {zero.mean:.1e}")
    mono = [D.deviation_monotone(r, rp, seed=seed) for r in (0.3, 0.6) for rp in (0.2, 0.5)]
    add("bound/monotone", all(m[0] for m in mono), "deviation non-increasing as lambda shrinks")
    lem = D.lemma_variance_check(seed=seed)
    add("bound/lemma", all(m <= b + 3 * se for m, se, b in lem), f"{len(lem)} Gaussian cases")
    add("surrogate/sigmoid", D.check_sigmoid_envelope(), "alpha in (1, 10, 100)")
    add("surrogate/mollifier", D.check_mollifier(), "1_K <= psi <= 1_Omega on 1e4 points")
    var = D.chain_variance(n=5000 if quick else 20000, seed=seed)
    add("variance/chain", var.passed,
        f"rpg {var.var_rpg[0]:.4g} vs reinforce {var.var_reinforce[0]:.4g}", soft=True)
    return results


def cmd_verify(args) -> int:
    results = run_verify(args.quick, args.seed)
    width = max(len(r["check"]) for r in results)
    for r in results:
        tag = "PASS" if r["passed"] else ("WARN" if r["soft"] else "FAIL")
        print(f"{tag}  {r['check']:<{width}}  {r['detail']}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"code_version": __version__, "seed": args.seed, "results": results,
           "passed": all(r["passed"] or r["soft"] for r in results)}
    (out / "verify.json").write_text(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK if doc["passed"] else 1


def cmd_dump_dynamics(args) -> int:
    from .dynamics import encode_actions, fit_dynamics, update_gmm_prior
    from .nn import rng_fork
    from .policy import load_checkpoint
    from .trainer import build_policy

    cfg = _config(args)
    env = make_env_from(cfg)
    if args.checkpoint:
        policy, _ = load_checkpoint(args.checkpoint)
    else:
        policy = build_policy(cfg, env, rng_fork(args.seed, "init"))
    rng = rng_fork(args.seed, "rollouts")
    trajs = sample_trajectories(policy, env, cfg.trainer.m, rng, with_grads=False)
    n_a = env.spec.n_actions
    data = np.concatenate([np.concatenate([tr.states[:-1], encode_actions(tr.actions, n_a), tr.states[1:]], 1)
                           for tr in trajs if tr.length])
    prior = None
    if cfg.dynamics.use_prior:
        prior = update_gmm_prior(None, data, rng_fork(args.seed, "gmm"), cfg.dynamics.components,
                                 cfg.dynamics.em_iters, cfg.dynamics.em_tol, cfg.dynamics.reg)
    L = max(tr.length for tr in trajs)
    per_t = []
    for t in range(L):
        live = [tr for tr in trajs if tr.length > t]
        per_t.append((np.stack([tr.states[t] for tr in live]), np.array([tr.actions[t] for tr in live]),
                      np.stack([tr.states[t + 1] for tr in live])))
    model = fit_dynamics(prior, per_t, n_a, cfg.dynamics.prior_strength, cfg.dynamics.reg)
    doc = {"env_id": cfg.env.id, "seed": args.seed, "trajectories": len(trajs), **model.to_dict(),
           "events": list(model.events)}
    text = json.dumps(doc, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _label_for(path: Path) -> str:
    for cand in (path.parent / "summary.json", path.parent.parent / "summary.json"):
        if cand.is_file():
            try:
                return json.loads(cand.read_text())["algo"]
            except (KeyError, json.JSONDecodeError):
                break
    return "run"


def cmd_plot(args) -> int:
    from .report import ReportError, load_series, render_svg

    paths = [Path(p) for p in args.metrics]
    labels = args.label or []
    if labels and len(labels) not in (1, len(paths)):
        raise UsageError("--label must be given once or once per metrics file")
    groups: dict[str, list] = {}
    for i, p in enumerate(paths):
        if not p.is_file():
            raise UsageError(f"metrics file not found: {p}")
        label = labels[i if len(labels) > 1 else 0] if labels else _label_for(p)
        try:
            groups.setdefault(label, []).extend(load_series([p], args.x))
        except ReportError as exc:
            raise UsageError(f"schema mismatch: {exc}") from exc
    svg = render_svg(groups, args.x, args.title or "")
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .report import ReportError, compare, compare_csv, compare_table, load_summaries

    try:
        env_id, rows = compare(load_summaries(args.runs))
    except ReportError as exc:
        raise UsageError(str(exc)) from exc
    print(compare_table(env_id, rows), end="")
    if args.out:
        Path(args.out).write_text(compare_csv(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rpg-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. trainer.episodes=0")

    p = sub.add_parser("train", help="train one or more seeds")
    config_args(p)
    p.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--out", help="output directory (default trainer.out_dir)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on true rewards")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounded", action="store_true", help="act with the rounded deterministic policy")
    p.add_argument("--env", help="environment id (default: from the checkpoint)")
    p.add_argument("--sharpness", type=float, default=10.0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the verification checks")
    p.add_argument("--out", default=".")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="fewer cases per check")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("dump-dynamics", help="fit dynamics to one batch and dump the model as JSON")
    config_args(p)
    p.add_argument("--checkpoint", help="policy checkpoint (default: freshly initialised policy)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(fn=cmd_dump_dynamics)

    p = sub.add_parser("plot", help="learning-curve SVG from metrics.csv files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--label", action="append", help="series label (once, or once per file)")
    p.add_argument("--x", choices=("episodes", "samples"), default="episodes")
    p.add_argument("--title")
    p.add_argument("--out", default="curve.svg")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("compare", help="comparison table from run directories")
    p.add_argument("runs", nargs="+", help="run directories or summary.json files")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
