#!/usr/bin/env python3
"""Train every algorithm on one task over its configured seeds, then write a
comparison table and a learning-curve SVG.

    python3 scripts/run_benchmark.py cartpole --algos rpg reinforce --out runs
"""
import argparse
import sys
import time
from pathlib import Path

from rpg_lab.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def run(argv):
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("env", choices=["cartpole", "acrobot", "mountaincar", "handmass"])
    ap.add_argument("--algos", nargs="+", default=["rpg", "reinforce", "a2c"])
    ap.add_argument("--seeds", type=int, help="override the configured seed list with 0..N-1")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    root = Path(args.out) / args.env
    for algo in args.algos:
        t0 = time.time()
        argv = ["train", "--config", str(ROOT / "configs" / f"{args.env}_{algo}.toml"), "--out", str(root / algo)]
        if args.seeds is not None:
            argv += ["--seeds", str(args.seeds)]
        for kv in args.set:
            argv += ["--set", kv]
        run(argv)
        print(f"{algo}: {time.time() - t0:.0f} s")
    run(["compare", *[str(root / a) for a in args.algos], "--out", str(root / "compare.csv")])
    metrics, labels = [], []
    for algo in args.algos:
        for m in sorted((root / algo).glob("seed_*/metrics.csv")):
            metrics.append(str(m))
            labels.append(algo)
    plot = ["plot", *metrics, "--out", str(root / "curve.svg"), "--title", args.env]
    for lab in labels:
        plot += ["--label", lab]
    run(plot)


if __name__ == "__main__":
    main()
