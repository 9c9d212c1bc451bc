#!/usr/bin/env python3
"""Print the estimator diagnostics: enumeration against the relaxed objective
(with and without the state-restricted policy), the deviation-bound grid, and
the chain variance comparison."""
import argparse

import numpy as np

from rpg_lab import diagnostics as D


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--toys", type=int, default=20)
    args = ap.parse_args()

    reps = D.unbiasedness_suite(args.toys, args.seed)
    errs = np.array([r.rel_error for r in reps])
    print(f"enumeration, policy reads the action-independent coordinate: max rel. error {errs.max():.2e}")
    bias = np.array(D.bias_report(args.toys, args.seed))
    print(f"enumeration, policy reads every coordinate: rel. error min {bias.min():.2e} "
          f"median {np.median(bias):.2e} max {bias.max():.2e}")

    print("\n rho  rho'   lam    mean dev      3 SE     bound  ok")
    for r in D.bound_suite(1000, args.seed):
        e = r.exp
        print(f"{e.rho:4.1f} {e.rho_p:5.1f} {e.lam:5.2f} {r.mean:11.3e} {3 * r.se:9.2e} {r.bound:9.3f}  {r.passed}")

    v = D.chain_variance(seed=args.seed)
    print(f"\nchain, n={v.n}: var rpg {v.var_rpg[0]:.4g}  var reinforce {v.var_reinforce[0]:.4g}  "
          f"means {v.mean_rpg[0]:.4f} / {v.mean_reinforce[0]:.4f}  p={v.p_value[0]:.3g}")


if __name__ == "__main__":
    main()
