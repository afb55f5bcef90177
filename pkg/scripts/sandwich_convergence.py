"""Gap between flat and candle stable-curvature estimates as the horizon grows."""
import argparse

from hardballs.core import make_system
from hardballs.harness.sampling import random_state
from hardballs.tangent import sandwich_steps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=2)
    ap.add_argument("--r", type=float, default=0.1)
    ap.add_argument("--horizon", type=float, default=20.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    p = make_system(args.N, 2, (1.0,) * args.N, args.r)
    rows = sandwich_steps(random_state(p, args.seed), args.horizon, p)
    print(f"{'T':>9} {'coll':>5} {'gap':>10} {'1/T':>10} {'min eig B':>10}")
    for r in rows:
        print(f"{r['T']:9.4f} {r['collisions']:5d} {r['gap']:10.3e} {r['gap_bound']:10.3e} {r['flat_min_eig']:10.3e}")


if __name__ == "__main__":
    main()
