"""Analytic tangent propagation against extended-precision central differences.

Prints a CSV row per segment: collision count, expansion factor, relative
error, and the error of a plain double-precision difference for comparison.
"""
import argparse
import csv
import sys

from hardballs.core import make_system
from hardballs.harness.rng import stream
from hardballs.harness.sampling import random_state
from hardballs.precise import precise_difference_flow, simulate_precise
from hardballs.tangent import fd_relative_error, finite_difference_flow, propagate, section_tangent, tangent_norm


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=3)
    ap.add_argument("--r", type=float, default=0.1)
    ap.add_argument("--max-collisions", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    p = make_system(args.N, 2, (1.0,) * args.N, args.r)
    s = random_state(p, args.seed)
    rng = stream(args.seed, 1)
    tv = section_tangent(s.v, p, rng)
    longer = simulate_precise(s, p, max_collisions=args.max_collisions + 1)
    out = csv.writer(sys.stdout)
    out.writerow(["collisions", "T", "growth", "precise_error", "double_error"])
    for n in range(1, len(longer)):
        T = 0.5 * (longer.times[n - 1] + longer.times[n])
        traj = simulate_precise(s, p, max_time=T)
        ana = propagate(traj, tv)
        growth = tangent_norm(ana, p) / tangent_norm(tv, p)
        err, _ = fd_relative_error(ana, {0: precise_difference_flow(traj, tv, growth=10 * growth)}, p)
        dbl, _ = fd_relative_error(ana, finite_difference_flow(s, tv, T, p), p)
        out.writerow([n, f"{T:.6f}", f"{growth:.3e}", f"{err:.2e}", f"{dbl:.2e}"])


if __name__ == "__main__":
    main()
