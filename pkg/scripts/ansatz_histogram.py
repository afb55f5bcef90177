"""Sufficiency of orbits started right after nearly tangential collisions."""
import argparse

from hardballs.core import make_system
from hardballs.neutral import ansatz_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=2)
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--horizon", type=float, default=5.0)
    ap.add_argument("--threshold", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    p = make_system(args.N, 2, (1.0,) * args.N, 0.1)
    rep = ansatz_probe(p, args.samples, args.horizon, args.seed, threshold=args.threshold)
    agg = rep["aggregate"]
    print(f"completed {agg['completed']}/{args.samples}, {agg['inconclusive']} without collisions, "
          f"sufficient fraction {agg['sufficient_fraction']} (all samples: {agg['sufficient_fraction_all']})")
    hist = agg["margin_histogram"]
    edges = hist["log10_edges"]
    for lo, hi, c in zip(edges, edges[1:], hist["counts"]):
        print(f"  1e{int(lo):+d} .. 1e{int(hi):+d}  {'#' * c} {c}")


if __name__ == "__main__":
    main()
