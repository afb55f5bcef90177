"""Run every configuration in configs/ and print one status line each."""
import argparse
import sys
from pathlib import Path

from hardballs.harness.config import load_config
from hardballs.harness.run import run

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=str(ROOT / "out"))
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    worst = 0
    for path in sorted((ROOT / "configs").glob("*.ini")):
        report = run(load_config(path), args.seed, args.out, args.threads)
        print(f"{path.name:20s} {report.status:17s} {report.metrics['wall_clock_s']:7.2f}s  {report.paths['payload']}")
        worst = max(worst, report.exit_code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
