"""Fuel-economy experiment on the drive-cycle scenario.

Collects one large offline dataset, runs the all-human, nominal, and
robust controllers on the same seed, and writes the per-phase fuel table
plus trajectory CSVs to results/experiment_a/.
"""
import argparse
import sys

sys.path.insert(0, "src")

from rdeepc.harness import ControllerConfig, collect_with_retries, experiment_a


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", type=int, default=1500, help="offline dataset size")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", default="results/experiment_a")
    args = ap.parse_args()

    cfg = ControllerConfig()
    dataset = collect_with_retries(args.T, args.seed)
    result = experiment_a(cfg, dataset, seed=args.seed, out_dir=args.out)

    header = f"{'phase':<8}{'allhdv':>12}{'baseline':>12}{'robust':>12}" \
             f"{'base %':>9}{'rob %':>9}"
    print(header)
    for row in result["table"]:
        print(f"{row['phase']:<8}{row['allhdv']:>12.2f}{row['baseline']:>12.2f}"
              f"{row['robust']:>12.2f}{row['baseline_saving_pct']:>9.2f}"
              f"{row['robust_saving_pct']:>9.2f}")
    print(f"CSVs in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
