"""Monte-Carlo safety experiment on the braking scenario.

Runs 100 independent trials per dataset size. Each trial collects a fresh
offline dataset, then drives the robust and nominal controllers through
the same emergency-braking episode. Violation and emergency rates land in
results/experiment_b/.
"""
import argparse
import os
import sys
import time

sys.path.insert(0, "src")

from rdeepc.harness import ControllerConfig, experiment_b


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--sizes", type=int, nargs="+", default=[500, 1500])
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--workers", type=int, default=os.cpu_count())
    ap.add_argument("--out", default="results/experiment_b")
    args = ap.parse_args()

    cfg = ControllerConfig()
    for samples in args.sizes:
        t0 = time.time()
        summary, _ = experiment_b(cfg, num_trials=args.trials, samples=samples,
                                  base_seed=args.seed, workers=args.workers,
                                  out_dir=args.out)
        mins = (time.time() - t0) / 60.0
        print(f"T = {samples} ({args.trials} trials, {mins:.1f} min)")
        for ctrl in ("robust", "baseline"):
            print(f"  {ctrl:<9} violation {summary[f'{ctrl}_violation_rate']:.2f}"
                  f"  emergency {summary[f'{ctrl}_emergency_rate']:.2f}"
                  f"  collision {summary[f'{ctrl}_collision_rate']:.2f}")
    print(f"CSVs in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
