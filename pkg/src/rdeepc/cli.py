"""Command-line entry points.

Subcommands:
  collect     record an offline excitation dataset to CSV
  run         closed-loop run of one controller on a scenario
  batch-b     Monte-Carlo safety batch on the braking scenario
  complexity  exact program sizes for the four solve methods

A flat ``key = value`` config file can preload any ControllerConfig field;
explicit command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .data_engine import CollectionDiverged, collect_offline_data, load_dataset_csv
from .harness import (CONTROLLERS, ESTIMATORS, METHODS, SCENARIOS,
                      ControllerConfig, collect_with_retries, experiment_b,
                      run_receding_horizon, write_summary_csv)
from .reformulation import COMPLEXITY_METHODS, complexity

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(ControllerConfig)}


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot read {raw!r} as a boolean")
    return raw


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines into ControllerConfig overrides."""
    overrides = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            overrides[key] = _coerce(_CONFIG_FIELDS[key], raw)
    return overrides


def build_config(args) -> ControllerConfig:
    """Config file first, then any explicit flags on top."""
    overrides = {}
    if getattr(args, "config", None):
        overrides.update(read_config_file(args.config))
    for key in _CONFIG_FIELDS:
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return ControllerConfig(**overrides)


def _add_config_flags(parser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--method", choices=METHODS)
    parser.add_argument("--estimator", choices=ESTIMATORS)
    parser.add_argument("--Ts", dest="ts", type=int, metavar="TS",
                        help="disturbance down-sampling stride")
    parser.add_argument("--solver")
    parser.add_argument("--t-ini", dest="t_ini", type=int)
    parser.add_argument("--horizon", type=int)


def cmd_collect(args) -> int:
    try:
        if args.retries > 0:
            dataset = collect_with_retries(args.T, args.seed,
                                           max_attempts=args.retries + 1)
        else:
            dataset = collect_offline_data(args.T, args.seed)
    except (CollectionDiverged, RuntimeError) as exc:
        print(f"collection failed: {exc}", file=sys.stderr)
        return 1
    dataset.save_csv(args.out)
    print(f"wrote {dataset.samples} samples (seed {dataset.seed}) to {args.out}")
    return 0


def _plot_run(result, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .traffic import CAV_IDX, LOG_IDS

    plt.rcParams["svg.hashsalt"] = "rdeepc"
    n_steps = result.n_steps
    t = [k * result.dt for k in range(n_steps)]
    fig, (ax_v, ax_s) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for i in range(result.velocities.shape[1]):
        style = {"lw": 1.8, "color": "tab:red"} if i == CAV_IDX else \
            {"lw": 0.8, "color": "0.6"}
        ax_v.plot(t, result.velocities[:n_steps, i], **style)
    ax_v.set_ylabel("velocity [m/s]")
    ax_v.set_title(f"{result.controller}, seed {result.seed}")
    ax_s.plot(t, result.spacings[:n_steps, CAV_IDX], color="tab:red", lw=1.8,
              label=f"CAV (id {LOG_IDS[CAV_IDX]})")
    for bound in (result.config.s_min, result.config.s_max):
        ax_s.axhline(bound, color="k", ls="--", lw=0.8)
    ax_s.set_ylabel("spacing [m]")
    ax_s.set_xlabel("time [s]")
    ax_s.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_run(args) -> int:
    cfg = build_config(args)
    scenario = SCENARIOS[args.scenario]()
    dataset = None
    if args.controller != "allhdv":
        if not args.data:
            print("run: --data is required unless --controller allhdv",
                  file=sys.stderr)
            return 2
        dataset = load_dataset_csv(args.data)
    result = run_receding_horizon(cfg, dataset, scenario, args.seed,
                                  controller=args.controller)
    os.makedirs(args.out, exist_ok=True)
    stem = f"{args.scenario}_{args.controller}"
    result.write_trajectory_csv(os.path.join(args.out, f"{stem}_trajectory.csv"))
    write_summary_csv(result.summary(), os.path.join(args.out, f"{stem}_summary.csv"))
    if args.plot:
        _plot_run(result, os.path.join(args.out, f"{stem}.svg"))
    flag = "collision" if result.collision else \
        ("emergency" if result.safety.emergency else
         ("violation" if result.safety.violation else "clean"))
    print(f"{stem}: {result.n_steps} steps, min spacing "
          f"{result.safety.min_spacing:.2f} m, {flag}; outputs in {args.out}")
    return 1 if result.collision else 0


def cmd_batch_b(args) -> int:
    cfg = build_config(args)
    out_dir = args.out or "."
    summary, _rows = experiment_b(cfg, num_trials=args.trials, samples=args.T,
                                  base_seed=args.seed, workers=args.workers,
                                  out_dir=out_dir)
    for ctrl in ("robust", "baseline"):
        print(f"{ctrl}: violation {summary[f'{ctrl}_violation_rate']:.2f}, "
              f"emergency {summary[f'{ctrl}_emergency_rate']:.2f}, "
              f"collision {summary[f'{ctrl}_collision_rate']:.2f}")
    print(f"CSVs in {out_dir}")
    return 0


def cmd_complexity(args) -> int:
    sizes = complexity(args.method, args.t_ini, args.horizon, args.tracked,
                       anchors=args.anchors)
    print(f"{args.method}: num_vars = {sizes['num_vars']}, "
          f"num_constraints = {sizes['num_constraints']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdeepc",
        description="robust data-driven predictive control for mixed traffic")
    sub = parser.add_subparsers(dest="command", required=True)

    p_collect = sub.add_parser("collect", help="record an offline dataset")
    p_collect.add_argument("--T", type=int, required=True,
                           help="number of samples")
    p_collect.add_argument("--seed", type=int, required=True)
    p_collect.add_argument("--out", required=True, help="output CSV path")
    p_collect.add_argument("--retries", type=int, default=0,
                           help="retry collisions on a deterministic seed ladder")
    p_collect.set_defaults(func=cmd_collect)

    p_run = sub.add_parser("run", help="closed-loop scenario run")
    p_run.add_argument("--scenario", choices=sorted(SCENARIOS), required=True)
    p_run.add_argument("--controller", choices=CONTROLLERS, required=True)
    p_run.add_argument("--data", help="offline dataset CSV (from collect)")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--plot", action="store_true",
                       help="also write a static SVG of the traces")
    _add_config_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_batch = sub.add_parser("batch-b", help="Monte-Carlo braking batch")
    p_batch.add_argument("--trials", type=int, default=100)
    p_batch.add_argument("--T", type=int, required=True,
                         help="offline dataset size per trial")
    p_batch.add_argument("--seed", type=int, required=True)
    p_batch.add_argument("--out", help="output directory (default: cwd)")
    p_batch.add_argument("--workers", type=int, default=None)
    _add_config_flags(p_batch)
    p_batch.set_defaults(func=cmd_batch_b)

    p_cx = sub.add_parser("complexity", help="program sizes per method")
    p_cx.add_argument("--method", choices=COMPLEXITY_METHODS, required=True)
    p_cx.add_argument("--t-ini", dest="t_ini", type=int, default=20)
    p_cx.add_argument("--horizon", type=int, default=50)
    p_cx.add_argument("--tracked", type=int, default=5,
                      help="velocity outputs per step")
    p_cx.add_argument("--anchors", type=int, default=None,
                      help="down-sampled disturbance dimension (L methods)")
    p_cx.set_defaults(func=cmd_complexity)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
