"""Acceptance gate: one test per release criterion, each printing a single
pass/fail line with the measured quantity it was judged on."""

import time
import warnings

import numpy as np
import pytest

from rdeepc import conic
from rdeepc import data_engine as de
from rdeepc import harness as hn
from rdeepc import predictor as pr
from rdeepc import reformulation as rf
from rdeepc import uncertainty as un
from rdeepc.traffic import OvmParams, ScenarioScript, Segment


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"criterion {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


# ----------------------------------------------------------- criterion 1


def _random_controllable_lti(rng):
    nx = int(rng.integers(1, 5))
    p = int(rng.integers(1, 4))
    while True:
        A = rng.normal(size=(nx, nx))
        A *= rng.uniform(0.5, 0.95) / max(abs(np.linalg.eigvals(A)))
        B = rng.normal(size=(nx, 2))
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B
                          for k in range(nx)])
        C = rng.normal(size=(p, nx))
        if np.linalg.matrix_rank(ctrb) == nx:
            return A, B, C


def _simulate(A, B, C, u, e):
    x = np.zeros(A.shape[0])
    ys = []
    for k in range(len(u)):
        ys.append(C @ x)
        x = A @ x + B @ np.array([u[k], e[k]])
    return np.array(ys)


def test_criterion_1_linear_prediction():
    t0 = time.monotonic()
    rng = np.random.default_rng(1001)
    t_ini, horizon, T = 6, 8, 240
    worst = 0.0
    for _ in range(5):
        A, B, C = _random_controllable_lti(rng)
        u = rng.uniform(-1, 1, T)
        e = rng.uniform(-1, 1, T)
        y = _simulate(A, B, C, u, e)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            core = pr.assemble_core(de.partition(u, e, y, t_ini, horizon))
        u2 = rng.uniform(-1, 1, 60)
        e2 = rng.uniform(-1, 1, 60)
        y2 = _simulate(A, B, C, u2, e2)
        lo, mid = 60 - t_ini - horizon, 60 - horizon
        ini = pr.InitialWindow(u2[lo:mid], e2[lo:mid], y2[lo:mid])
        pred = pr.predict(core, ini, u2[mid:], e2[mid:])
        truth = y2[mid:].ravel()
        worst = max(worst,
                    np.linalg.norm(pred - truth) / np.linalg.norm(truth))
    elapsed = time.monotonic() - t0
    _report(1, "noise-free prediction", worst < 1e-8 and elapsed < 10.0,
            f"5 systems, worst rel err {worst:.2e}, {elapsed:.1f}s")


# ----------------------------------------------------------- criterion 2


def test_criterion_2_minmax_methods_agree():
    t0 = time.monotonic()
    ds = de.collect_offline_data(120, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        blocks = de.partition(ds.u, ds.eps, ds.y, 4, 6)
    core = pr.assemble_core(blocks)
    weights = pr.CostWeights()
    interps = {1: np.ones((6, 1)),
               2: un.downsample_map(6, 5)[1],
               3: un.downsample_map(6, 3)[1],
               4: un.downsample_map(6, 2)[1]}
    rng = np.random.default_rng(2002)
    worst = 0.0
    count = 0
    for n_eps, interp in interps.items():
        red = rf.Reducer(core, weights, interp)
        for _ in range(5):
            ini = pr.InitialWindow(0.05 * rng.normal(size=4),
                                   0.05 * rng.normal(size=4),
                                   0.05 * rng.normal(size=(4, 6)))
            rp = red.problem(ini, pr.ControlBounds())
            poly = un.DisturbancePolytope(-rng.uniform(0.05, 0.3, n_eps),
                                          rng.uniform(0.05, 0.3, n_eps),
                                          interp=interp)
            vp = rf.vertex_program(rp, poly, encoding="qp")
            dp = rf.dual_program(rp, poly, encoding="qp")
            sv = conic.solve(vp, "clarabel", tol=1e-9)
            sd = conic.solve(dp, "clarabel", tol=1e-9)
            assert sv.status == conic.OPTIMAL and sd.status == conic.OPTIMAL
            rel = (abs(sv.objective_value - sd.objective_value)
                   / max(1.0, abs(sv.objective_value)))
            worst = max(worst, rel)
            count += 1
    elapsed = time.monotonic() - t0
    _report(2, "vertex vs duality optima", count >= 20 and worst < 1e-6
            and elapsed < 60.0,
            f"{count} instances over anchor dims 1-4, worst rel gap "
            f"{worst:.2e}, {elapsed:.1f}s")


# ----------------------------------------------------------- criterion 3


def test_criterion_3_reduction_identity(dataset500):
    blocks = de.partition(dataset500.u, dataset500.eps, dataset500.y, 20, 50)
    core = pr.assemble_core(blocks)
    weights = pr.CostWeights()
    red = rf.Reducer(core, weights)
    rng = np.random.default_rng(3003)
    ini = pr.InitialWindow(0.1 * rng.normal(size=20),
                           0.1 * rng.normal(size=20),
                           0.1 * rng.normal(size=(20, 6)))
    rp = red.problem(ini, pr.ControlBounds())
    qbar = weights.output_weights(6, 50)
    worst = 0.0
    for _ in range(50):
        x = rng.normal(size=rp.quad.shape[0])
        u, sig, eps = x[:50], x[50:170], x[170:]
        g = core.pinv @ pr.build_target(core, ini, u, eps, sigma_y=sig)
        yfg = blocks.yf @ g
        longhand = (weights.input_weight * u @ u + yfg @ (qbar * yfg)
                    + weights.g_penalty * g @ g
                    + weights.slack_penalty * sig @ sig)
        worst = max(worst, abs(rp.objective_value(x) - longhand)
                    / abs(longhand))
    _report(3, "objective reduction", worst < 1e-9,
            f"50 random points at full size, worst rel err {worst:.2e}")


# ----------------------------------------------------------- criterion 4


def test_criterion_4_size_table():
    rng = np.random.default_rng(4004)
    mismatches = 0
    for _ in range(10):
        t = int(rng.integers(1, 26))
        n = int(rng.integers(1, 20))
        nn = int(rng.integers(1, 9))
        a = int(rng.integers(1, 9))
        for method in rf.COMPLEXITY_METHODS:
            got = rf.complexity(method, t, n, nn,
                                anchors=a if method.endswith("L") else None)
            eff = a if method.endswith("L") else n
            vars_expect = (nn + 1) * t + n + 1
            if method.startswith("M2"):
                vars_expect += 4 * n * eff
                cons_expect = 2 ** eff + 2 * n * (3 * eff + 2)
            else:
                cons_expect = 2 ** eff + n * 2 ** (eff + 1) + 2 * n
            if got != {"num_vars": vars_expect,
                       "num_constraints": cons_expect}:
                mismatches += 1
    _report(4, "exact size counts", mismatches == 0,
            f"10 random tuples across all four variants, "
            f"{mismatches} mismatches")


# ----------------------------------------------------------- criterion 5


def test_criterion_5_downsample_containment():
    rng = np.random.default_rng(5005)
    horizon, ts = 50, 12
    hist = np.cumsum(rng.uniform(-0.3, 0.5, 30))
    violations = 0
    for full in (un.estimate_constant_bounds(hist, horizon),
                 un.estimate_timevarying_bounds(hist, horizon, 0.05)):
        small = un.apply_downsampling(full, ts)
        pts = small.sample(rng, 1000)
        lifted = pts @ small.interp.T
        violations += int(np.sum((lifted < full.lower - 1e-9)
                                 | (lifted > full.upper + 1e-9)))
    _report(5, "anchor set containment", violations == 0,
            f"1000 samples per estimator lifted to the horizon, "
            f"{violations} bound violations")


# ----------------------------------------------------------- criterion 8


def test_criterion_8_equilibrium_hold(dataset500):
    quiet = OvmParams(noise_amp=0.0)
    scen = hn.Scenario(name="cruise50",
                       script=ScenarioScript(
                           initial_velocity=15.0,
                           segments=[Segment(50.0, "hold_velocity", 15.0)]),
                       duration=50.0, phases=[])
    cfg = hn.ControllerConfig()
    def platoon_dev(res):
        return max(np.abs(res.velocities - 15.0).max(),
                   np.abs(res.spacings[:, 1:] - 20.0).max())

    hdv = hn.run_receding_horizon(cfg, None, scen, 7, "allhdv", params=quiet)
    dev_hdv = platoon_dev(hdv)
    rob = hn.run_receding_horizon(cfg, dataset500, scen, 7, "robust",
                                  params=quiet)
    dev_rob = platoon_dev(rob)
    _report(8, "noise-free equilibrium hold",
            dev_rob < 0.05 and dev_hdv < 1e-9 and hdv.n_steps == 1000,
            f"1000 steps, robust dev {dev_rob:.2e}, "
            f"all-human dev {dev_hdv:.2e}")


# ----------------------------------------------------------- criterion 9


def test_criterion_9_bit_reproducibility(dataset500, tmp_path):
    scen = hn.Scenario(name="dip",
                       script=ScenarioScript(
                           initial_velocity=15.0,
                           segments=[Segment(1.5, "hold_velocity", 15.0),
                                     Segment(1.0, "constant_accel", -3.0),
                                     Segment(1.5, "constant_accel", 3.0)]),
                       duration=4.0, phases=[])
    cfg = hn.ControllerConfig()
    blobs = []
    for i in range(2):
        res = hn.run_receding_horizon(cfg, dataset500, scen, 77, "robust")
        tpath = tmp_path / f"traj{i}.csv"
        spath = tmp_path / f"summ{i}.csv"
        res.write_trajectory_csv(tpath)
        hn.write_summary_csv(res.summary(), spath)
        dpath = tmp_path / f"data{i}.csv"
        de.collect_offline_data(200, 99).save_csv(dpath)
        blobs.append((tpath.read_bytes(), spath.read_bytes(),
                      dpath.read_bytes()))
    same = blobs[0] == blobs[1]
    _report(9, "bit-identical artifacts", same,
            "trajectory, summary, and dataset CSV bytes "
            + ("all match" if same else "differ"))


# ----------------------------------------------------------- criterion 7


def test_criterion_7_fuel_economy():
    t0 = time.monotonic()
    dataset = hn.collect_with_retries(1500, 2024)
    result = hn.experiment_a(hn.ControllerConfig(), dataset, seed=2024)
    totals = next(row for row in result["table"] if row["phase"] == "total")
    elapsed = time.monotonic() - t0
    ordered = totals["robust"] <= totals["baseline"] <= totals["allhdv"]
    saving = 100.0 * (1.0 - totals["robust"] / totals["allhdv"])
    _report(7, "fuel economy ordering",
            ordered and saving >= 1.0 and elapsed < 300.0,
            f"totals robust {totals['robust']:.1f} <= baseline "
            f"{totals['baseline']:.1f} <= all-human {totals['allhdv']:.1f}, "
            f"saving {saving:.2f}%, {elapsed:.0f}s")


# ----------------------------------------------------------- criterion 6


def test_criterion_6_safety_rates(tmp_path):
    t0 = time.monotonic()
    cfg = hn.ControllerConfig()
    rates = {}
    for samples, cap in ((500, 0.10), (1500, 0.02)):
        out, _ = hn.experiment_b(cfg, 100, samples, 2024, workers=1,
                                 out_dir=tmp_path / str(samples))
        rates[samples] = (out["robust_emergency_rate"],
                          out["baseline_emergency_rate"], cap)
    elapsed = time.monotonic() - t0
    ok = elapsed <= 1800.0
    pieces = []
    for samples, (rob, base, cap) in rates.items():
        ok = ok and rob <= cap and base > rob
        pieces.append(f"T={samples}: robust {rob:.2f} (cap {cap}), "
                      f"baseline {base:.2f}")
    _report(6, "braking safety rates", ok,
            "; ".join(pieces) + f", {elapsed / 60:.1f} min")
