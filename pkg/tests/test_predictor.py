"""Tests for the behavioral predictor: slot layout, pseudoinverse map,
exactness on linear systems, and the full-size quadratic baseline program."""

import warnings

import numpy as np
import pytest

from rdeepc import data_engine as de
from rdeepc import predictor as pr


def _small_blocks(seed: int = 3, t_ini: int = 4, horizon: int = 6):
    ds = de.collect_offline_data(120, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return de.partition(ds.u, ds.eps, ds.y, t_ini, horizon)


# ---------------------------------------------------------------- slots


def test_target_slots_layout():
    slots = pr.TargetSlots.make(3, 2, 4)
    assert slots.u_ini == slice(0, 3)
    assert slots.e_ini == slice(3, 6)
    assert slots.y_ini == slice(6, 18)
    assert slots.u_fut == slice(18, 20)
    assert slots.e_fut == slice(20, 22)


def test_target_rows_default_dims(dataset500):
    blocks = de.partition(dataset500.u, dataset500.eps, dataset500.y, 20, 50)
    core = pr.assemble_core(blocks)
    # (2 + p) * t_ini + 2 * horizon rows, p = 6 tracked output channels
    assert core.stack.shape == (260, 431)
    assert core.pinv.shape == (431, 260)
    assert core.output_map.shape == (300, 260)
    assert core.pinv_gram.shape == (260, 260)
    assert 0 < core.rank <= 260


# ------------------------------------------------------- linear exactness


def _simulate_lti(A, B, C, u, e):
    x = np.zeros(A.shape[0])
    ys = []
    for k in range(len(u)):
        ys.append(C @ x)
        x = A @ x + B @ np.array([u[k], e[k]])
    return np.array(ys)


def test_predictor_exact_on_linear_system():
    rng = np.random.default_rng(11)
    nx, p, t_ini, horizon, T = 3, 2, 6, 8, 240
    A = rng.normal(size=(nx, nx))
    A *= 0.85 / max(abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(nx, 2))
    C = rng.normal(size=(p, nx))

    u = rng.uniform(-1, 1, T)
    e = rng.uniform(-1, 1, T)
    y = _simulate_lti(A, B, C, u, e)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        blocks = de.partition(u, e, y, t_ini, horizon)
    core = pr.assemble_core(blocks)

    # fresh trajectory from the same system, zero initial state
    u2 = rng.uniform(-1, 1, 60)
    e2 = rng.uniform(-1, 1, 60)
    y2 = _simulate_lti(A, B, C, u2, e2)
    lo, mid, hi = 60 - t_ini - horizon, 60 - horizon, 60
    ini = pr.InitialWindow(u2[lo:mid], e2[lo:mid], y2[lo:mid])
    pred = pr.predict(core, ini, u2[mid:hi], e2[mid:hi])
    truth = y2[mid:hi].ravel()
    rel = np.linalg.norm(pred - truth) / np.linalg.norm(truth)
    assert rel < 1e-8


def test_predict_is_output_map_times_target():
    blocks = _small_blocks()
    core = pr.assemble_core(blocks)
    rng = np.random.default_rng(0)
    ini = pr.InitialWindow(rng.normal(size=4), rng.normal(size=4),
                           rng.normal(size=(4, 6)))
    u = rng.normal(size=6)
    eps = rng.normal(size=6)
    target = pr.build_target(core, ini, u, eps)
    assert np.array_equal(pr.predict(core, ini, u, eps),
                          core.output_map @ target)


def test_predict_zero_slack_matches_no_slack():
    blocks = _small_blocks()
    core = pr.assemble_core(blocks)
    rng = np.random.default_rng(1)
    ini = pr.InitialWindow(rng.normal(size=4), rng.normal(size=4),
                           rng.normal(size=(4, 6)))
    u, eps = rng.normal(size=6), rng.normal(size=6)
    base = pr.predict(core, ini, u, eps)
    slacked = pr.predict(core, ini, u, eps, sigma_y=np.zeros(24))
    assert np.allclose(base, slacked)


def test_pinv_gram_is_pinv_t_pinv():
    blocks = _small_blocks()
    core = pr.assemble_core(blocks)
    assert np.allclose(core.pinv_gram, core.pinv.T @ core.pinv)


# ------------------------------------------------------------ validation


def test_initial_window_requires_2d_outputs():
    with pytest.raises(ValueError):
        pr.InitialWindow(np.zeros(4), np.zeros(4), np.zeros(24))


def test_initial_window_length_mismatch():
    with pytest.raises(ValueError):
        pr.InitialWindow(np.zeros(4), np.zeros(3), np.zeros((4, 6)))


def test_initial_window_matches_core():
    blocks = _small_blocks()
    core = pr.assemble_core(blocks)
    good = pr.InitialWindow(np.zeros(4), np.zeros(4), np.zeros((4, 6)))
    bad = pr.InitialWindow(np.zeros(5), np.zeros(5), np.zeros((5, 6)))
    assert good.matches(core)
    assert not bad.matches(core)


def test_build_target_rejects_wrong_horizon():
    blocks = _small_blocks()
    core = pr.assemble_core(blocks)
    ini = pr.InitialWindow(np.zeros(4), np.zeros(4), np.zeros((4, 6)))
    with pytest.raises(ValueError):
        pr.build_target(core, ini, np.zeros(5), np.zeros(6))
    with pytest.raises(ValueError):
        pr.build_target(core, ini, np.zeros(6), np.zeros(6),
                        sigma_y=np.zeros(7))


# ------------------------------------------------------------ weights


def test_output_weights_pattern():
    w = pr.CostWeights(velocity_weight=1.0, spacing_weight=0.5)
    got = w.output_weights(3, 2)
    assert np.array_equal(got, [1.0, 1.0, 0.5, 1.0, 1.0, 0.5])


def test_spacing_selector_picks_last_channel():
    sel = pr.spacing_selector(3, 2).toarray()
    expect = np.zeros((2, 6))
    expect[0, 2] = 1.0
    expect[1, 5] = 1.0
    assert np.array_equal(sel, expect)


def test_baseline_hessian_factor_reconstructs():
    blocks = _small_blocks()
    w = pr.CostWeights()
    H = pr.baseline_hessian(blocks, w)
    F = pr.baseline_hessian_factor(blocks, w)
    assert np.allclose(F.T @ F, H, atol=1e-10 * max(1.0, abs(H).max()))


# ------------------------------------------------------- baseline program


def test_baseline_equality_row_count():
    blocks = _small_blocks()
    ini = pr.InitialWindow(np.zeros(4), np.zeros(4), np.zeros((4, 6)))
    prog = pr.assemble_baseline(blocks, ini, pr.CostWeights(),
                                pr.ControlBounds())
    eq_rows = sum(m.shape[0] for m, _ in prog._eq)
    # t_ini input rows + t_ini disturbance rows + horizon disturbance rows
    assert eq_rows == 4 + 4 + 6


def test_baseline_encodings_share_optimum():
    blocks = _small_blocks()
    rng = np.random.default_rng(5)
    ini = pr.InitialWindow(0.1 * rng.normal(size=4), 0.1 * rng.normal(size=4),
                           0.1 * rng.normal(size=(4, 6)))
    from rdeepc import conic
    vals = []
    for encoding in ("soc", "qp"):
        prog = pr.assemble_baseline(blocks, ini, pr.CostWeights(),
                                    pr.ControlBounds(), encoding=encoding)
        sol = conic.solve(prog, "clarabel", tol=1e-9)
        assert sol.status == conic.OPTIMAL
        vals.append(prog.objective_value(sol.x) if encoding == "qp"
                    else sol.objective_value)
    assert vals[0] == pytest.approx(vals[1], rel=1e-6, abs=1e-8)
