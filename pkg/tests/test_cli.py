"""Command-line surface: argument parsing, config files, and the fast
subcommands end to end."""

import numpy as np
import pytest

from rdeepc import cli
from rdeepc import data_engine as de


def test_complexity_command_prints_counts(capsys):
    rc = cli.main(["complexity", "--method", "M1L", "--t-ini", "20",
                   "--horizon", "50", "--anchors", "3"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "171" in out and "908" in out


def test_complexity_command_exact_big_int(capsys):
    rc = cli.main(["complexity", "--method", "M1", "--t-ini", "20",
                   "--horizon", "50"])
    assert rc == 0
    assert "113715890591105124" in capsys.readouterr().out


def test_collect_command_writes_loadable_csv(tmp_path):
    out = tmp_path / "data.csv"
    rc = cli.main(["collect", "--T", "150", "--seed", "5",
                   "--out", str(out)])
    assert rc == 0
    ds = de.load_dataset_csv(out)
    assert ds.u.shape == (150,)
    direct = de.collect_offline_data(150, 5)
    assert np.allclose(ds.u, direct.u)
    assert np.allclose(ds.y, direct.y)


def test_config_file_parsing(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("# tuning used for the braking study\nmethod = vertex\n"
                 "ts = 6\nsolve_tol = 1e-6\n")
    got = cli.read_config_file(p)
    assert got == {"method": "vertex", "ts": 6, "solve_tol": 1e-6}


def test_config_file_rejects_unknown_keys(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("bogus = 1\n")
    with pytest.raises(ValueError):
        cli.read_config_file(p)


def test_cli_flags_override_config_file(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("method = vertex\nts = 6\n")
    parser = cli.build_parser()
    args = parser.parse_args(["run", "--scenario", "brake",
                              "--controller", "robust",
                              "--out", str(tmp_path),
                              "--config", str(p), "--method", "dual"])
    cfg = cli.build_config(args)
    assert cfg.method == "dual"    # flag beats file
    assert cfg.ts == 6             # file beats default


def test_run_command_allhdv_brake(tmp_path):
    rc = cli.main(["run", "--scenario", "brake", "--controller", "allhdv",
                   "--out", str(tmp_path), "--seed", "3"])
    assert rc == 0
    traj = tmp_path / "brake_allhdv_trajectory.csv"
    summ = tmp_path / "brake_allhdv_summary.csv"
    assert traj.exists() and summ.exists()
    header = traj.read_text().splitlines()[0].split(",")
    assert header[0] == "t"
