import hashlib
import subprocess
import sys

import numpy as np
import pytest

from rslkit import cli

from .conftest import CLI_CASES, cli_argv, cli_workspace

OUTPUTS = {
    "synth": {"synthetic.csv", "truth.csv"},
    "ingest": {"dataset.csv", "sites.csv"},
    "fit-linear": {"linear.csv"},
    "fit-changepoint": {"changepoint_summary.csv", "changepoint_chain.csv", "level.csv"},
    "fit-gp": {"level.csv", "hyperparameters.csv"},
    "fit-nigp": {"level.csv", "inflation.csv"},
    "fit-igp": {"level.csv", "rate.csv", "chain.csv"},
    "fit-stgp": {"site_curves.csv", "hyperparameters.csv"},
    "decompose": {"component_common.csv", "component_regional.csv", "component_local.csv"},
    "diagnose": {"residuals.csv", "acf.csv"},
    "cross-validate": {"cross_validation.csv"},
    "kalman": {"smoothed.csv", "gmsl.csv", "weights.csv"},
    "eof": {"eof_patterns.csv", "eof_variance.csv", "eof_fit.csv"},
    "virtual-station": {"gmsl.csv", "regional.csv", "stations.csv"},
}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = cli_workspace(tmp_path_factory.mktemp("cli"))
    assert cli.run(cli_argv(root, "synth", root, seed=9)) == 0
    return root


def read_rows(path):
    return path.read_text().splitlines()


def test_fit_gp_grid_rows(ws, tmp_path):
    argv = ["fit-gp", "--input", str(ws / "toy.csv"), "--seed", "1", "--grid", "-2000:0:100", "--out", str(tmp_path),
            "--config", str(ws / "fast.ini")]
    assert cli.run(argv) == 0
    rows = read_rows(tmp_path / "level.csv")
    assert rows[0] == "time,mean,sd,p2.5,p97.5"
    assert len(rows) == 22
    assert float(rows[1].split(",")[0]) == -2000.0


@pytest.mark.parametrize("sub", sorted(CLI_CASES))
def test_every_subcommand_writes_outputs(ws, tmp_path, sub):
    assert cli.run(cli_argv(ws, sub, tmp_path)) == 0
    files = {p.name for p in tmp_path.iterdir()}
    assert OUTPUTS[sub] | {"manifest.txt"} <= files
    for name in OUTPUTS[sub]:
        assert len(read_rows(tmp_path / name)) >= 2


def test_unknown_flag_is_usage_error(ws, tmp_path, capsys):
    assert cli.run(["fit-gp", "--bogus", "--out", str(tmp_path)]) == 2
    assert "usage:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["fit-gp", "--input", "{ws}/toy.csv"],
    ["fit-gp", "--input", "{ws}/toy.csv", "--seed", "1", "--grid", "0:-5:1"],
    ["fit-gp", "--input", "{ws}/toy.csv", "--seed", "1", "--grid", "a:b"],
    ["fit-gp", "--input", "{ws}/missing.csv", "--seed", "1"],
    ["fit-linear"],
    ["fit-linear", "--input", "{ws}/toy.csv", "--threads", "0"],
    ["fit-linear", "--input", "{ws}/toy.csv", "--config", "{ws}/nope.ini"],
])
def test_usage_errors_exit_2(ws, tmp_path, argv):
    argv = [a.format(ws=ws) for a in argv] + ["--out", str(tmp_path)]
    assert cli.run(argv) == 2
    assert not (tmp_path / "manifest.txt").exists()


def test_computation_error_exits_1(ws, tmp_path, capsys):
    # multi-site data with no site chosen
    argv = ["fit-gp", "--input", str(ws / "synthetic.csv"), "--seed", "1", "--out", str(tmp_path)]
    assert cli.run(argv) == 1
    assert "fit-gp failed" in capsys.readouterr().err


def outputs(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.suffix == ".csv"}


@pytest.mark.parametrize("sub", ["fit-gp", "fit-changepoint", "synth"])
def test_same_seed_same_bytes(ws, tmp_path, sub):
    assert cli.run(cli_argv(ws, sub, tmp_path / "a")) == 0
    assert cli.run(cli_argv(ws, sub, tmp_path / "b")) == 0
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")
    if sub != "fit-gp":  # multi-start optimisation lands on the same optimum whatever the seed
        assert cli.run(cli_argv(ws, sub, tmp_path / "c", seed=6)) == 0
        assert outputs(tmp_path / "c") != outputs(tmp_path / "a")


def test_inputs_not_modified(ws, tmp_path):
    def digest():
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in ws.iterdir() if p.is_file()}
    before = digest()
    for sub in ("ingest", "fit-gp", "kalman", "eof"):
        assert cli.run(cli_argv(ws, sub, tmp_path / sub)) == 0
    assert digest() == before


def test_thread_cap_does_not_change_results(ws, tmp_path):
    assert cli.run(cli_argv(ws, "fit-gp", tmp_path / "a", extra=["--threads", "1"])) == 0
    assert cli.run(cli_argv(ws, "fit-gp", tmp_path / "b")) == 0
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        ra, rb = a[name].decode().splitlines(), b[name].decode().splitlines()
        assert len(ra) == len(rb)
        for x, y in zip(",".join(ra).split(","), ",".join(rb).split(",")):
            try:
                assert float(x) == pytest.approx(float(y), rel=1e-8, abs=1e-12)
            except ValueError:
                assert x == y


def test_manifest_records_run(ws, tmp_path):
    assert cli.run(cli_argv(ws, "fit-gp", tmp_path, extra=["--threads", "1"])) == 0
    kv = dict(line.split(" = ", 1) for line in read_rows(tmp_path / "manifest.txt"))
    assert kv["subcommand"] == "fit-gp"
    assert kv["seed"] == "5"
    assert kv["threads"] == "1"
    assert kv["config.site"] == "A"
    for key in ("rslkit", "backend", "numpy", "scipy", "python", "time.total", "time.fit-gp"):
        assert key in kv


def test_seed_from_config(ws, tmp_path):
    cfg = ws / "seeded.ini"
    cfg.write_text((ws / "fast.ini").read_text() + "seed = 5\n")
    argv = ["fit-gp", "--input", str(ws / "synthetic.csv"), "--config", str(cfg), "--out", str(tmp_path / "a")]
    assert cli.run(argv) == 0
    assert cli.run(cli_argv(ws, "fit-gp", tmp_path / "b")) == 0
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "rslkit.cli", "synth", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 2
    assert "stochastic" in out.stderr


def test_parse_grid():
    np.testing.assert_allclose(cli.parse_grid("0:1:0.25"), [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(cli.parse_grid("-10:-1:4"), [-10, -6, -2])
