import csv
import math
import subprocess
import sys

import pytest

from ghostgame.cli import RunConfig, main, parse_payoff
from ghostgame.errors import ConfigError
from ghostgame.model import Payoff

WORKED = ["--set", "mu=0", "--set", f"sigma={math.sqrt(2.0)!r}", "--set", "r=2"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_roots_command(capsys):
    assert main(["roots", "--mu", "0", "--sigma", "1.4142135623730951", "--r", "2"]) == 0
    out = capsys.readouterr().out
    values = dict(line.split("=") for line in out.split())
    assert abs(float(values["gamma"]) - 2) < 1e-12 and abs(float(values["eta"]) + 1) < 1e-12
    assert main(["roots", "--mu", "0.08", "--sigma", "0.01", "--r", "0.1"]) == 0
    assert "gamma=1.2498" in capsys.readouterr().out
    assert main(["roots", "--mu", "0.2", "--sigma", "0.1", "--r", "0.1"]) == 2
    assert "DriftNotBelowRate" in capsys.readouterr().err


def test_config_round_trip():
    cfg = RunConfig(mu=0.0, sigma=math.sqrt(2.0), r=2.0, x0=4.5, mode="ode", h1="zero", h2="zero", g1="call:1.0",
                    g2="call:1.0", seed=17, config_id="abc")
    text = cfg.serialize()
    again = RunConfig.parse(text)
    assert again == cfg
    assert again.serialize() == text


def test_config_parsing_and_errors():
    cfg = RunConfig.parse("# comment\nx0 = 12.5  # trailing\n\np1=0.1\n", {"seed": "3"})
    assert cfg.x0 == 12.5 and cfg.p1 == 0.1 and cfg.seed == 3
    with pytest.raises(ConfigError):
        RunConfig.parse("bogus = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("x0 12\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("dt = fast\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("mode = other\n")
    assert parse_payoff("put:2.5") == Payoff.put(2.5)
    with pytest.raises(ConfigError):
        parse_payoff("call")


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("x0 = ten\n")
    assert main(["boundary", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["boundary", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["boundary", "--set", "nokey=1"]) == 2
    assert main(["nosuchcommand"]) == 2
    # asym ordering violated
    assert main(["boundary", "--out", str(tmp_path), "--set", "mode=asym", "--set", "g2=call:3.5"]) == 2
    capsys.readouterr()


def test_boundary_command_worked_family(tmp_path, capsys):
    args = ["boundary", "--out", str(tmp_path), *WORKED, "--set", "x_min=4", "--set", "x_max=6",
            "--set", "x_points=11"]
    assert main(args) == 0
    rows = read_csv(tmp_path / "boundary.csv")
    assert rows[0] == ["x", "b"]
    table = {round(float(x), 9): float(b) for x, b in rows[1:]}
    assert abs(table[5.0] - 0.16) <= 1e-10
    assert table[4.0] == 1.0 and table[6.0] == 0.0
    out = capsys.readouterr().out
    assert "a=4.0" in out and "b_g=6.0" in out


def test_boundary_command_ode_and_slow_drift(tmp_path):
    args = ["boundary", "--out", str(tmp_path), *WORKED, "--set", "mode=ode", "--set", "g1=call:1",
            "--set", "g2=call:1", "--set", "h1=zero", "--set", "h2=zero", "--set", "x_min=1",
            "--set", "x_max=2", "--set", "x_points=4", "--quiet"]
    assert main(args) == 0
    rows = read_csv(tmp_path / "boundary.csv")
    assert abs(float(rows[2][0]) - 4 / 3) < 1e-12 and abs(float(rows[2][1]) - 0.25) < 1e-6
    assert main(["boundary", "--out", str(tmp_path), "--quiet"]) == 0
    rows = read_csv(tmp_path / "boundary.csv")[1:]
    b = [float(r[1]) for r in rows]
    assert b[0] == 1.0 and b[-1] == 0.0
    assert all(x >= y for x, y in zip(b, b[1:]))
    assert abs(float(rows[-1][0]) - 15.0094) < 1e-3


def test_value_command(tmp_path):
    assert main(["value", "--out", str(tmp_path), *WORKED, "--set", "p_points=3", "--set", "x_points=5",
                 "--quiet"]) == 0
    rows = read_csv(tmp_path / "values.csv")
    assert rows[0] == ["x", "p1", "u1", "u2"]
    assert len(rows) == 1 + 15
    for x, p, u1, u2 in rows[1:]:
        assert float(u2) >= max(float(x) - 3.0, 0.0) - 1e-12


def test_simulate_is_deterministic(tmp_path):
    args = [*WORKED, "--set", "x0=5", "--paths", "2000", "--seed", "3", "--quiet"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--out", str(a), *args]) == 0
    assert main(["simulate", "--out", str(b), *args]) == 0
    for name in ("path.csv", "estimates.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    est = read_csv(a / "estimates.csv")
    assert est[0] == ["config_id", "player", "mode", "mean", "se", "n", "u_value", "within_3se"]
    assert len(est) == 5
    path = read_csv(a / "path.csv")
    assert path[0] == ["t", "X", "Pi1", "Gamma1", "Gamma2"]


def test_simulate_constant_belief_when_gamma2_idle(tmp_path):
    # p1 below the boundary on the whole range reached before b_g: Pi1 stays at p1
    assert main(["simulate", "--out", str(tmp_path), *WORKED, "--set", "x0=4.2", "--set", "p1=0.01",
                 "--set", "p2=0.6", "--paths", "200", "--quiet", "--set", "horizon=0.05"]) == 0
    rows = read_csv(tmp_path / "path.csv")[1:]
    assert all(float(r[2]) == 0.01 for r in rows)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ghostgame", "roots", "--mu", "0", "--sigma", "1", "--r", "1"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("gamma=")


@pytest.mark.slow
def test_verify_exit_codes(tmp_path):
    base = ["verify", *WORKED, "--set", "x0=4.5", "--paths", "8000", "--quiet", "--set", "chunk=4000"]
    assert main([*base, "--out", str(tmp_path / "ok")]) == 0
    verdicts = dict(read_csv(tmp_path / "ok" / "verdicts.csv")[1:])
    assert set(verdicts.values()) == {"pass"}
    assert "M1:martingale_until_stop" in verdicts and "player2:no_profitable_deviation" in verdicts
    assert len(read_csv(tmp_path / "ok" / "deviations.csv")) == 1 + 28
    assert main([*base, "--out", str(tmp_path / "bad"), "--perturb-u1", "1.1"]) == 1
    verdicts = dict(read_csv(tmp_path / "bad" / "verdicts.csv")[1:])
    assert verdicts["player1:stops_where_u_equals_g"] == "fail"
