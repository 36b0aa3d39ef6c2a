"""Command-line entry point: `ghostgame {roots,value,boundary,simulate,verify}`.

Configuration is a flat `key = value` file with `#` comments; command-line flags
override file values. Exit codes: 0 pass, 1 verification failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sim
from .boundary import EquilibriumValues, solve_asymmetric, solve_symmetric
from .errors import ConfigError, GhostGameError
from .model import GameSpec, Payoff, PlayerSpec, characteristic_roots, validate
from .strategy import EquilibriumControls, asym_controls, belief, sym_controls

MODES = ("martingale", "ode", "asym")


def parse_payoff(text: str) -> Payoff:
    """`call:3`, `put:2.5` or `zero`."""
    text = text.strip().lower()
    if text == "zero":
        return Payoff.zero()
    kind, sep, strike = text.partition(":")
    if not sep or kind not in ("call", "put"):
        raise ConfigError(f"bad payoff {text!r}; expected call:K, put:K or zero")
    try:
        return Payoff(kind, float(strike))
    except ValueError as exc:
        raise ConfigError(f"bad payoff {text!r}: {exc}") from exc


def format_payoff(p: Payoff) -> str:
    return "zero" if p.kind == "zero" else f"{p.kind}:{p.strike!r}"


@dataclass
class RunConfig:
    mu: float = 0.08
    sigma: float = 0.01
    r: float = 0.1
    x0: float = 10.0
    p1: float = 0.3
    p2: float = 0.6
    g1: str = "call:3.0"
    h1: str = "call:4.0"
    g2: str = "call:3.0"
    h2: str = "call:4.0"
    mode: str = "martingale"
    reading: str = "consistent"
    dt: float = 1e-3
    horizon: float = 0.0  # 0 selects the tail-bound horizon
    n_paths: int = 20000
    seed: int = 20240607
    chunk: int = 2000
    output_dir: str = "out"
    x_min: float = 0.0  # 0 selects an automatic range
    x_max: float = 0.0
    x_points: int = 201
    p_min: float = 0.1
    p_max: float = 0.9
    p_points: int = 9
    config_id: str = "run"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            try:
                if f.type in ("float", float):
                    value = float(value)
                elif f.type in ("int", int):
                    value = int(value)
                else:
                    value = str(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{f.name}: cannot read {value!r}") from exc
            setattr(self, f.name, value)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.reading not in ("consistent", "literal"):
            raise ConfigError("reading must be consistent or literal")
        if self.dt <= 0 or self.n_paths < 2 or self.chunk < 2:
            raise ConfigError("need dt > 0, n_paths >= 2 and chunk >= 2")
        if self.horizon < 0 or self.x_points < 2 or self.p_points < 1:
            raise ConfigError("bad horizon or grid sizes")
        for name in ("g1", "h1", "g2", "h2"):
            parse_payoff(getattr(self, name))

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ConfigError(f"line {lineno}: expected key = value with a known key, got {raw!r}")
            values[key] = value.strip()
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(**values)

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class Setup:
    config: RunConfig
    game: GameSpec
    eq: EquilibriumValues
    controls: EquilibriumControls

    @property
    def upper_levels(self) -> tuple[float, float]:
        """(b_g for player 1, b_g for player 2)."""
        if self.config.mode == "asym":
            return self.eq.Vg1.threshold, self.eq.Vg2.threshold
        return self.eq.boundary.upper_bg, self.eq.boundary.upper_bg


def build_game(cfg: RunConfig) -> GameSpec:
    params = validate(cfg.mu, cfg.sigma, cfg.r)
    return GameSpec(
        params, cfg.x0,
        PlayerSpec(parse_payoff(cfg.g1), parse_payoff(cfg.h1), cfg.p1),
        PlayerSpec(parse_payoff(cfg.g2), parse_payoff(cfg.h2), cfg.p2),
    )


def solve(cfg: RunConfig, game: GameSpec | None = None) -> EquilibriumValues:
    game = build_game(cfg) if game is None else game
    pl1, pl2 = game.player1, game.player2
    if pl1.g.kind != "call" or pl2.g.kind != "call":
        raise ConfigError("the solvers need call payoffs g_i")
    if cfg.mode == "asym":
        if pl1.h.kind != "call" or pl2.h.kind != "call":
            raise ConfigError("asym mode needs call consolations h_i")
        return solve_asymmetric(game.params, pl1.g.strike, pl1.h.strike, pl2.g.strike, pl2.h.strike)
    if pl1.g != pl2.g or pl1.h != pl2.h:
        raise ConfigError(f"{cfg.mode} mode needs identical payoffs for both players")
    return solve_symmetric(game.params, pl1.g.strike, pl1.h, cfg.mode)


def setup(cfg: RunConfig, perturb_u1: float | None = None) -> Setup:
    game = build_game(cfg)
    eq = solve(cfg, game)
    if cfg.mode == "asym":
        controls = asym_controls(eq, cfg.x0, cfg.p1, cfg.p2, cfg.reading)
    else:
        controls = sym_controls(eq.boundary, cfg.x0, cfg.p1, cfg.p2)
    if perturb_u1 is not None:
        eq = eq.perturbed(perturb_u1)
    return Setup(cfg, game, eq, controls)


def horizon_for(cfg: RunConfig, game: GameSpec, scale: float) -> float:
    if cfg.horizon > 0:
        return cfg.horizon
    return sim.default_horizon(game.params, cfg.x0, max(scale, 1e-12), dt=cfg.dt)


def settings_for(cfg: RunConfig, horizon: float) -> sim.SimSettings:
    return sim.SimSettings(cfg.dt, horizon, cfg.n_paths, cfg.seed, chunk=cfg.chunk)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "pass" if v else "fail"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _x_grid(cfg: RunConfig, lo: float, hi: float) -> np.ndarray:
    a = cfg.x_min if cfg.x_min > 0 else lo
    b = cfg.x_max if cfg.x_max > 0 else hi
    if not 0 < a < b:
        raise ConfigError("x-range must satisfy 0 < x_min < x_max")
    return np.linspace(a, b, cfg.x_points)


# ---------------------------------------------------------------------------
# commands


def cmd_roots(args) -> int:
    params = validate(args.mu, args.sigma, args.r)
    roots = characteristic_roots(params)
    print(f"gamma={roots.gamma!r}")
    print(f"eta={roots.eta!r}")
    return 0


def cmd_value(cfg: RunConfig, out: Path, quiet: bool) -> int:
    st = setup(cfg)
    eq = st.eq
    a = eq.boundary.touch_a
    top = max(st.upper_levels)
    xs = _x_grid(cfg, 0.5 * a, 1.2 * top)
    ps = np.linspace(cfg.p_min, cfg.p_max, cfg.p_points)
    rows = []
    for p in ps:
        u1 = eq.u1(xs, p)
        u2 = eq.u2(xs, p)
        rows.extend(zip(xs, [p] * xs.size, u1, u2))
    _write_csv(out / "values.csv", ["x", "p1", "u1", "u2"], rows)
    if not quiet:
        print(f"u1(x0, p1) = {float(eq.u1(cfg.x0, cfg.p1))!r}")
        print(f"u2(x0, p1) = {float(eq.u2(cfg.x0, cfg.p1))!r}")
        print(f"wrote {out / 'values.csv'}")
    return 0


def cmd_boundary(cfg: RunConfig, out: Path, quiet: bool) -> int:
    st = setup(cfg)
    b = st.eq.boundary
    xs = _x_grid(cfg, b.touch_a, b.upper_bg)
    _write_csv(out / "boundary.csv", ["x", "b"], zip(xs, np.asarray(b(xs))))
    if not quiet:
        print(f"a={b.touch_a!r}")
        print(f"b_g={b.upper_bg!r}")
        print(f"wrote {out / 'boundary.csv'}")
    return 0


def _estimates(st: Setup, settings: sim.SimSettings) -> list:
    cfg, game, eq, c = st.config, st.game, st.eq, st.controls
    res = sim.monte_carlo(game, {"eq": (c.gamma1, c.gamma2)}, settings)["eq"]
    u = {1: float(eq.u1(cfg.x0, cfg.p1)), 2: float(eq.u2(cfg.x0, cfg.p1))}
    rows = []
    for player in (1, 2):
        for mode in ("formula", "indicator"):
            e = res.get(player, mode)
            ok = abs(e.mean - u[player]) <= 3.0 * e.std_error + 1e-12
            rows.append((cfg.config_id, player, mode, e.mean, e.std_error, e.n, u[player], ok))
    return rows


def cmd_simulate(cfg: RunConfig, out: Path, quiet: bool) -> int:
    st = setup(cfg)
    game, c = st.game, st.controls
    scale = float(st.eq.u1(cfg.x0, cfg.p1))
    horizon = horizon_for(cfg, game, scale)
    path = sim.simulate_paths(game.params, cfg.x0, cfg.dt, horizon, 1, cfg.seed,
                              stop_level=max(st.upper_levels))
    times = path.times
    S = path.running_max[0]
    gam1 = np.asarray(c.gamma1(S))
    gam2 = np.asarray(c.gamma2(S))
    pi1 = belief(cfg.p1, gam2)
    _write_csv(out / "path.csv", ["t", "X", "Pi1", "Gamma1", "Gamma2"],
               zip(times, path.states[0], pi1, gam1, gam2))
    rows = _estimates(st, settings_for(cfg, horizon))
    _write_csv(out / "estimates.csv",
               ["config_id", "player", "mode", "mean", "se", "n", "u_value", "within_3se"], rows)
    if not quiet:
        for row in rows:
            print(f"J{row[1]} {row[2]:9s} {row[3]:.6f} +- {row[4]:.6f}  (u = {row[6]:.6f}, {_fmt(row[7])})")
        print(f"wrote {out / 'path.csv'} and {out / 'estimates.csv'}")
    return 0


def run_verify(st: Setup, settings: sim.SimSettings, checkpoints: int = 5) -> sim.DiagnosticsReport:
    """Martingale diagnostics, value identities, support checks and deviation tests."""
    cfg, game, eq, c = st.config, st.game, st.eq, st.controls
    b1, b2 = st.upper_levels
    stop_level = min(b1, b2)
    top_dev = 1.2 * max(b1, b2)
    # checkpoints spread over the part of the horizon where stopping happens
    width = int(round(settings.horizon / settings.dt))
    ck = np.unique(np.linspace(0, width, checkpoints + 1).round().astype(np.int64))
    report = sim.static_checks(game, eq, c)

    parts = []
    pairs = {"eq": (c.gamma1, c.gamma2)}

    def on_chunk(paths):
        parts.append(sim.martingale_samples(game, eq, c.gamma1, c.gamma2, paths, ck, stop_level))

    res = sim.monte_carlo(game, pairs, settings, stop_level=top_dev, on_chunk=on_chunk)["eq"]
    report.merge(sim.diagnose_martingales(sim.MartingaleSamples.concat(parts)))
    for player, m0 in ((1, eq.u1(cfg.x0, cfg.p1)), (2, eq.u2(cfg.x0, cfg.p1))):
        report.merge(sim.value_identity(player, res.get(player, "formula"), float(m0)))
    for player, level in ((1, b1), (2, b2)):
        u = float(eq.u1(cfg.x0, cfg.p1) if player == 1 else eq.u2(cfg.x0, cfg.p1))
        report.merge(sim.deviation_test(player, game, c, u, settings, touch_a=eq.boundary.touch_a, b_g=level))
    return report


def cmd_verify(cfg: RunConfig, out: Path, quiet: bool, perturb_u1: float | None = None) -> int:
    st = setup(cfg, perturb_u1)
    scale = float(st.eq.u1(cfg.x0, cfg.p1))
    settings = settings_for(cfg, horizon_for(cfg, st.game, scale))
    report = run_verify(st, settings)
    rerun = False
    # deterministic table checks cannot change with more paths, so only a purely
    # statistical failure is re-run
    if not report.passed and sim.static_checks(st.game, st.eq, st.controls).passed:
        rerun = True
        fresh = settings.with_paths(4 * settings.n_paths, settings.path_offset + settings.n_paths)
        report = run_verify(st, fresh)
    _write_csv(out / "diagnostics.csv", ["process", "t", "kind", "mean", "se", "reference", "verdict"],
               [(r.process, r.t, r.kind, r.mean, r.std_error, r.reference, r.ok) for r in report.checkpoints])
    _write_csv(out / "deviations.csv", ["deviation", "player", "estimate", "se", "u_value", "margin", "verdict"],
               [(r.deviation, r.player, r.estimate, r.std_error, r.u_value, r.margin, r.ok)
                for r in report.deviation_table])
    _write_csv(out / "verdicts.csv", ["check", "verdict"], sorted(report.verdict.items()))
    if not quiet:
        for name, ok in sorted(report.verdict.items()):
            print(f"{_fmt(ok):4s}  {name}")
        if rerun:
            print("re-ran once with 4x fresh paths after a failure")
        print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# argument handling


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--paths", type=int, dest="n_paths")
    common.add_argument("--dt", type=float)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")

    parser = argparse.ArgumentParser(prog="ghostgame", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    roots = sub.add_parser("roots", help="characteristic roots gamma > 1 and eta < 0")
    roots.add_argument("--mu", type=float, required=True)
    roots.add_argument("--sigma", type=float, required=True)
    roots.add_argument("--r", type=float, required=True)
    sub.add_parser("value", parents=[common], help="tabulate u1, u2 over x and p1")
    sub.add_parser("boundary", parents=[common], help="write the boundary b on an x-grid")
    sub.add_parser("simulate", parents=[common], help="sample path and payoff estimates")
    verify = sub.add_parser("verify", parents=[common], help="equilibrium diagnostics")
    verify.add_argument("--perturb-u1", type=float, default=None, help=argparse.SUPPRESS)
    return parser


def load_config(args) -> RunConfig:
    text = ""
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    overrides = {"seed": args.seed, "n_paths": args.n_paths, "dt": args.dt}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    known = {f.name for f in fields(RunConfig)}
    unknown = [k for k in overrides if k not in known]
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    cfg = RunConfig.parse(text, overrides)
    if args.out is not None:
        cfg = cfg.replace(output_dir=str(args.out))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        if args.command == "roots":
            return cmd_roots(args)
        cfg = load_config(args)
        out = Path(cfg.output_dir)
        if args.command == "value":
            return cmd_value(cfg, out, args.quiet)
        if args.command == "boundary":
            return cmd_boundary(cfg, out, args.quiet)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.quiet)
        return cmd_verify(cfg, out, args.quiet, args.perturb_u1)
    except (GhostGameError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
