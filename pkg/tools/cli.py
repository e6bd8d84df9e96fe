#!/usr/bin/env python3
# tools/cli.py
"""
epicurve batch front-end.

    python tools/cli.py constants configs/markov_sir.toml
    python tools/cli.py curve configs/volz_regular.toml --out out/volz
    python tools/cli.py verify configs/markov_sir.toml --replicates 100
    python tools/cli.py final-size --r0 2

Run configs are TOML files with [model], [run], [output] and optional
[tolerances] / [verify] sections (schema in README.md).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

import config
from branching import PopulationCapError
from curves import (
    ConvergenceError, SubcriticalError, constants, final_size_and_extinction, final_size_from_r0,
    make_grid, volz_ode,
)
from epidemic import simulate
from harness import (
    ExperimentReport, ExtinctionError, TooFewMajorsError, cross_validation, curve_convergence,
    extinction_check, reed_frost_check, stationary_laws_check,
)
from models import (
    Categorical, Configuration, CountTimes, Defective, Exponential, Fixed, Gamma, Geometric,
    MarkovSIR, ModelSpec, Multitype, PointMass, Poisson, ReedFrost, TimeDistribution, Uniform,
    make_rng,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_TOLERANCE = 0, 1, 2, 3
NUMERICAL_ERRORS = (SubcriticalError, ConvergenceError, PopulationCapError, ExtinctionError, TooFewMajorsError)


class ConfigError(ValueError):
    """Malformed run config; the message names the offending field."""


# =============================================================================
# RUN CONFIG
# =============================================================================

_FAMILIES = {
    "exponential": (Exponential, ("rate",)),
    "gamma": (Gamma, ("shape", "rate")),
    "uniform": (Uniform, ("low", "high")),
    "point": (PointMass, ("at",)),
}

_LAWS = {
    "poisson": (Poisson, "mean"),
    "geometric": (Geometric, "mean"),
    "fixed": (Fixed, "count"),
    "categorical": (Categorical, "probs"),
}


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"{where}.{key}: missing")
    return table[key]


def parse_distribution(table: Any, where: str) -> TimeDistribution:
    """{family = "gamma", shape = 2, rate = 1, mass = 0.9} -> Defective(Gamma(2, 1), 0.9)."""
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected an inline table like {{family = \"exponential\", rate = 1}}")
    family = _require(table, "family", where)
    if family not in _FAMILIES:
        raise ConfigError(f"{where}.family: unknown family {family!r} (choose from {', '.join(_FAMILIES)})")
    cls, params = _FAMILIES[family]
    extra = set(table) - set(params) - {"family", "mass"}
    if extra:
        raise ConfigError(f"{where}: unexpected keys {sorted(extra)} for family {family!r}")
    try:
        dist = cls(*(float(_require(table, p, where)) for p in params))
        if "mass" in table:
            dist = Defective(dist, float(table["mass"]))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e
    return dist


def _distribution_grid(value: Any, where: str):
    """A single distribution, a list of them, or a matrix of them."""
    if isinstance(value, dict):
        return parse_distribution(value, where)
    if isinstance(value, list):
        return tuple(_distribution_grid(item, f"{where}[{i}]") for i, item in enumerate(value))
    raise ConfigError(f"{where}: expected a distribution table or a list of them")


def parse_offspring(table: Any, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected an inline table like {{law = \"poisson\", mean = 2}}")
    law = _require(table, "law", where)
    if law not in _LAWS:
        raise ConfigError(f"{where}.law: unknown law {law!r} (choose from {', '.join(_LAWS)})")
    cls, key = _LAWS[law]
    value = _require(table, key, where)
    try:
        if law == "categorical":
            return cls(tuple(float(p) for p in value))
        return cls(int(value)) if law == "fixed" else cls(float(value))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def build_spec(model: dict) -> ModelSpec:
    """ModelSpec from the [model] table of a run config."""
    kind = _require(model, "kind", "model")
    try:
        if kind == "markov_sir":
            return MarkovSIR(float(_require(model, "beta", "model")), float(_require(model, "gamma", "model")))
        if kind == "count_times":
            return CountTimes(parse_offspring(_require(model, "offspring", "model"), "model.offspring"),
                              parse_distribution(_require(model, "times", "model"), "model.times"))
        if kind == "reed_frost":
            return ReedFrost(float(_require(model, "mu", "model")))
        if kind == "multitype":
            return Multitype(tuple(float(p) for p in _require(model, "proportions", "model")),
                             tuple(tuple(float(x) for x in row) for row in _require(model, "mean", "model")),
                             _distribution_grid(_require(model, "times", "model"), "model.times"))
        if kind == "volz":
            return Configuration.volz(float(_require(model, "alpha", "model")),
                                      float(_require(model, "beta", "model")),
                                      _require(model, "degree_probs", "model"))
        if kind == "configuration":
            return Configuration(tuple(float(p) for p in _require(model, "degree_probs", "model")),
                                 _distribution_grid(_require(model, "contact", "model"), "model.contact"),
                                 _distribution_grid(_require(model, "infectious", "model"), "model.infectious"))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}") from e
    raise ConfigError(f"model.kind: unknown kind {kind!r}")


@dataclass
class RunConfig:
    """A parsed run config; `raw` keeps the TOML tables for header echoes."""

    spec: ModelSpec
    seed: int
    N: list[int]
    replicates: int
    I0: int = 1
    u_min: float = config.U_MIN
    u_max: float = config.U_MAX
    u_step: float = config.U_STEP
    samples: int = config.W_SAMPLES
    major_factor: int = 1
    horizon: Optional[float] = None
    r_range: tuple[int, ...] = tuple(range(-2, 5))
    out_dir: str = config.OUTPUT_DIR
    tolerances: dict = field(default_factory=lambda: dict(config.DEFAULT_TOLERANCES))
    checks: tuple[str, ...] = ()
    raw: dict = field(default_factory=dict)

    @property
    def grid(self) -> np.ndarray:
        return make_grid(self.u_min, self.u_max, self.u_step)


def _int_list(value, where) -> list[int]:
    values = value if isinstance(value, list) else [value]
    try:
        return [int(v) for v in values]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_run_config(raw: dict, seed: Optional[int] = None, out_dir: Optional[str] = None,
                     replicates: Optional[int] = None) -> RunConfig:
    """Validate the TOML tables; flags override the matching [run] / [output] fields."""
    for section in ("model", "run", "output"):
        if not isinstance(raw.get(section), dict):
            raise ConfigError(f"{section}: missing section")
    run, output = raw["run"], raw["output"]
    if seed is None:
        if "seed" not in run:
            raise ConfigError("run.seed: missing (every run needs an explicit master seed)")
        seed = run["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"run.seed: expected a nonnegative integer, got {seed!r}")
    tolerances = dict(config.DEFAULT_TOLERANCES)
    for key, value in raw.get("tolerances", {}).items():
        if key not in tolerances:
            raise ConfigError(f"tolerances.{key}: unknown tolerance")
        tolerances[key] = float(value)
    settings = RunConfig(
        spec=build_spec(raw["model"]),
        seed=seed,
        N=_int_list(_require(run, "N", "run"), "run.N"),
        replicates=int(replicates if replicates is not None else run.get("replicates", config.MIN_REPLICATES)),
        I0=int(run.get("I0", 1)),
        u_min=float(run.get("u_min", config.U_MIN)),
        u_max=float(run.get("u_max", config.U_MAX)),
        u_step=float(run.get("u_step", config.U_STEP)),
        samples=int(run.get("samples", config.W_SAMPLES)),
        major_factor=int(run.get("major_factor", 1)),
        horizon=float(run["T"]) if "T" in run else None,
        r_range=tuple(_int_list(run.get("r_range", list(range(-2, 5))), "run.r_range")),
        out_dir=out_dir or output.get("dir", config.OUTPUT_DIR),
        tolerances=tolerances,
        checks=tuple(raw.get("verify", {}).get("checks", ())),
        raw=raw,
    )
    if settings.replicates < 1:
        raise ConfigError(f"run.replicates: must be positive, got {settings.replicates}")
    try:
        settings.grid
    except ValueError as e:
        raise ConfigError(f"run.u_step: {e}") from e
    return settings


def load_run_config(path: str, **overrides) -> RunConfig:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: no such file") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_run_config(raw, **overrides)


# =============================================================================
# OUTPUT
# =============================================================================

def _flatten(table: dict, prefix: str = "") -> list[tuple[str, str]]:
    rows = []
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and key in ("model", "run", "output", "tolerances", "verify"):
            rows.extend(_flatten(value, f"{name}."))
        else:
            rows.append((name, repr(value)))
    return rows


def header_lines(settings: RunConfig, extra: Optional[dict] = None) -> list[str]:
    lines = [f"# tool_version: {config.TOOL_VERSION}", f"# seed: {settings.seed}"]
    lines += [f"# config.{name}: {value}" for name, value in _flatten(settings.raw)]
    lines += [f"# {key}: {value}" for key, value in (extra or {}).items()]
    return lines


def write_csv(path: str, frame: pd.DataFrame, settings: RunConfig, extra: Optional[dict] = None) -> str:
    """CSV with a commented provenance header."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write("\n".join(header_lines(settings, extra)) + "\n")
        frame.to_csv(f, index=False, float_format=config.CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"wrote {path} ({len(frame)} rows)")
    return path


def _console() -> Console:
    return Console(record=True, width=config.SUMMARY_WIDTH)


def _save_summary(console: Console, settings: RunConfig, name: str = "summary.txt") -> None:
    """Recorded console output under the same provenance header as the CSVs."""
    os.makedirs(settings.out_dir, exist_ok=True)
    path = os.path.join(settings.out_dir, name)
    with open(path, "w", newline="") as f:
        f.write("\n".join(header_lines(settings)) + "\n")
        f.write(console.export_text())
    logger.info(f"wrote {path}")


def _report_table(report: ExperimentReport) -> Table:
    table = Table(title=f"{report.name}: {'PASS' if report.passed else 'FAIL'}", show_lines=True)
    table.add_column("Check", style="cyan")
    table.add_column("Value", style="bold white")
    table.add_column("Tolerance", style="magenta")
    table.add_column("Result", style="green")
    for name, check in report.checks.items():
        table.add_row(name, f"{check.value:.6g}", f"{check.tolerance:.6g}",
                      "pass" if check.passed else "[bold red]FAIL[/]")
    return table


def _write_report(report: ExperimentReport, settings: RunConfig, console: Console) -> None:
    extra = {f"tolerance.{k}": v for k, v in report.tolerances.items()}
    extra.update({f"diagnostic.{k}": v for k, v in report.diagnostics.items()})
    write_csv(os.path.join(settings.out_dir, f"{report.name}_records.csv"), report.records, settings, extra)
    write_csv(os.path.join(settings.out_dir, f"{report.name}_summary.csv"), report.summary, settings, extra)
    console.print(_report_table(report))


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_simulate(settings: RunConfig) -> int:
    rng = make_rng(settings.seed)
    console = _console()
    table = Table(title="Simulated trajectories", show_lines=True)
    for column in ("N", "replicate", "infections", "final S/N", "tau_N", "major"):
        table.add_column(column)
    for N, stream in zip(settings.N, rng.spawn(len(settings.N))):
        for i, child in enumerate(stream.spawn(settings.replicates)):
            traj = simulate(settings.spec, N, child, I0=settings.I0)
            write_csv(os.path.join(settings.out_dir, f"trajectory_N{N}_{i:04d}.csv"), traj.to_frame(),
                      settings, {"replicate": i, **traj.header()})
            table.add_row(str(N), str(i), str(traj.infections), f"{traj.final_fraction():.5f}",
                          f"{traj.tau_N:.4f}", str(traj.major))
    console.print(table)
    _save_summary(console, settings)
    return EXIT_OK


def cmd_constants(settings: RunConfig) -> int:
    console = _console()
    if isinstance(settings.spec, ReedFrost):
        mu = settings.spec.mu
        rows = [("lambda", repr(math.log(mu))), ("R0", repr(mu)), ("m_star1", repr(math.log(mu))),
                ("flags", "lattice")]
    else:
        rows = constants(settings.spec).as_rows()
    frame = pd.DataFrame(rows, columns=["name", "value"])
    write_csv(os.path.join(settings.out_dir, "constants.csv"), frame, settings)
    table = Table(title=f"Derived constants: {settings.spec.kind}", show_lines=True)
    table.add_column("Constant", style="cyan")
    table.add_column("Value", style="bold white")
    for name, value in rows:
        table.add_row(name, value)
    console.print(table)
    _save_summary(console, settings)
    return EXIT_OK


def cmd_curve(settings: RunConfig) -> int:
    """Solver and Monte Carlo curves side by side, plus Volz ODE columns when applicable."""
    console = _console()
    report = cross_validation(settings.spec, settings.samples, make_rng(settings.seed),
                              tolerances=settings.tolerances, grid=settings.grid)
    extra = {}
    if not isinstance(settings.spec, ReedFrost):
        consts = constants(settings.spec)
        extra = {f"constant.{name}": value for name, value in consts.as_rows()}
    write_csv(os.path.join(settings.out_dir, "curve.csv"), report.records, settings, extra)
    spec = settings.spec
    if isinstance(spec, Configuration) and spec.is_identical:
        solution = volz_ode(spec, settings.grid)
        ode = pd.DataFrame({"u": solution.u_grid, "h": solution.h})
        if solution.p_s is not None:
            ode["p_S"], ode["p_I"] = solution.p_s, solution.p_i
        write_csv(os.path.join(settings.out_dir, "volz_ode.csv"), ode, settings,
                  {"identity_deviation": repr(solution.identity_deviation),
                   "system_deviation": repr(solution.system_deviation)})
    console.print(_report_table(report))
    _save_summary(console, settings)
    return EXIT_OK


def _applicable_checks(spec: ModelSpec) -> tuple[str, ...]:
    if isinstance(spec, ReedFrost):
        return ("extinction", "cross_validation", "reed_frost")
    return ("convergence", "extinction", "stationary", "cross_validation")


def cmd_verify(settings: RunConfig) -> int:
    spec = settings.spec
    checks = settings.checks or _applicable_checks(spec)
    unknown = set(checks) - {"convergence", "extinction", "stationary", "cross_validation", "reed_frost"}
    if unknown:
        raise ConfigError(f"verify.checks: unknown checks {sorted(unknown)}")
    streams = dict(zip(checks, make_rng(settings.seed).spawn(len(checks))))
    console = _console()
    reports = []
    for name in checks:
        rng = streams[name]
        if name == "convergence":
            reports.append(curve_convergence(spec, settings.N, settings.replicates, rng,
                                             major_factor=settings.major_factor, tolerances=settings.tolerances))
        elif name == "extinction":
            reports.append(extinction_check(spec, settings.N[0], settings.replicates, settings.I0, rng,
                                            tolerances=settings.tolerances))
        elif name == "stationary":
            lam = constants(spec).lam
            T = settings.horizon or math.log(10 * config.STATIONARY_MIN_BIRTHS) / lam
            reports.append(stationary_laws_check(spec, T, rng, tolerances=settings.tolerances))
        elif name == "cross_validation":
            reports.append(cross_validation(spec, settings.samples, rng, tolerances=settings.tolerances,
                                            grid=settings.grid))
        elif name == "reed_frost":
            reports.append(reed_frost_check(spec.mu, settings.N[-1], settings.replicates, settings.r_range,
                                            rng, tolerances=settings.tolerances))
    for report in reports:
        _write_report(report, settings, console)
    _save_summary(console, settings)
    failed = [f"{r.name}.{name}" for r in reports for name in r.failures()]
    if failed:
        logger.error(f"tolerance failures: {', '.join(failed)}")
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_reed_frost(settings: RunConfig) -> int:
    if not isinstance(settings.spec, ReedFrost):
        raise ConfigError("model.kind: reed-frost needs kind = \"reed_frost\"")
    console = _console()
    rng = make_rng(settings.seed)
    for N, stream in zip(settings.N, rng.spawn(len(settings.N))):
        report = reed_frost_check(settings.spec.mu, N, settings.replicates, settings.r_range, stream,
                                  tolerances=settings.tolerances)
        report.name = f"reed_frost_N{N}"
        _write_report(report, settings, console)
    _save_summary(console, settings)
    return EXIT_OK


def cmd_final_size(settings: Optional[RunConfig], r0: Optional[float]) -> int:
    console = Console(width=config.SUMMARY_WIDTH)
    table = Table(title="Final size and extinction", show_lines=True)
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="bold white")
    if r0 is not None:
        table.add_row("s_inf", f"{final_size_from_r0(r0):.6f}")
        console.print(table)
        return EXIT_OK
    result = final_size_and_extinction(settings.spec)
    rows = [("s_inf", result.s_inf), ("q_forward", result.q_forward), ("q_backward", result.q_backward)]
    if result.q_tilde is not None:
        rows += [(f"q_tilde_{l + 1}", q) for l, q in enumerate(result.q_tilde)]
    for name, value in rows:
        table.add_row(name, f"{value:.6f}")
    write_csv(os.path.join(settings.out_dir, "final_size.csv"),
              pd.DataFrame([(name, repr(float(value))) for name, value in rows], columns=["name", "value"]),
              settings)
    console.print(table)
    return EXIT_OK


# =============================================================================
# ENTRY POINT
# =============================================================================

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_args(argv=None) -> argparse.Namespace:
    ap = _Parser(prog="epicurve", description="Stochastic epidemic simulations and their deterministic limit curves.")
    ap.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [("simulate", "Write trajectory CSVs."),
                       ("constants", "Dump lambda, eigenvectors and m-star constants."),
                       ("curve", "Write s_hat from the solver and from Monte Carlo."),
                       ("verify", "Run the convergence, extinction, stationary-law and cross-validation checks."),
                       ("reed-frost", "Check the Reed-Frost time-shift limit.")]:
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("config", help="Run config (TOML).")
        cmd.add_argument("--seed", type=int, help="Override run.seed.")
        cmd.add_argument("--out", help="Override output.dir.")
        cmd.add_argument("--replicates", type=int, help="Override run.replicates.")
    final = sub.add_parser("final-size", help="Solve the final-size and extinction equations.")
    final.add_argument("config", nargs="?", help="Run config (TOML).")
    final.add_argument("--r0", type=float, help="Solve -log s = R0 (1 - s) directly.")
    final.add_argument("--seed", type=int, help="Override run.seed.")
    final.add_argument("--out", help="Override output.dir.")
    final.add_argument("--replicates", type=int, help="Override run.replicates.")
    return ap.parse_args(argv)


COMMANDS = {
    "simulate": cmd_simulate,
    "constants": cmd_constants,
    "curve": cmd_curve,
    "verify": cmd_verify,
    "reed-frost": cmd_reed_frost,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else config.LOG_LEVEL, format=config.LOG_FORMAT)

    try:
        if args.command == "final-size":
            if args.config is None and args.r0 is None:
                raise ConfigError("final-size: give a run config or --r0")
            if args.config is None:
                return cmd_final_size(None, args.r0)
            settings = load_run_config(args.config, seed=args.seed, out_dir=args.out, replicates=args.replicates)
            return cmd_final_size(settings, args.r0)
        settings = load_run_config(args.config, seed=args.seed, out_dir=args.out, replicates=args.replicates)
        return COMMANDS[args.command](settings)
    except ConfigError as e:
        logger.error(f"config error: {e}")
        print(f"epicurve: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"epicurve: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.error(f"invalid parameters: {e}")
        print(f"epicurve: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
