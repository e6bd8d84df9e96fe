# tools/harness.py
"""
Statistical experiments that confront simulations with the deterministic theory.

Every experiment returns an ExperimentReport whose summary and checks are
computed from its per-replicate records.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterable, Optional

import numpy as np
import pandas as pd
from scipy import stats
from tenacity import retry, retry_if_exception_type, stop_after_attempt
from tqdm import tqdm

import config
from branching import default_horizon, residual_and_age_laws, sample_W, simulate_forward
from curves import (
    constants, final_size_and_extinction, gw_psi, make_grid, reed_frost_curve, residual_cdf,
    s_hat_monte_carlo, solve_s_hat,
)
from epidemic import align_curve, generation_sizes, simulate, simulate_reed_frost
from models import Configuration, ModelSpec, ReedFrost

logger = logging.getLogger(__name__)


class ExtinctionError(RuntimeError):
    """A forward run died out before reaching the birth threshold."""


class TooFewMajorsError(RuntimeError):
    """Fewer major outbreaks than requested within the attempt cap."""

    def __init__(self, achieved: int, requested: int, N: int):
        super().__init__(f"only {achieved} of {requested} major outbreaks at N={N} "
                         f"after {requested * config.MAJOR_ATTEMPT_FACTOR} attempts")
        self.achieved = achieved


@dataclass
class Check:
    """One pass/fail comparison; numpy scalars are stored as plain Python values."""

    value: float
    tolerance: float
    passed: bool
    note: str = ""

    def __post_init__(self):
        self.value = float(self.value)
        self.tolerance = float(self.tolerance)
        self.passed = bool(self.passed)


@dataclass
class ExperimentReport:
    """Per-replicate records plus the statistics and pass/fail checks derived from them."""

    name: str
    spec: str
    records: pd.DataFrame
    summary: pd.DataFrame
    checks: dict[str, Check] = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks.values())

    def failures(self) -> list[str]:
        return [name for name, check in self.checks.items() if not check.passed]


def _tolerances(overrides: Optional[dict]) -> dict:
    merged = dict(config.DEFAULT_TOLERANCES)
    merged.update(overrides or {})
    return merged


def _describe(spec) -> str:
    return repr(spec) if not isinstance(spec, (int, float)) else f"ReedFrost(mu={spec})"


def run_replicates(job: Callable, streams: Iterable[np.random.Generator], desc: str) -> list:
    """Apply `job` to every stream; results come back in stream order."""
    streams = list(streams)
    progress = partial(tqdm, total=len(streams), desc=desc, disable=not config.SHOW_PROGRESS)
    if config.WORKERS > 1:
        with ProcessPoolExecutor(max_workers=config.WORKERS) as pool:
            return list(progress(pool.map(job, streams)))
    return [job(stream) for stream in progress(streams)]


# =============================================================================
# CURVE CONVERGENCE
# =============================================================================

def _major_replicate(spec: ModelSpec, N: int, lam: float, grid: np.ndarray, curve_rows: np.ndarray,
                     major_factor: int, rng: np.random.Generator) -> dict:
    """Simulate until one major outbreak (or the attempt cap); score its aligned curve."""
    for attempt in range(1, config.MAJOR_ATTEMPT_FACTOR + 1):
        traj = simulate(spec, N, rng)
        if traj.is_major(major_factor):
            aligned = align_curve(traj, lam, grid)
            record = {"attempts": attempt, "major": True,
                      "sup_distance": float(np.max(np.abs(aligned - curve_rows))),
                      "final_fraction": traj.final_fraction(), "tau_N": traj.tau_N,
                      "infections": traj.infections}
            record.update({f"final_fraction_{l + 1}": traj.final_fraction(l) for l in range(traj.n_types)})
            record.update({k: v for k, v in traj.diagnostics.items() if not isinstance(v, bool)})
            return record
    return {"attempts": config.MAJOR_ATTEMPT_FACTOR, "major": False, "sup_distance": math.nan,
            "final_fraction": math.nan, "tau_N": math.inf, "infections": 0}


def curve_convergence(spec: ModelSpec, N_list, M: int, rng: np.random.Generator, major_factor: int = 1,
                      tolerances: Optional[dict] = None) -> ExperimentReport:
    """Median sup-distance of aligned epidemic curves to s_hat, for each N."""
    if M < config.MIN_REPLICATES:
        raise ValueError(f"need at least {config.MIN_REPLICATES} replicates, got {M}")
    if major_factor not in (1, 2):
        raise ValueError(f"major_factor must be 1 or 2, got {major_factor}")
    tol = _tolerances(tolerances)
    consts = constants(spec)
    curve = solve_s_hat(spec, consts)
    grid = make_grid(config.ALIGN_U_MIN, config.ALIGN_U_MAX, float(curve.u_grid[1] - curve.u_grid[0]))
    curve_rows = np.vstack([curve.at(grid, l) for l in range(spec.n_types)])
    final = final_size_and_extinction(spec)

    frames, rows = [], []
    for N, stream in zip(N_list, rng.spawn(len(N_list))):
        job = partial(_major_replicate, spec, int(N), consts.lam, grid, curve_rows, major_factor)
        records = pd.DataFrame(run_replicates(job, stream.spawn(M), desc=f"N={N}"))
        records.insert(0, "replicate", np.arange(M))
        records.insert(0, "N", int(N))
        majors = int(records["major"].sum())
        if majors < M:
            raise TooFewMajorsError(majors, M, int(N))
        frames.append(records)
        distances = records["sup_distance"]
        attempts = int(records["attempts"].sum())
        rows.append({"N": int(N), "majors": majors, "attempts": attempts,
                     "minor_frequency": 1.0 - majors / attempts,
                     "median": distances.median(), "q1": distances.quantile(0.25),
                     "q3": distances.quantile(0.75),
                     "final_fraction": records["final_fraction"].median()})
        logger.info(f"N={N}: median sup-distance {distances.median():.4f} over {M} majors")

    summary = pd.DataFrame(rows)
    medians = summary["median"].to_numpy()
    checks = {"median_at_largest_N": Check(float(medians[-1]), tol["convergence"],
                                           bool(medians[-1] <= tol["convergence"]))}
    if len(medians) > 1:
        steps = np.diff(medians)
        checks["decreasing_in_N"] = Check(float(steps.max()), 0.0, bool(np.all(steps < 0)))
    if isinstance(spec, Configuration):
        gap = abs(float(summary["final_fraction"].iloc[-1]) - final.s_inf)
        checks["final_size"] = Check(gap, tol["final_size"], bool(gap <= tol["final_size"]))
    return ExperimentReport("curve_convergence", _describe(spec), pd.concat(frames, ignore_index=True),
                            summary, checks, tol,
                            diagnostics={"lambda": consts.lam, "s_inf": final.s_inf, "flags": consts.flags})


# =============================================================================
# REED-FROST TIME SHIFT
# =============================================================================

def _reed_frost_replicate(mu: float, N: int, n: int, theta: float, r_values: tuple,
                          rng: np.random.Generator) -> list[dict]:
    traj = simulate_reed_frost(mu, N, 1, rng)
    sizes = generation_sizes(traj)
    z_n = int(sizes[n]) if n < len(sizes) else 0
    if z_n == 0:
        return [{"r": r, "excluded": True, "W": 0.0, "observed": math.nan, "predicted": math.nan,
                 "deviation": math.nan} for r in r_values]
    W = z_n * mu ** (-n)
    out = []
    for r in r_values:
        observed = float(traj.susceptible(2 * n + r)) / N
        predicted = float(gw_psi(mu, W * theta ** 2 * mu ** (r + 1) / (mu - 1.0)))
        out.append({"r": r, "excluded": False, "W": W, "observed": observed, "predicted": predicted,
                    "deviation": abs(observed - predicted)})
    return out


def reed_frost_check(mu: float, N: int, M: int, r_range, rng: np.random.Generator,
                     tolerances: Optional[dict] = None) -> ExperimentReport:
    """Compare S_N(2n + r)/N with psi(W theta_N^2 mu^{r+1} / (mu - 1)) across replicates."""
    if not mu > 1:
        raise ValueError(f"mu must exceed 1, got {mu}")
    tol = _tolerances(tolerances)
    n = int(math.floor(0.5 * math.log(N) / math.log(mu)))
    theta = mu ** n / math.sqrt(N)
    r_values = tuple(int(r) for r in r_range)
    if min(r_values) < -2 * n:
        raise ValueError(f"r = {min(r_values)} reaches before generation 0 (n = {n})")
    job = partial(_reed_frost_replicate, mu, int(N), n, theta, r_values)
    rows = []
    for i, replicate in enumerate(run_replicates(job, rng.spawn(M), desc=f"Reed-Frost N={N}")):
        for row in replicate:
            rows.append({"replicate": i, **row})
    records = pd.DataFrame(rows)
    kept = records[~records["excluded"]]
    excluded = int(records.groupby("replicate")["excluded"].first().sum())
    summary = kept.groupby("r")["deviation"].median().rename("median_deviation").reset_index()
    median = float(kept["deviation"].median()) if len(kept) else math.nan
    checks = {"median_deviation": Check(median, tol["reed_frost"], bool(median <= tol["reed_frost"]))}
    logger.info(f"Reed-Frost mu={mu} N={N}: median deviation {median:.4f}, {excluded} minor replicates excluded")
    return ExperimentReport("reed_frost", _describe(mu), records, summary, checks, tol,
                            diagnostics={"n": n, "theta_N": theta, "excluded": excluded})


# =============================================================================
# EXTINCTION FREQUENCIES
# =============================================================================

def _minor_replicate(spec: ModelSpec, N: int, I0: int, rng: np.random.Generator) -> dict:
    """Classify one run; it stops as soon as it reaches the major threshold."""
    traj = simulate(spec, N, rng, I0=I0, stop_after=max(1, math.isqrt(N)))
    return {"infections": traj.infections, "minor": not traj.major}


def extinction_check(spec: ModelSpec, N: int, M: int, I0: int, rng: np.random.Generator,
                     tolerances: Optional[dict] = None) -> ExperimentReport:
    """Minor-outbreak frequency against q_forward^I0 with a binomial band."""
    tol = _tolerances(tolerances)
    q = final_size_and_extinction(spec).q_forward ** I0
    job = partial(_minor_replicate, spec, int(N), int(I0))
    records = pd.DataFrame(run_replicates(job, rng.spawn(M), desc=f"extinction I0={I0}"))
    records.insert(0, "replicate", np.arange(M))
    frequency = float(records["minor"].mean())
    band = tol["sigma"] * math.sqrt(q * (1.0 - q) / M)
    gap = abs(frequency - q)
    summary = pd.DataFrame([{"N": N, "I0": I0, "replicates": M, "minor_frequency": frequency,
                             "expected": q, "band": band}])
    logger.info(f"extinction: minor frequency {frequency:.4f} vs q^I0 = {q:.4f} (band {band:.4f})")
    checks = {"minor_frequency": Check(gap, band, bool(gap <= band), note=f"expected {q:.6g}")}
    return ExperimentReport("extinction", _describe(spec), records, summary, checks, tol)


# =============================================================================
# STATIONARY LAWS
# =============================================================================

def stationary_laws_check(spec: ModelSpec, T: float, rng: np.random.Generator,
                          min_births: int = config.STATIONARY_MIN_BIRTHS,
                          tolerances: Optional[dict] = None) -> ExperimentReport:
    """KS distances of the age and residual-delay laws of one surviving forward run at time T.

    Runs that die or stay below `min_births` are resampled.
    """
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    tol = _tolerances(tolerances)
    consts = constants(spec)
    lam = consts.lam
    attempts = 0

    @retry(stop=stop_after_attempt(config.RESAMPLE_MAX_ATTEMPTS),
           retry=retry_if_exception_type(ExtinctionError), reraise=True)
    def surviving_run():
        nonlocal attempts
        attempts += 1
        run = simulate_forward(spec, rng.spawn(1)[0], time=T)
        if run.extinct or run.births_by(T) < min_births:
            logger.debug(f"attempt {attempts}: {run.size} births by T={T}, resampling")
            raise ExtinctionError(f"forward run reached {run.size} of {min_births} births by T={T}")
        return run

    run = surviving_run()
    rows = []
    ages_all, residual_all = residual_and_age_laws(run, T)
    rows.append({"law": "ages", "type": "all", "n": len(ages_all),
                 "ks": float(stats.kstest(ages_all, "expon", args=(0.0, 1.0 / lam)).statistic)})
    for l in range(spec.n_types):
        residual, _ = residual_and_age_laws(run, T, type_index=l)
        if len(residual):
            rows.append({"law": "residual", "type": str(l + 1), "n": len(residual),
                         "ks": float(stats.kstest(residual, residual_cdf(spec, lam, l)).statistic)})
    records = pd.DataFrame(rows)
    checks = {f"ks_{row.law}_{row.type}": Check(row.ks, tol["ks"], bool(row.ks <= tol["ks"]))
              for row in records.itertuples()}

    fractions = run.type_fractions(spec.n_types)
    if spec.n_types > 1:
        gap = float(np.max(np.abs(fractions - consts.zeta)))
        checks["birth_fractions"] = Check(gap, tol["birth_fraction"], bool(gap <= tol["birth_fraction"]))
    ratio = len(residual_all) / run.births_by(T)
    expected_ratio = float(consts.c.sum())
    summary = pd.DataFrame([{"births": run.births_by(T), "pending": len(residual_all), "ratio": ratio,
                             "expected_ratio": expected_ratio, "attempts": attempts,
                             **{f"fraction_{l + 1}": f for l, f in enumerate(fractions)}}])
    logger.info(f"stationary laws at T={T}: {run.size} births after {attempts} attempt(s)")
    return ExperimentReport("stationary_laws", _describe(spec), records, summary, checks, tol,
                            diagnostics={"attempts": attempts, "lambda": lam})


# =============================================================================
# SOLVER VS MONTE CARLO
# =============================================================================

def cross_validation(spec: ModelSpec, n_samples: int, rng: np.random.Generator,
                     tolerances: Optional[dict] = None, grid: Optional[np.ndarray] = None) -> ExperimentReport:
    """Sup-distance between the solved curves and Monte Carlo means over backward limit samples.

    Also compares the sample mean of W-hat with its eigenvector prediction.
    """
    tol = _tolerances(tolerances)
    grid = make_grid() if grid is None else grid
    if isinstance(spec, ReedFrost):
        lam = math.log(spec.mu)
        solved = reed_frost_curve(spec.mu, grid)
        samples = [sample_W(spec, "backward", lam, n_samples, rng, horizon=math.ceil(default_horizon(lam)))]
        monte_carlo = [s_hat_monte_carlo(samples[0], 1.0, grid * lam)]
        expected = [spec.mu / (spec.mu - 1.0)]
    else:
        consts = constants(spec)
        lam = consts.lam
        solved = solve_s_hat(spec, consts, grid)
        samples, monte_carlo, expected = [], [], []
        for l, stream in zip(range(spec.n_types), rng.spawn(spec.n_types)):
            draws = sample_W(spec, "backward", lam, n_samples, stream, initial_type=l)
            samples.append(draws)
            monte_carlo.append(s_hat_monte_carlo(draws, consts.m_star2, grid))
            if isinstance(spec, Configuration):
                deg = int(spec.degrees[l])
                expected.append(deg / (deg - 1) * consts.eta_hat[l] / consts.m_star1 if deg > 1 else math.nan)
            else:
                expected.append(consts.eta_hat[l] / consts.m_star1)

    rows = []
    checks = {}
    for l, (draws, mc) in enumerate(zip(samples, monte_carlo)):
        values = np.array([s.value for s in draws])
        stderr = float(values.std(ddof=1) / math.sqrt(len(values)))
        distance = float(np.max(np.abs(mc.values[0] - solved.values[l])))
        allowed = max(tol["cross_validation"], 2.0 * (float(mc.meta["stderr"].max()) + 0.01))
        rows.append({"type": l + 1, "sup_distance": distance, "mean_W": float(values.mean()), "stderr": stderr,
                     "expected_mean": expected[l], "zero_fraction": float(np.mean(values == 0))})
        checks[f"sup_distance_{l + 1}"] = Check(distance, allowed, bool(distance <= allowed))
        if math.isfinite(expected[l]):
            gap = abs(float(values.mean()) - expected[l])
            checks[f"mean_W_{l + 1}"] = Check(gap, 4.0 * stderr, bool(gap <= 4.0 * stderr))
        logger.info(f"type {l + 1}: solver vs Monte Carlo sup-distance {distance:.4f}")
    records = pd.DataFrame({"u": grid, **{f"s_hat_{l + 1}": solved.values[l] for l in range(len(samples))},
                            **{f"mc_s_hat_{l + 1}": mc.values[0] for l, mc in enumerate(monte_carlo)}})
    return ExperimentReport("cross_validation", _describe(spec), records, pd.DataFrame(rows), checks, tol)
