# tools/curves.py
"""
Deterministic numerics: Malthusian parameter, eigen-structure, m-star constants,
limit-curve solvers, final-size / extinction roots and the Volz ODEs.

All functions are pure; everything a curve needs is derived from a model spec
through its contact kernels (see models.forward_kernels / backward_kernels).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy import integrate, interpolate, optimize
from scipy.special import comb

import config
from models import (
    SINGLE_TYPE, Configuration, Defective, Exponential, Gamma, Kernel, ModelSpec,
    Multitype, ReedFrost, _period_expectation, backward_kernels, forward_kernels,
)

logger = logging.getLogger(__name__)


class SubcriticalError(ValueError):
    """No positive Malthusian parameter exists."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


# =============================================================================
# EIGEN-STRUCTURE
# =============================================================================

def _power_iteration(A: np.ndarray) -> tuple[float, np.ndarray]:
    """Perron root and right eigenvector of a nonnegative irreducible matrix.

    Iterates on A + I, which is primitive, so periodic matrices converge too.
    Falls back to a dense eigen-solve if the iteration stalls.
    """
    d = A.shape[0]
    if d == 1:
        return float(A[0, 0]), np.ones(1)
    B = A + np.eye(d)
    x = np.full(d, 1.0 / d)
    rho = 0.0
    for _ in range(config.POWER_ITER_MAX):
        y = B @ x
        rho_new = y.sum()
        y = y / rho_new
        if np.max(np.abs(y - x)) <= config.POWER_ITER_TOL:
            x, rho = y, rho_new
            break
        x, rho = y, rho_new
    else:
        logger.warning("power iteration stalled, falling back to a dense eigen-solve")
        values, vectors = np.linalg.eig(A)
        top = int(np.argmax(values.real))
        vec = np.abs(vectors[:, top].real)
        return float(values[top].real), vec / vec.sum()
    return float(rho - 1.0), x


def perron(A: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """(root, left vector zeta, right vector eta) normalized zeta.1 = zeta.eta = 1."""
    rho, eta = _power_iteration(A)
    _, zeta = _power_iteration(A.T)
    zeta = zeta / zeta.sum()
    eta = eta / float(zeta @ eta)
    return rho, zeta, eta


def _matrix(kernels, s: float, moment: bool = False) -> np.ndarray:
    fn = (lambda k: k.laplace_moment(s)) if moment else (lambda k: k.laplace(s))
    return np.array([[fn(k) for k in row] for row in kernels], dtype=float)


def _core(spec: ModelSpec) -> np.ndarray:
    """Indices of the irreducible block: degree >= 2 classes for configuration specs."""
    if isinstance(spec, Configuration):
        return np.flatnonzero(spec.degrees >= 2)
    return np.arange(spec.n_types)


# =============================================================================
# CONSTANTS
# =============================================================================

@dataclass
class DerivedConstants:
    """Growth constants of the forward and backward branching processes."""

    lam: float
    m_star1: float
    m_star2: float
    zeta: np.ndarray
    eta: np.ndarray
    zeta_hat: np.ndarray
    eta_hat: np.ndarray
    H: float
    Z: float
    H_hat: float
    Z_hat: float
    c: np.ndarray
    R0: float
    m_star1_backward: float
    malthusian_residual: float
    eigen_residual: float
    m0: Optional[float] = None
    flags: tuple[str, ...] = ()

    @property
    def m_star(self) -> float:
        return self.m_star1

    def as_rows(self) -> list[tuple[str, str]]:
        """Name/value pairs at full precision, for headers and dumps."""
        rows = [("lambda", repr(self.lam)), ("m_star1", repr(self.m_star1)),
                ("m_star2", repr(self.m_star2)), ("R0", repr(self.R0))]
        if self.m0 is not None:
            rows.append(("m0", repr(self.m0)))
        for name in ("zeta", "eta", "zeta_hat", "eta_hat", "c"):
            rows.append((name, " ".join(repr(float(x)) for x in getattr(self, name))))
        rows += [("H", repr(self.H)), ("Z", repr(self.Z)), ("H_hat", repr(self.H_hat)),
                 ("Z_hat", repr(self.Z_hat)), ("m_star1_backward", repr(self.m_star1_backward)),
                 ("malthusian_residual", repr(self.malthusian_residual)),
                 ("eigen_residual", repr(self.eigen_residual)),
                 ("flags", ",".join(self.flags) or "none")]
        return rows


def _core_root(spec: ModelSpec, kernels, s: float) -> float:
    core = _core(spec)
    M = _matrix(kernels, s)[np.ix_(core, core)]
    return _power_iteration(M)[0]


def malthusian(spec: ModelSpec) -> float:
    """Growth rate lambda: the Perron root of the forward mean matrix at lambda is 1."""
    kernels = forward_kernels(spec)
    if not len(_core(spec)):
        raise SubcriticalError("no class of degree >= 2, the process cannot grow")
    excess = lambda s: _core_root(spec, kernels, s) - 1.0
    at_zero = excess(0.0)
    if not at_zero > 0:
        raise SubcriticalError(f"spec is not supercritical: R0 = {at_zero + 1.0:.6g}")
    hi = 1.0
    for _ in range(config.ROOT_BRACKET_MAX):
        if excess(hi) < 0:
            break
        hi *= 2.0
    else:
        raise ConvergenceError("could not bracket the Malthusian parameter", excess(hi))
    lam = optimize.brentq(excess, 0.0, hi, xtol=config.ROOT_XTOL, rtol=4 * np.finfo(float).eps,
                          maxiter=500)
    logger.debug(f"malthusian parameter {lam!r} for {spec.kind}")
    return float(lam)


def _assumption_flags(spec: ModelSpec) -> tuple[str, ...]:
    flags = []
    if isinstance(spec, ReedFrost):
        flags.append("lattice")
    laws = []
    if isinstance(spec, SINGLE_TYPE) and not isinstance(spec, ReedFrost):
        laws = [spec.contact_time]
    elif isinstance(spec, Multitype):
        laws = [g for row in spec.times for g in row]
    elif isinstance(spec, Configuration):
        laws = [g for row in spec.contact for g in row]
    bases = [g.base if isinstance(g, Defective) else g for g in laws]
    if any(isinstance(g, (Exponential, Gamma)) for g in bases):
        flags.append("exponential-tail")
    return tuple(flags)


def _bordered(core: np.ndarray, d: int, zeta_core: np.ndarray, eta_core: np.ndarray,
              M: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Extend core eigenvectors to all classes; non-core classes only receive births."""
    zeta_full = np.zeros(d)
    zeta_full[core] = zeta_core
    outside = np.setdiff1d(np.arange(d), core)
    for l in outside:
        zeta_full[l] = float(zeta_core @ M[core, l])
    Z = float(zeta_full.sum())
    zeta = zeta_full / Z
    eta_raw = np.zeros(d)
    eta_raw[core] = eta_core
    H = float(zeta @ eta_raw)
    return zeta, eta_raw / H, Z, H


def constants(spec: ModelSpec) -> DerivedConstants:
    """Malthusian parameter, eigenvectors and the m-star constants of a spec."""
    lam = malthusian(spec)
    fk, bk = forward_kernels(spec), backward_kernels(spec)
    d = spec.n_types
    core = _core(spec)
    M, D = _matrix(fk, lam), _matrix(fk, lam, moment=True)
    M0 = _matrix(fk, 0.0)

    rho, zeta_core, eta_core = perron(M[np.ix_(core, core)])
    zeta, eta, Z, H = _bordered(core, d, zeta_core, eta_core, M)
    eigen_residual = float(max(np.max(np.abs(zeta @ M - zeta)), np.max(np.abs(M @ eta - eta))))

    Mb, Db = _matrix(bk, lam), _matrix(bk, lam, moment=True)
    m0 = None
    if isinstance(spec, Configuration):
        deg = spec.degrees[core]
        biased = spec.size_biased[core]
        # the backward core vectors are diagonal rescalings of the forward ones
        zeta_hat_core = eta_core * biased / (deg - 1)
        eta_hat_core = zeta_core * (deg - 1) / biased
        zeta_hat, eta_hat, Z_hat, H_hat = _bordered(core, d, zeta_hat_core, eta_hat_core, Mb)
        weights = (spec.degrees - 1) * zeta_hat / (spec.degrees * spec.probs)
        if spec.is_identical:
            m0 = lam * Kernel(1.0, spec.contact[0][0], spec.infectious[0]).laplace_moment(lam)
        R0 = _power_iteration(M0[np.ix_(core, core)])[0]
    else:
        H = float(eta.sum()) if isinstance(spec, Multitype) else 1.0
        Z = 1.0
        zeta_hat, eta_hat = eta / H, H * zeta
        Z_hat, H_hat = 1.0, H
        proportions = np.asarray(spec.proportions) if isinstance(spec, Multitype) else np.ones(1)
        weights = zeta_hat / proportions
        R0 = _power_iteration(M0)[0]

    eigen_residual = max(eigen_residual, float(np.max(np.abs(zeta_hat @ Mb - zeta_hat))),
                         float(np.max(np.abs(Mb @ eta_hat - eta_hat))))
    m_star1 = lam * float(zeta @ D @ eta)
    m_star1_backward = lam * float(zeta_hat @ Db @ eta_hat)
    m_star2 = lam * float(zeta @ D @ weights)
    c = zeta @ M0 - zeta

    consts = DerivedConstants(
        lam=lam, m_star1=m_star1, m_star2=m_star2, zeta=zeta, eta=eta,
        zeta_hat=zeta_hat, eta_hat=eta_hat, H=H, Z=Z, H_hat=H_hat, Z_hat=Z_hat, c=c,
        R0=float(R0), m_star1_backward=m_star1_backward,
        malthusian_residual=abs(rho - 1.0), eigen_residual=eigen_residual, m0=m0,
        flags=_assumption_flags(spec),
    )
    for flag in consts.flags:
        logger.warning(f"{spec.kind}: assumption flag '{flag}' (proof conditions not met, results still computed)")
    logger.info(f"{spec.kind}: lambda={lam:.10g} m*1={m_star1:.10g} m*2={m_star2:.10g}")
    return consts


def residual_cdf(spec: ModelSpec, lam: float, type_index: int = 0) -> Callable:
    """Limit law F_l of the residual delays V'(t) of determined, unborn type-l births.

    F_l(s) = 1 - c_l^{-1} sum_k zeta_k int_(s,inf) (1 - e^{-lam (v - s)}) K_kl(dv),
    vectorized in s.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    kernels = forward_kernels(spec)
    d = spec.n_types
    if not 0 <= type_index < d:
        raise ValueError(f"invalid type index {type_index}")
    core = _core(spec)
    M = _matrix(kernels, lam)
    _, zeta_core, eta_core = perron(M[np.ix_(core, core)])
    zeta = _bordered(core, d, zeta_core, eta_core, M)[0]
    column = [kernels[k][type_index] for k in range(d)]
    c = sum(zeta[k] * column[k].total for k in range(d)) - zeta[type_index]

    def F(s):
        s = np.asarray(s, dtype=float)
        pos = np.maximum(s, 0.0)
        mass = sum(zeta[k] * (np.asarray(column[k].tail(pos, 0.0)) - np.asarray(column[k].tail(pos, lam)))
                   for k in range(d) if column[k].weight)
        value = 1.0 - mass / c
        value = np.where(s < 0, 0.0, value)
        return float(value) if value.ndim == 0 else value

    return F


# =============================================================================
# LIMIT CURVES
# =============================================================================

def make_grid(u_min: float = config.U_MIN, u_max: float = config.U_MAX,
              step: float = config.U_STEP) -> np.ndarray:
    if not (step > 0 and u_max > u_min):
        raise ValueError(f"invalid grid [{u_min}, {u_max}] step {step}")
    n = int(round((u_max - u_min) / step))
    if abs(n * step - (u_max - u_min)) > 1e-9 * max(1.0, abs(u_max - u_min)):
        raise ValueError(f"grid step {step} does not divide [{u_min}, {u_max}]")
    return u_min + step * np.arange(n + 1)


@dataclass
class LimitCurve:
    """Per-type curve values on a uniform u-grid; values has shape (types, grid)."""

    u_grid: np.ndarray
    values: np.ndarray
    labels: tuple[str, ...]
    residual: float = 0.0
    saturation_gap: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def at(self, u, type_index: int = 0):
        return np.interp(u, self.u_grid, self.values[type_index])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"u": self.u_grid})
        for label, row in zip(self.labels, self.values):
            frame[label] = row
        return frame


def _labels(spec: ModelSpec) -> tuple[str, ...]:
    if isinstance(spec, Configuration):
        return tuple(f"s_hat_{k}" for k in spec.degrees)
    return tuple(f"s_hat_{l + 1}" for l in range(spec.n_types))


@dataclass
class _System:
    """f_l(u) = outer(sum_k int (1 - f_k(u - lam v)^{inner_k}) kern[l][k](dv)); s_hat_l = f_l^{power_l}."""

    kern: list
    edge: bool
    inner: np.ndarray
    power: np.ndarray
    slope: np.ndarray
    curvature: np.ndarray


def _system(spec: ModelSpec, consts: DerivedConstants) -> _System:
    if isinstance(spec, ReedFrost):
        raise ValueError("Reed-Frost runs on a generation clock; use reed_frost_curve")
    lam = consts.lam
    d = spec.n_types
    if isinstance(spec, Configuration):
        kern = [[Kernel(spec.size_biased[k], spec.contact_between(k, l), spec.period_of(k))
                 for k in range(d)] for l in range(d)]
        inner = (spec.degrees - 1).astype(float)
        power = spec.degrees.astype(float)
        L1 = _matrix(kern, lam)
        slope = np.zeros(d)
        core = _core(spec)
        slope[core] = consts.m_star2 * consts.eta_hat[core] / ((spec.degrees[core] - 1) * consts.m_star1)
        outside = np.setdiff1d(np.arange(d), core)
        slope[outside] = (L1[np.ix_(outside, core)] * inner[core] * slope[core]).sum(axis=1)
        edge = True
    else:
        kern = backward_kernels(spec)
        inner = np.ones(d)
        power = np.ones(d)
        slope = consts.m_star2 * consts.eta_hat / consts.m_star1
        edge = False
    # second-order seed 1 - a e^u + b e^{2u}
    L2 = _matrix(kern, 2.0 * lam)
    P = L2 * inner[None, :]
    rhs = L2 @ (comb(inner, 2) * slope ** 2)
    if not edge:
        rhs = rhs + slope ** 2 / 2.0
    curvature = np.linalg.solve(np.eye(d) - P, rhs)
    return _System(kern, edge, inner, power, slope, curvature)


def _hat_weights(kernel: Kernel, lam: float, step: float, n_lags: int) -> np.ndarray:
    """Product-integration weights of a piecewise-linear function against kernel(dw / lam)."""
    weights = np.zeros(n_lags + 2)
    if kernel.weight == 0:
        return weights[:n_lags + 1]
    top = min(lam * kernel.upper(), n_lags * step)
    n_seg = max(1, int(np.ceil(top / step - 1e-12)))
    edges = step * np.arange(n_seg + 1)
    cuts = lam * np.asarray(kernel.breakpoints)
    edges = np.union1d(edges, cuts[(cuts > 0) & (cuts < edges[-1])])
    a, b = edges[:-1], edges[1:]
    nodes, gw = np.polynomial.legendre.leggauss(config.GAUSS_NODES)
    half = (b - a) / 2.0
    w = (a + b)[:, None] / 2.0 + half[:, None] * nodes[None, :]
    mass = half[:, None] * gw[None, :] * kernel.density(w / lam) / lam
    lag = np.floor(((a + b) / 2.0) / step).astype(np.int64)
    t = w / step - lag[:, None]
    lag = np.broadcast_to(lag[:, None], w.shape).ravel()
    weights += np.bincount(lag, (mass * (1.0 - t)).ravel(), minlength=n_lags + 2)[:n_lags + 2]
    weights += np.bincount(lag + 1, (mass * t).ravel(), minlength=n_lags + 2)[:n_lags + 2]
    return weights[:n_lags + 1]


def _seed(system: _System, u: np.ndarray) -> np.ndarray:
    e = np.exp(u)[None, :]
    return 1.0 - system.slope[:, None] * e + system.curvature[:, None] * e * e


def _outer(system: _System, x):
    return 1.0 - x if system.edge else np.exp(-x)


def _march(system: _System, lam: float, grid: np.ndarray) -> tuple[np.ndarray, float]:
    """Left-to-right marching with per-point Picard iteration; returns (f on grid, max residual)."""
    step = float(grid[1] - grid[0])
    d = len(system.slope)
    n_left = int(np.ceil(config.BOUNDARY_EXTENSION / step))
    full = grid[0] - step * np.arange(n_left, 0, -1)
    full = np.concatenate([full, grid])
    n_lags = max(int(np.ceil(lam * k.upper() / step)) + 1 for row in system.kern for k in row)
    n_lags = min(n_lags, len(full))
    C = np.array([[_hat_weights(k, lam, step, n_lags) for k in row] for row in system.kern])
    C0 = C[:, :, 0]

    f = np.empty((d, len(full)))
    f[:, :n_left + 1] = _seed(system, full[:n_left + 1])
    g = 1.0 - f ** system.inner[:, None]
    worst = 0.0
    for i in range(n_left + 1, len(full)):
        depth = min(n_lags, i)
        window = g[:, i - depth:i][:, ::-1]
        known = np.einsum("lkj,kj->l", C[:, :, 1:depth + 1], window)
        current = f[:, i - 1].copy()
        damping, previous = 1.0, np.inf
        for _ in range(config.PICARD_MAX_ITER):
            proposal = _outer(system, known + C0 @ (1.0 - current ** system.inner))
            change = float(np.max(np.abs(proposal - current)))
            if change > previous:
                damping = config.PICARD_DAMPING
            current = current + damping * (proposal - current)
            previous = change
            if change <= config.PICARD_TOL:
                break
        residual = float(np.max(np.abs(_outer(system, known + C0 @ (1.0 - current ** system.inner)) - current)))
        if residual > config.PICARD_REPORT_TOL:
            raise ConvergenceError(f"Picard iteration failed at u = {full[i]:.4f}", residual)
        worst = max(worst, residual)
        f[:, i] = current
        g[:, i] = 1.0 - current ** system.inner
    return f[:, n_left:], worst


def solve_s_hat(spec: ModelSpec, consts: DerivedConstants, grid: Optional[np.ndarray] = None) -> LimitCurve:
    """Limit curves s_hat_l(u) from the backward functional equations."""
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    system = _system(spec, consts)
    f, residual = _march(system, consts.lam, grid)
    values = f ** system.power[:, None]
    final = final_size_and_extinction(spec).s_by_type
    gap = np.abs(values[:, -1] - final)
    if np.any(gap > 1e-3):
        logger.warning(f"{spec.kind}: curve not saturated at u = {grid[-1]:g} (gap {gap.max():.2e})")
    logger.info(f"{spec.kind}: solved s_hat on {len(grid)} points, max Picard residual {residual:.2e}")
    return LimitCurve(grid, values, _labels(spec), residual=residual, saturation_gap=gap,
                      meta={"edge_form": system.edge, "slope": system.slope})


def integral_residual(spec: ModelSpec, consts: DerivedConstants, curve: LimitCurve,
                      every: int = 10) -> float:
    """Max defect of the solved curve in the continuous equations, by adaptive quadrature.

    The curve is interpolated with cubic splines and extended left of the
    grid by the boundary seed; checks every `every`-th grid point.
    """
    system = _system(spec, consts)
    lam = consts.lam
    f = curve.values ** (1.0 / system.power[:, None])
    splines = [interpolate.CubicSpline(curve.u_grid, row) for row in f]
    u0 = curve.u_grid[0]

    def f_at(k, x):
        if x < u0:
            return float(_seed(system, np.array([x]))[k, 0])
        return float(splines[k](min(x, curve.u_grid[-1])))

    worst = 0.0
    for i in range(0, len(curve.u_grid), every):
        u = curve.u_grid[i]
        for l, row in enumerate(system.kern):
            total = 0.0
            for k, kern in enumerate(row):
                if not kern.weight:
                    continue
                total += kern._quad(lambda v, k=k: 1.0 - f_at(k, u - lam * v) ** system.inner[k])
            lhs = f[l, i]
            worst = max(worst, abs(float(_outer(system, total)) - lhs))
    return worst


def s_hat_monte_carlo(w_samples, m_star2: float, grid: Optional[np.ndarray] = None) -> LimitCurve:
    """Sample mean of exp(-W e^u m*2) over backward limit samples."""
    values = np.asarray([getattr(w, "value", w) for w in w_samples], dtype=float)
    if not len(values):
        raise ValueError("no limit samples")
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    draws = np.exp(-np.outer(values, np.exp(grid) * m_star2))
    mean = draws.mean(axis=0)
    stderr = draws.std(axis=0, ddof=1) / np.sqrt(len(values)) if len(values) > 1 else np.zeros_like(mean)
    return LimitCurve(grid, mean[None, :], ("mc_s_hat",), meta={"stderr": stderr, "samples": len(values)})


# =============================================================================
# FINAL SIZE AND EXTINCTION
# =============================================================================

@dataclass
class FinalSize:
    s_inf: float
    q_forward: float
    q_backward: float
    s_by_type: np.ndarray
    q_forward_by_type: np.ndarray
    q_tilde: Optional[np.ndarray] = None


def _minimal_root(gen: Callable[[float], float]) -> float:
    """Smallest fixed point in [0, 1) of an increasing pgf-like map with gen(1) = 1."""
    if gen(0.0) <= 0.0:
        return 0.0
    return float(optimize.brentq(lambda s: gen(s) - s, 0.0, 1.0 - 1e-9, xtol=1e-15,
                                 rtol=4 * np.finfo(float).eps))


def final_size_from_r0(r0: float) -> float:
    """Root in (0, 1) of -log s = R0 (1 - s); 1 when R0 <= 1."""
    if r0 <= 1.0:
        return 1.0
    return _minimal_root(lambda s: np.exp(-r0 * (1.0 - s)))


def _fixed_point(update: Callable[[np.ndarray], np.ndarray], d: int) -> np.ndarray:
    """Monotone iteration from 0 to the minimal fixed point of a vector map."""
    q = np.zeros(d)
    for _ in range(200_000):
        nxt = update(q)
        if np.max(np.abs(nxt - q)) <= 1e-15:
            return nxt
        q = nxt
    raise ConvergenceError("fixed-point iteration did not settle", float(np.max(np.abs(update(q) - q))))


def _configuration_forward(spec: Configuration, root: bool, q_edge: np.ndarray) -> np.ndarray:
    """Extinction probability of a class-l individual given the per-class child extinctions."""
    d = spec.n_types
    out = np.empty(d)
    for l in range(d):
        slots = spec.degrees[l] - 1 + int(root)
        laws = [spec.contact_between(l, k) for k in range(d)]

        def per_slot(t, laws=laws):
            t = np.asarray(t, dtype=float)
            hit = [np.asarray(G.cdf(t)) for G in laws]
            return sum(spec.size_biased[k] * (1.0 - hit[k] + hit[k] * q_edge[k]) for k in range(d))

        out[l] = _period_expectation(spec.period_of(l), lambda t: per_slot(t) ** slots)
    return out


def final_size_and_extinction(spec: ModelSpec) -> FinalSize:
    """Final susceptible fraction and forward / backward extinction probabilities.

    Subcritical specs return s_inf = 1 and q = 1.
    """
    d = spec.n_types
    kernels = forward_kernels(spec)
    core = _core(spec)
    r0 = _power_iteration(_matrix(kernels, 0.0)[np.ix_(core, core)])[0] if len(core) else 0.0
    if r0 <= 1.0:
        ones = np.ones(d)
        return FinalSize(1.0, 1.0, 1.0, ones, ones, ones if isinstance(spec, Configuration) else None)

    if isinstance(spec, SINGLE_TYPE):
        law = spec.offspring
        qf = _minimal_root(lambda s: float(law.pgf(s)))
        mu = law.mean
        qb = final_size_from_r0(mu)
        return FinalSize(qb, qf, qb, np.array([qb]), np.array([qf]))

    if isinstance(spec, Multitype):
        mu = spec.mean_matrix
        qb = _fixed_point(lambda q: np.exp(-mu.T @ (1.0 - q)), d)
        qf = _fixed_point(lambda q: np.exp(-mu @ (1.0 - q)), d)
        pi = np.asarray(spec.proportions)
        return FinalSize(float(pi @ qb), float(pi @ qf), float(pi @ qb), qb, qf)

    if isinstance(spec, Configuration):
        U = np.array([[Kernel(1.0, spec.contact_between(k, l), spec.period_of(k)).total
                       for l in range(d)] for k in range(d)])
        inner = spec.degrees - 1
        biased = spec.size_biased
        # h_l = 1 - sum_k (k p_k / m)(1 - h_k^{k-1}) U_kl(0)
        h = _fixed_point(lambda h: 1.0 - (biased * (1.0 - h ** inner)) @ U, d)
        s_by_type = h ** spec.degrees
        s_inf = float(spec.probs @ s_by_type)
        q_edge = _fixed_point(lambda q: _configuration_forward(spec, False, q), d)
        q_root = _configuration_forward(spec, True, q_edge)
        return FinalSize(s_inf, float(spec.probs @ q_root), s_inf, s_by_type, q_root, q_tilde=h)

    raise ValueError(f"unsupported spec {type(spec).__name__}")


# =============================================================================
# VOLZ ODES
# =============================================================================

@dataclass
class VolzSolution:
    u_grid: np.ndarray
    h: np.ndarray
    p_s: Optional[np.ndarray]
    p_i: Optional[np.ndarray]
    curve: LimitCurve
    identity_deviation: float = 0.0   # max of the two closed-form identity defects
    system_deviation: float = 0.0     # max |h(3-ODE) - h(scalar ODE)|


def volz_ode(spec: Configuration, grid: Optional[np.ndarray] = None) -> VolzSolution:
    """Edge-based ODEs for configuration specs with identical contact and period laws.

    Time runs as t = u / lambda. Non-exponential identical laws are solved
    through the integral form on the same grid.
    """
    if not isinstance(spec, Configuration) or not spec.is_identical:
        raise ValueError("volz_ode needs a configuration spec with identical contact and period laws")
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    consts = constants(spec)
    lam = consts.lam
    if not spec.is_volz:
        curve = solve_s_hat(spec, consts, grid)
        h = curve.values[0] ** (1.0 / spec.degrees[0])
        return VolzSolution(grid, h, None, None, curve)

    alpha, beta = spec.contact[0][0].rate, spec.infectious[0].rate
    m = spec.mean_degree
    g1 = lambda x: spec.pgf(x, 1)
    g2 = lambda x: spec.pgf(x, 2)
    c = consts.m_star2 * m / (spec.factorial_moment2 * consts.m_star1)
    c2 = alpha * spec.factorial_moment3 * c * c / (2.0 * m * lam)
    t_grid = grid / lam
    e0 = np.exp(grid[0])
    h0 = 1.0 - c * e0 + c2 * e0 * e0

    scalar = integrate.solve_ivp(
        lambda t, y: [(alpha / m) * g1(y[0]) - (alpha + beta) * y[0] + beta],
        (t_grid[0], t_grid[-1]), [h0], method="RK45", t_eval=t_grid,
        rtol=config.ODE_RTOL, atol=config.ODE_ATOL,
    )

    def three(t, y):
        h, ps, pi = y
        ratio = h * g2(h) / g1(h)
        return [-alpha * pi * h,
                alpha * ps * pi * (1.0 - ratio),
                alpha * ps * pi * ratio - alpha * pi * (1.0 - pi) - beta * pi]

    ps0 = g1(h0) / (m * h0)
    pi0 = 1.0 - ps0 + (beta / alpha) * (1.0 - 1.0 / h0)
    coupled = integrate.solve_ivp(three, (t_grid[0], t_grid[-1]), [h0, ps0, pi0], method="RK45",
                                  t_eval=t_grid, rtol=config.ODE_RTOL, atol=config.ODE_ATOL)
    if not (scalar.success and coupled.success):
        raise ConvergenceError(f"Volz ODE integration failed: {scalar.message} / {coupled.message}")

    h = scalar.y[0]
    h3, ps, pi = coupled.y
    ps_closed = g1(h3) / (m * h3)
    pi_closed = 1.0 - ps_closed + (beta / alpha) * (1.0 - 1.0 / h3)
    identity = float(max(np.max(np.abs(ps - ps_closed)), np.max(np.abs(pi - pi_closed))))
    system = float(np.max(np.abs(h3 - h)))
    values = h[None, :] ** spec.degrees[:, None]
    curve = LimitCurve(grid, values, _labels(spec), meta={"initial_slope": c})
    logger.info(f"Volz ODE: h(end)={h[-1]:.8f} identity defect {identity:.2e} system defect {system:.2e}")
    return VolzSolution(grid, h, ps, pi, curve, identity, system)


# =============================================================================
# GALTON-WATSON TRANSFORM
# =============================================================================

def gw_psi(mu: float, theta) -> np.ndarray:
    """Laplace transform of the mean-one Poisson(mu) Galton-Watson limit.

    Uses a third-order series below GW_THETA0 and climbs with
    psi(mu theta) = exp(-mu (1 - psi(theta))).
    """
    if not mu > 1:
        raise ValueError(f"mu must exceed 1, got {mu}")
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    c2 = mu / (2.0 * (mu - 1.0))
    c3 = (mu * mu * c2 + mu ** 3 / 6.0) / (mu ** 3 - mu)
    theta0 = config.GW_THETA0
    steps = np.where(theta > theta0, np.ceil(np.log(np.maximum(theta, theta0) / theta0) / np.log(mu)), 0)
    steps = np.where(np.isfinite(theta), steps, 0).astype(np.int64)
    x = np.where(np.isfinite(theta), theta / mu ** steps.astype(float), 0.0)
    psi = 1.0 - x + c2 * x * x - c3 * x ** 3
    for n in range(int(steps.max(initial=0))):
        active = steps > n
        psi = np.where(active, np.exp(-mu * (1.0 - psi)), psi)
    q = final_size_from_r0(mu)
    psi = np.where(np.isfinite(theta), psi, q)
    return float(psi) if psi.ndim == 0 else psi


def reed_frost_curve(mu: float, grid: Optional[np.ndarray] = None) -> LimitCurve:
    """psi(mu^{u+1} / (mu - 1)) on a grid in generation units."""
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    values = gw_psi(mu, mu ** (grid + 1.0) / (mu - 1.0))
    return LimitCurve(grid, np.atleast_2d(values), ("s_hat_1",))
