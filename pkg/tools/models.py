# tools/models.py
"""
Model specifications and samplers for potential infection histories.

A model spec is an immutable description of one model family. Every sampler
takes an explicit numpy Generator, so replicates are reproducible and
independent. Contact kernels (the mean measures derived from a spec) live
here too; the numerics in curves.py only ever see kernels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import ClassVar, Optional, Sequence, Union

import numpy as np
from scipy import integrate, stats

import config

logger = logging.getLogger(__name__)


def make_rng(seed: int) -> np.random.Generator:
    """Master stream: counter-based Philox seeded through a SeedSequence."""
    if seed is None:
        raise ValueError("seed is required")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


# =============================================================================
# TIME DISTRIBUTIONS
# =============================================================================

def _exprel(x):
    """(1 - e^{-x}) / x with the x -> 0 limit."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2.0, -np.expm1(-safe) / safe)


def _exprel2(x):
    """Integral of t e^{-xt} over [0, 1] with the x -> 0 limit."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    big = (1.0 - np.exp(-safe) * (1.0 + safe)) / (safe * safe)
    return np.where(small, 0.5 - x / 3.0 + x * x / 8.0, big)


def _scalar(value):
    value = np.asarray(value, dtype=float)
    return float(value) if value.ndim == 0 else value


class TimeDistribution:
    """Base class for contact-time and infectious-period laws.

    Subclasses provide closed forms for the Laplace transform
    L(s) = int e^{-sv} dist(dv), its moment int v e^{-sv} dist(dv) and the
    tail transform int_{(s, inf)} e^{-theta (v - s)} dist(dv).
    """

    family: ClassVar[str] = "abstract"
    lattice: ClassVar[bool] = False

    @property
    def total_mass(self) -> float:
        return 1.0

    @property
    def support(self) -> tuple[float, float]:
        return (0.0, np.inf)

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return ()

    def laplace(self, s):
        raise NotImplementedError

    def laplace_moment(self, s):
        raise NotImplementedError

    def tail(self, s, theta=0.0):
        raise NotImplementedError

    def pdf(self, v):
        raise NotImplementedError

    def cdf(self, v):
        raise NotImplementedError

    def sf(self, v):
        """P(X > v), counting the atom at infinity of a defective law."""
        return _scalar(1.0 - np.asarray(self.cdf(v)))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def upper(self, eps: float) -> float:
        """Point beyond which at most eps of the finite mass remains."""
        raise NotImplementedError

    def mean(self) -> float:
        return float(self.laplace_moment(0.0)) / self.total_mass


@dataclass(frozen=True)
class Exponential(TimeDistribution):
    rate: float

    family: ClassVar[str] = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"exponential rate must be positive, got {self.rate}")

    def laplace(self, s):
        return _scalar(self.rate / (self.rate + np.asarray(s, dtype=float)))

    def laplace_moment(self, s):
        return _scalar(self.rate / (self.rate + np.asarray(s, dtype=float)) ** 2)

    def tail(self, s, theta=0.0):
        s = np.asarray(s, dtype=float)
        return _scalar(np.exp(-self.rate * s) * self.rate / (self.rate + theta))

    def pdf(self, v):
        return _scalar(stats.expon(scale=1.0 / self.rate).pdf(v))

    def cdf(self, v):
        return _scalar(stats.expon(scale=1.0 / self.rate).cdf(v))

    def sample(self, rng, size):
        return rng.exponential(1.0 / self.rate, size)

    def upper(self, eps):
        return float(-np.log(eps) / self.rate)


@dataclass(frozen=True)
class Gamma(TimeDistribution):
    shape: float
    rate: float

    family: ClassVar[str] = "gamma"

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"gamma shape and rate must be positive, got {self.shape}, {self.rate}")

    def laplace(self, s):
        return _scalar((self.rate / (self.rate + np.asarray(s, dtype=float))) ** self.shape)

    def laplace_moment(self, s):
        s = np.asarray(s, dtype=float)
        return _scalar(self.shape * self.rate ** self.shape / (self.rate + s) ** (self.shape + 1.0))

    def tail(self, s, theta=0.0):
        # e^{theta s} int_s^inf e^{-theta v} g(v) dv, rewritten as a gamma(shape, rate + theta) tail
        s = np.asarray(s, dtype=float)
        shifted = self.rate + theta
        logsf = stats.gamma.logsf(s, self.shape, scale=1.0 / shifted)
        return _scalar(np.exp(theta * s + self.shape * np.log(self.rate / shifted) + logsf))

    def pdf(self, v):
        return _scalar(stats.gamma(self.shape, scale=1.0 / self.rate).pdf(v))

    def cdf(self, v):
        return _scalar(stats.gamma(self.shape, scale=1.0 / self.rate).cdf(v))

    def sample(self, rng, size):
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def upper(self, eps):
        return float(stats.gamma(self.shape, scale=1.0 / self.rate).isf(eps))


@dataclass(frozen=True)
class Uniform(TimeDistribution):
    low: float
    high: float

    family: ClassVar[str] = "uniform"

    def __post_init__(self):
        if not (0 <= self.low < self.high < np.inf):
            raise ValueError(f"uniform needs 0 <= low < high < inf, got ({self.low}, {self.high})")

    @property
    def width(self) -> float:
        return self.high - self.low

    @property
    def support(self):
        return (self.low, self.high)

    @property
    def breakpoints(self):
        return (self.low, self.high)

    def laplace(self, s):
        s = np.asarray(s, dtype=float)
        return _scalar(np.exp(-s * self.low) * _exprel(s * self.width))

    def laplace_moment(self, s):
        s = np.asarray(s, dtype=float)
        w = self.width
        return _scalar(np.exp(-s * self.low) * (self.low * _exprel(s * w) + w * _exprel2(s * w)))

    def tail(self, s, theta=0.0):
        s = np.asarray(s, dtype=float)
        lo = np.clip(s, self.low, self.high)
        length = self.high - lo
        return _scalar(np.exp(-theta * (lo - s)) * length * _exprel(theta * length) / self.width)

    def pdf(self, v):
        return _scalar(stats.uniform(loc=self.low, scale=self.width).pdf(v))

    def cdf(self, v):
        return _scalar(stats.uniform(loc=self.low, scale=self.width).cdf(v))

    def sample(self, rng, size):
        return rng.uniform(self.low, self.high, size)

    def upper(self, eps):
        return float(self.high)


@dataclass(frozen=True)
class PointMass(TimeDistribution):
    """Deterministic time. Used for generation clocks and instant removal only."""

    at: float

    family: ClassVar[str] = "point"
    lattice: ClassVar[bool] = True

    def __post_init__(self):
        if not (0 <= self.at < np.inf):
            raise ValueError(f"point mass location must be finite and >= 0, got {self.at}")

    @property
    def support(self):
        return (self.at, self.at)

    @property
    def breakpoints(self):
        return (self.at,)

    def laplace(self, s):
        return _scalar(np.exp(-np.asarray(s, dtype=float) * self.at))

    def laplace_moment(self, s):
        return _scalar(self.at * np.exp(-np.asarray(s, dtype=float) * self.at))

    def tail(self, s, theta=0.0):
        s = np.asarray(s, dtype=float)
        return _scalar(np.where(s < self.at, np.exp(-theta * (self.at - s)), 0.0))

    def pdf(self, v):
        raise ValueError("a point mass has no density")

    def cdf(self, v):
        return _scalar(np.where(np.asarray(v, dtype=float) >= self.at, 1.0, 0.0))

    def sample(self, rng, size):
        return np.full(size, self.at, dtype=float)

    def upper(self, eps):
        return float(self.at)


@dataclass(frozen=True)
class Defective(TimeDistribution):
    """A proper law carrying total mass `mass`; the rest sits at infinity."""

    base: TimeDistribution
    mass: float

    family: ClassVar[str] = "defective"

    def __post_init__(self):
        if isinstance(self.base, Defective):
            raise ValueError("defective laws do not nest")
        if not 0 < self.mass <= 1:
            raise ValueError(f"defective mass must lie in (0, 1], got {self.mass}")

    @property
    def lattice(self):
        return self.base.lattice

    @property
    def total_mass(self):
        return self.mass

    @property
    def support(self):
        return self.base.support

    @property
    def breakpoints(self):
        return self.base.breakpoints

    def laplace(self, s):
        return _scalar(self.mass * np.asarray(self.base.laplace(s)))

    def laplace_moment(self, s):
        return _scalar(self.mass * np.asarray(self.base.laplace_moment(s)))

    def tail(self, s, theta=0.0):
        return _scalar(self.mass * np.asarray(self.base.tail(s, theta)))

    def pdf(self, v):
        return _scalar(self.mass * np.asarray(self.base.pdf(v)))

    def cdf(self, v):
        return _scalar(self.mass * np.asarray(self.base.cdf(v)))

    def sample(self, rng, size):
        hit = rng.random(size) < self.mass
        values = np.full(size, np.inf)
        values[hit] = self.base.sample(rng, int(hit.sum()))
        return values

    def upper(self, eps):
        return self.base.upper(eps / self.mass)

    def mean(self):
        return self.base.mean()


# =============================================================================
# OFFSPRING LAWS
# =============================================================================

class OffspringLaw:
    """Base class for the contact-count law of a single-type individual."""

    law: ClassVar[str] = "abstract"

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def second_moment(self) -> float:
        raise NotImplementedError

    def pgf(self, s):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Poisson(OffspringLaw):
    rate: float

    law: ClassVar[str] = "poisson"

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError(f"poisson mean must be >= 0, got {self.rate}")

    @property
    def mean(self):
        return float(self.rate)

    @property
    def second_moment(self):
        return float(self.rate ** 2 + self.rate)

    def pgf(self, s):
        return np.exp(-self.rate * (1.0 - np.asarray(s, dtype=float)))

    def sample(self, rng, size):
        return rng.poisson(self.rate, size)


@dataclass(frozen=True)
class Geometric(OffspringLaw):
    """Geometric on {0, 1, ...} parametrized by its mean."""

    average: float

    law: ClassVar[str] = "geometric"

    def __post_init__(self):
        if not self.average >= 0:
            raise ValueError(f"geometric mean must be >= 0, got {self.average}")

    @property
    def mean(self):
        return float(self.average)

    @property
    def second_moment(self):
        return float(2.0 * self.average ** 2 + self.average)

    def pgf(self, s):
        p = 1.0 / (1.0 + self.average)
        return p / (1.0 - (1.0 - p) * np.asarray(s, dtype=float))

    def sample(self, rng, size):
        return rng.geometric(1.0 / (1.0 + self.average), size) - 1


@dataclass(frozen=True)
class Fixed(OffspringLaw):
    count: int

    law: ClassVar[str] = "fixed"

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"fixed offspring count must be >= 0, got {self.count}")

    @property
    def mean(self):
        return float(self.count)

    @property
    def second_moment(self):
        return float(self.count ** 2)

    def pgf(self, s):
        return np.asarray(s, dtype=float) ** self.count

    def sample(self, rng, size):
        return np.full(size, self.count, dtype=np.int64)


@dataclass(frozen=True)
class Categorical(OffspringLaw):
    """P(nu = k) = probs[k] for k = 0..len(probs)-1."""

    probs: tuple[float, ...]

    law: ClassVar[str] = "categorical"

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("categorical probs must be nonnegative and sum to 1")

    @property
    def mean(self):
        return float(np.dot(np.arange(len(self.probs)), self.probs))

    @property
    def second_moment(self):
        return float(np.dot(np.arange(len(self.probs)) ** 2, self.probs))

    def pgf(self, s):
        return np.polynomial.polynomial.polyval(np.asarray(s, dtype=float), self.probs)

    def sample(self, rng, size):
        return rng.choice(len(self.probs), size=size, p=np.asarray(self.probs))


# =============================================================================
# MODEL SPECS
# =============================================================================

def _check_contact_time(dist: TimeDistribution, where: str) -> None:
    if not isinstance(dist, TimeDistribution):
        raise ValueError(f"{where}: expected a time distribution, got {type(dist).__name__}")
    if dist.lattice:
        raise ValueError(f"{where}: contact-time distributions must be non-lattice")


@dataclass(frozen=True)
class MarkovSIR:
    """Contacts at the points of a rate-beta Poisson stream, killed at an Exp(gamma) removal."""

    beta: float
    gamma: float

    kind: ClassVar[str] = "markov_sir"
    n_types: ClassVar[int] = 1

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma > 0):
            raise ValueError(f"MarkovSIR needs beta > 0 and gamma > 0, got {self.beta}, {self.gamma}")

    @property
    def offspring(self) -> OffspringLaw:
        return Geometric(self.beta / self.gamma)

    @property
    def contact_time(self) -> TimeDistribution:
        return Exponential(self.gamma)


@dataclass(frozen=True)
class CountTimes:
    """Contact count from `offspring`, contact times i.i.d. from `times`."""

    offspring: OffspringLaw
    times: TimeDistribution

    kind: ClassVar[str] = "count_times"
    n_types: ClassVar[int] = 1

    def __post_init__(self):
        if not isinstance(self.offspring, OffspringLaw):
            raise ValueError("CountTimes offspring must be an offspring law")
        _check_contact_time(self.times, "CountTimes times")
        if self.times.total_mass != 1.0:
            raise ValueError("CountTimes contact times must be a proper distribution")

    @property
    def contact_time(self) -> TimeDistribution:
        return self.times


@dataclass(frozen=True)
class ReedFrost:
    """Poisson(mu) offspring on a discrete generation clock."""

    mu: float

    kind: ClassVar[str] = "reed_frost"
    n_types: ClassVar[int] = 1

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"ReedFrost mean offspring must be positive, got {self.mu}")

    @property
    def offspring(self) -> OffspringLaw:
        return Poisson(self.mu)

    @property
    def contact_time(self) -> TimeDistribution:
        return PointMass(1.0)


def _as_matrix(value, d: int, where: str):
    """Broadcast a single distribution to a d x d tuple of tuples."""
    if isinstance(value, TimeDistribution):
        return tuple(tuple(value for _ in range(d)) for _ in range(d))
    rows = tuple(tuple(row) for row in value)
    if len(rows) != d or any(len(row) != d for row in rows):
        raise ValueError(f"{where} must be a {d}x{d} matrix")
    return rows


def _is_irreducible(adjacency: np.ndarray) -> bool:
    d = adjacency.shape[0]
    reach = np.linalg.matrix_power(np.eye(d) + (adjacency > 0), max(d - 1, 1))
    return bool(np.all(reach > 0))


@dataclass(frozen=True)
class Multitype:
    """d types; a type-l individual makes Poisson(mean[l][k]) type-k contacts at i.i.d. G_lk times."""

    proportions: tuple[float, ...]
    mean: tuple[tuple[float, ...], ...]
    times: tuple[tuple[TimeDistribution, ...], ...]

    kind: ClassVar[str] = "multitype"

    def __post_init__(self):
        pi = np.asarray(self.proportions, dtype=float)
        d = len(pi)
        if d == 0 or np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("multitype proportions must be positive and sum to 1")
        mu = np.asarray(self.mean, dtype=float)
        if mu.shape != (d, d):
            raise ValueError(f"mean matrix must be {d}x{d}, got shape {mu.shape}")
        if np.any(mu < 0):
            raise ValueError("mean matrix must be nonnegative")
        if not _is_irreducible(mu):
            raise ValueError("mean matrix must be irreducible")
        object.__setattr__(self, "times", _as_matrix(self.times, d, "multitype times"))
        for l in range(d):
            for k in range(d):
                _check_contact_time(self.times[l][k], f"times[{l}][{k}]")

    @classmethod
    def build(cls, proportions: Sequence[float], mean: Sequence[Sequence[float]],
              times: Union[TimeDistribution, Sequence[Sequence[TimeDistribution]]]) -> "Multitype":
        return cls(tuple(float(p) for p in proportions),
                   tuple(tuple(float(x) for x in row) for row in mean),
                   times)

    @property
    def n_types(self) -> int:
        return len(self.proportions)

    @property
    def mean_matrix(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=float)


@dataclass(frozen=True)
class Configuration:
    """SIR on a configuration-model graph.

    degree_probs[k-1] = p_k for k = 1..K. Types are the degree classes with
    p_k > 0; contact[k-1][l-1] is the contact-time law from a degree-k
    infective to a degree-l neighbour and infectious[k-1] the period law.
    """

    degree_probs: tuple[float, ...]
    contact: tuple[tuple[TimeDistribution, ...], ...]
    infectious: tuple[TimeDistribution, ...]

    kind: ClassVar[str] = "configuration"

    def __post_init__(self):
        p = np.asarray(self.degree_probs, dtype=float)
        if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("degree_probs must be nonnegative and sum to 1")
        K = len(p)
        object.__setattr__(self, "contact", _as_matrix(self.contact, K, "contact"))
        infectious = self.infectious
        if isinstance(infectious, TimeDistribution):
            infectious = tuple(infectious for _ in range(K))
        infectious = tuple(infectious)
        if len(infectious) != K:
            raise ValueError(f"infectious must list {K} distributions")
        object.__setattr__(self, "infectious", infectious)
        for k in range(K):
            if not isinstance(infectious[k], TimeDistribution):
                raise ValueError(f"infectious[{k}] must be a time distribution")
            for l in range(K):
                _check_contact_time(self.contact[k][l], f"contact[{k}][{l}]")

    @classmethod
    def volz(cls, alpha: float, beta: float, degree_probs: Sequence[float]) -> "Configuration":
        """Exponential(alpha) contacts along edges, Exponential(beta) infectious periods."""
        probs = tuple(float(x) for x in degree_probs)
        return cls(probs, Exponential(alpha), Exponential(beta))

    @property
    def degrees(self) -> np.ndarray:
        """Degrees of the classes present (p_k > 0); class index -> degree."""
        return np.flatnonzero(np.asarray(self.degree_probs) > 0) + 1

    @property
    def probs(self) -> np.ndarray:
        return np.asarray(self.degree_probs, dtype=float)[self.degrees - 1]

    @property
    def n_types(self) -> int:
        return len(self.degrees)

    @property
    def mean_degree(self) -> float:
        return float(np.dot(self.degrees, self.probs))

    @property
    def factorial_moment2(self) -> float:
        k = self.degrees
        return float(np.dot(k * (k - 1), self.probs))

    @property
    def factorial_moment3(self) -> float:
        k = self.degrees
        return float(np.dot(k * (k - 1) * (k - 2), self.probs))

    @property
    def size_biased(self) -> np.ndarray:
        """Neighbour class law k p_k / m."""
        return self.degrees * self.probs / self.mean_degree

    def contact_between(self, source: int, target: int) -> TimeDistribution:
        """Contact-time law from class `source` to class `target`."""
        return self.contact[self.degrees[source] - 1][self.degrees[target] - 1]

    def period_of(self, cls_index: int) -> TimeDistribution:
        return self.infectious[self.degrees[cls_index] - 1]

    def pgf(self, s, derivative: int = 0):
        """g(s) = sum p_k s^k and its derivatives."""
        s = np.asarray(s, dtype=float)
        total = np.zeros_like(s)
        for k, p in zip(self.degrees, self.probs):
            if k < derivative:
                continue
            falling = float(np.prod(np.arange(k, k - derivative, -1))) if derivative else 1.0
            total = total + p * falling * s ** (k - derivative)
        return _scalar(total)

    @property
    def is_identical(self) -> bool:
        first = self.contact[0][0]
        return (all(g == first for row in self.contact for g in row)
                and all(phi == self.infectious[0] for phi in self.infectious))

    @property
    def is_volz(self) -> bool:
        return (self.is_identical and type(self.contact[0][0]) is Exponential
                and type(self.infectious[0]) is Exponential)


ModelSpec = Union[MarkovSIR, CountTimes, ReedFrost, Multitype, Configuration]
SINGLE_TYPE = (MarkovSIR, CountTimes, ReedFrost)


def check_type(spec: ModelSpec, source_type: int) -> None:
    if not 0 <= int(source_type) < spec.n_types:
        raise ValueError(f"invalid type index {source_type} for a {spec.n_types}-type {spec.kind} spec")


# =============================================================================
# INFECTION HISTORIES
# =============================================================================

@dataclass(frozen=True)
class InfectionHistory:
    """One draw of the contact process of an infected individual."""

    times: np.ndarray                 # time since infection, non-decreasing, > 0
    targets: np.ndarray               # target type per contact
    removal: Optional[float] = None   # end of infectiousness, if the model has one
    candidates: Optional[int] = None  # acquaintance slots (configuration only)

    def __post_init__(self):
        if len(self.times) != len(self.targets):
            raise ValueError("times and targets must have equal length")
        if len(self.times):
            if np.any(self.times <= 0) or np.any(np.diff(self.times) < 0):
                raise ValueError("contact times must be positive and non-decreasing")
            if self.removal is not None and self.times[-1] > self.removal:
                raise ValueError("contact after removal")

    @property
    def count(self) -> int:
        return len(self.times)


@dataclass
class HistoryBatch:
    """Histories of n individuals in CSR layout, contacts sorted by (owner, time)."""

    owners: np.ndarray
    times: np.ndarray
    targets: np.ndarray
    removal: np.ndarray
    offsets: np.ndarray
    candidates: Optional[np.ndarray] = None

    @classmethod
    def assemble(cls, n, owners, times, targets, removal, candidates=None) -> "HistoryBatch":
        order = np.lexsort((times, owners))
        owners = owners[order]
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(owners, minlength=n), out=offsets[1:])
        return cls(owners, times[order], targets[order].astype(np.int64), removal, offsets, candidates)

    @property
    def size(self) -> int:
        return len(self.offsets) - 1

    def history(self, i: int) -> InfectionHistory:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        removal = float(self.removal[i])
        return InfectionHistory(
            times=self.times[lo:hi],
            targets=self.targets[lo:hi],
            removal=None if np.isinf(removal) else removal,
            candidates=None if self.candidates is None else int(self.candidates[i]),
        )


def _configuration_batch(spec: Configuration, types: np.ndarray, slots: np.ndarray,
                         rng: np.random.Generator, period_of, contact_of):
    """Slot draws shared by the forward and backward configuration processes.

    Returns (owners, times, child types) of the realized slots.
    `period_of(owners, child_types, rng)` gives the censoring period per slot and
    `contact_of(parent, child)` the contact-time law for that ordered pair.
    """
    n = len(types)
    owners = np.repeat(np.arange(n), slots)
    child = rng.choice(spec.n_types, size=len(owners), p=spec.size_biased)
    parent = types[owners]
    times = np.empty(len(owners))
    for l in range(spec.n_types):
        for k in range(spec.n_types):
            mask = (parent == l) & (child == k)
            if mask.any():
                times[mask] = contact_of(l, k).sample(rng, int(mask.sum()))
    period = period_of(owners, child, rng)
    keep = np.isfinite(times) & (times <= period)
    return owners[keep], times[keep], child[keep]


def sample_histories(spec: ModelSpec, source_types, rng: np.random.Generator,
                     roots=False) -> HistoryBatch:
    """Vectorized draw of i.i.d. histories for individuals of the given types.

    For configuration specs a root has k acquaintance slots instead of k - 1.
    """
    types = np.atleast_1d(np.asarray(source_types, dtype=np.int64))
    n = len(types)
    if n and (types.min() < 0 or types.max() >= spec.n_types):
        raise ValueError(f"invalid type index in {types.tolist()} for {spec.kind}")
    removal = np.full(n, np.inf)
    zeros = np.zeros(0, dtype=np.int64)

    if isinstance(spec, MarkovSIR):
        removal = rng.exponential(1.0 / spec.gamma, n)
        counts = rng.poisson(spec.beta * removal)
        owners = np.repeat(np.arange(n), counts)
        times = rng.uniform(0.0, removal[owners])
        return HistoryBatch.assemble(n, owners, times, np.zeros_like(owners), removal)

    if isinstance(spec, CountTimes):
        counts = np.asarray(spec.offspring.sample(rng, n), dtype=np.int64)
        owners = np.repeat(np.arange(n), counts)
        times = spec.times.sample(rng, int(counts.sum()))
        return HistoryBatch.assemble(n, owners, times, np.zeros_like(owners), removal)

    if isinstance(spec, ReedFrost):
        counts = rng.poisson(spec.mu, n)
        owners = np.repeat(np.arange(n), counts)
        return HistoryBatch.assemble(n, owners, np.ones(len(owners)), np.zeros_like(owners), removal)

    if isinstance(spec, Multitype):
        mu = spec.mean_matrix
        parts_o, parts_t, parts_k = [zeros], [np.zeros(0)], [zeros]
        for l in range(spec.n_types):
            idx = np.flatnonzero(types == l)
            if not len(idx):
                continue
            for k in range(spec.n_types):
                counts = rng.poisson(mu[l, k], size=len(idx))
                parts_o.append(np.repeat(idx, counts))
                parts_t.append(spec.times[l][k].sample(rng, int(counts.sum())))
                parts_k.append(np.full(int(counts.sum()), k, dtype=np.int64))
        return HistoryBatch.assemble(n, np.concatenate(parts_o), np.concatenate(parts_t),
                                     np.concatenate(parts_k), removal)

    if isinstance(spec, Configuration):
        for l in range(spec.n_types):
            idx = np.flatnonzero(types == l)
            if len(idx):
                removal[idx] = spec.period_of(l).sample(rng, len(idx))
        slots = spec.degrees[types] - 1 + np.asarray(roots, dtype=np.int64)
        owners, times, child = _configuration_batch(
            spec, types, slots, rng,
            period_of=lambda owners, child, rng: removal[owners],
            contact_of=spec.contact_between,
        )
        return HistoryBatch.assemble(n, owners, times, child, removal, candidates=slots)

    raise ValueError(f"unsupported spec {type(spec).__name__}")


def sample_history(spec: ModelSpec, source_type: int, rng: np.random.Generator,
                   root: bool = False) -> InfectionHistory:
    """One i.i.d. potential infection history for an individual of `source_type`."""
    check_type(spec, source_type)
    return sample_histories(spec, [source_type], rng, roots=root).history(0)


# =============================================================================
# CONTACT KERNELS
# =============================================================================

@dataclass(frozen=True)
class Kernel:
    """The measure weight * (1 - Phi(v)) * G(dv) on the delay axis.

    With period None there is no censoring. Closed forms are used when the
    period is absent, exponential (possibly defective) or a point mass;
    anything else falls back to adaptive quadrature.
    """

    weight: float
    contact: TimeDistribution
    period: Optional[TimeDistribution] = None

    def _exponential_censor(self):
        """(q0, q1, rate) with 1 - Phi(v) = q0 + q1 e^{-rate v}, or None."""
        phi = self.period
        if phi is None:
            return (1.0, 0.0, 0.0)
        if type(phi) is Exponential:
            return (0.0, 1.0, phi.rate)
        if type(phi) is Defective and type(phi.base) is Exponential:
            return (1.0 - phi.mass, phi.mass, phi.base.rate)
        return None

    @property
    def breakpoints(self) -> tuple[float, ...]:
        points = set(self.contact.breakpoints)
        if self.period is not None:
            points.update(self.period.breakpoints)
        return tuple(sorted(p for p in points if np.isfinite(p)))

    @property
    def total(self) -> float:
        return float(self.laplace(0.0))

    def upper(self, eps: float = config.TAIL_EPS) -> float:
        return self.contact.upper(eps)

    def survival(self, v):
        return 1.0 if self.period is None else self.period.sf(v)

    def density(self, v):
        v = np.asarray(v, dtype=float)
        return self.weight * np.asarray(self.survival(v)) * np.asarray(self.contact.pdf(v))

    def _quad(self, fn) -> float:
        """Integrate fn(v) * density(v) over the support, split at breakpoints."""
        lo, hi = self.contact.support
        edges = [lo] + [p for p in self.breakpoints if lo < p < hi]
        finite_hi = hi if np.isfinite(hi) else max(edges[-1], self.upper(1e-6))
        edges.append(finite_hi)
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            if b > a:
                total += integrate.quad(lambda v: fn(v) * self.density(v), a, b,
                                        epsabs=config.QUAD_EPSABS, epsrel=config.QUAD_EPSREL,
                                        limit=config.QUAD_LIMIT)[0]
        if not np.isfinite(hi):
            total += integrate.quad(lambda v: fn(v) * self.density(v), finite_hi, np.inf,
                                    epsabs=config.QUAD_EPSABS, epsrel=config.QUAD_EPSREL,
                                    limit=config.QUAD_LIMIT)[0]
        return total

    def laplace(self, s):
        if self.weight == 0:
            return _scalar(np.zeros_like(np.asarray(s, dtype=float)))
        censor = self._exponential_censor()
        G = self.contact
        if censor is not None:
            q0, q1, rate = censor
            s = np.asarray(s, dtype=float)
            value = q0 * np.asarray(G.laplace(s)) + (q1 * np.asarray(G.laplace(s + rate)) if q1 else 0.0)
            return _scalar(self.weight * value)
        if type(self.period) is PointMass:
            at = self.period.at
            s = np.asarray(s, dtype=float)
            return _scalar(self.weight * (np.asarray(G.laplace(s)) - np.exp(-s * at) * np.asarray(G.tail(at, s))))
        return _scalar(np.vectorize(lambda x: self._quad(lambda v: np.exp(-x * v)))(s))

    def laplace_moment(self, s):
        """int v e^{-sv} kappa(dv), i.e. minus the derivative of laplace."""
        if self.weight == 0:
            return _scalar(np.zeros_like(np.asarray(s, dtype=float)))
        censor = self._exponential_censor()
        G = self.contact
        if censor is not None:
            q0, q1, rate = censor
            s = np.asarray(s, dtype=float)
            value = q0 * np.asarray(G.laplace_moment(s))
            if q1:
                value = value + q1 * np.asarray(G.laplace_moment(s + rate))
            return _scalar(self.weight * value)
        return _scalar(np.vectorize(lambda x: self._quad(lambda v: v * np.exp(-x * v)))(s))

    def tail(self, s, theta=0.0):
        """int_{(s, inf)} e^{-theta (v - s)} kappa(dv), vectorized in s."""
        s = np.asarray(s, dtype=float)
        if self.weight == 0:
            return _scalar(np.zeros_like(s))
        censor = self._exponential_censor()
        G = self.contact
        if censor is not None:
            q0, q1, rate = censor
            value = q0 * np.asarray(G.tail(s, theta)) if q0 else 0.0
            if q1:
                value = value + q1 * np.exp(-rate * s) * np.asarray(G.tail(s, theta + rate))
            return _scalar(self.weight * value)
        if type(self.period) is PointMass:
            at = self.period.at
            inside = np.asarray(G.tail(s, theta)) - np.exp(-theta * (at - s)) * np.asarray(G.tail(at, theta))
            return _scalar(self.weight * np.where(s < at, inside, 0.0))
        return _scalar(self._tail_table(theta)(s))

    def _tail_table(self, theta):
        """Interpolated tail transform for kernels without a closed form."""
        top = self.upper()
        grid = np.unique(np.concatenate([np.linspace(0.0, top, config.TAIL_TABLE_POINTS),
                                         np.asarray(self.breakpoints)]))
        grid = grid[grid <= top]
        # integrate e^{-theta v} density backwards from the truncation point
        nodes, weights = np.polynomial.legendre.leggauss(config.GAUSS_NODES)
        a, b = grid[:-1], grid[1:]
        half = (b - a)[:, None] / 2.0
        v = (a + b)[:, None] / 2.0 + half * nodes[None, :]
        pieces = (half * weights[None, :] * np.exp(-theta * v) * self.density(v)).sum(axis=1)
        upper_part = np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]])
        values = np.exp(theta * grid) * upper_part
        return lambda x: np.interp(x, grid, values, right=0.0)


def forward_kernels(spec: ModelSpec) -> list[list[Kernel]]:
    """kernels[l][k]: mean measure of type-k births by a type-l individual, by age."""
    if isinstance(spec, MarkovSIR):
        return [[Kernel(spec.beta / spec.gamma, spec.contact_time)]]
    if isinstance(spec, CountTimes):
        return [[Kernel(spec.offspring.mean, spec.times)]]
    if isinstance(spec, ReedFrost):
        return [[Kernel(spec.mu, spec.contact_time)]]
    if isinstance(spec, Multitype):
        mu = spec.mean_matrix
        return [[Kernel(mu[l, k], spec.times[l][k]) for k in range(spec.n_types)]
                for l in range(spec.n_types)]
    if isinstance(spec, Configuration):
        deg, biased = spec.degrees, spec.size_biased
        return [[Kernel((deg[l] - 1) * biased[k], spec.contact_between(l, k), spec.period_of(l))
                 for k in range(spec.n_types)] for l in range(spec.n_types)]
    raise ValueError(f"unsupported spec {type(spec).__name__}")


def backward_kernels(spec: ModelSpec) -> list[list[Kernel]]:
    """kernels[l][k]: mean measure of type-k children of a type-l individual, backward in time."""
    if isinstance(spec, SINGLE_TYPE):
        return forward_kernels(spec)
    if isinstance(spec, Multitype):
        mu = spec.mean_matrix
        return [[Kernel(mu[k, l], spec.times[k][l]) for k in range(spec.n_types)]
                for l in range(spec.n_types)]
    if isinstance(spec, Configuration):
        deg, biased = spec.degrees, spec.size_biased
        return [[Kernel((deg[l] - 1) * biased[k], spec.contact_between(k, l), spec.period_of(k))
                 for k in range(spec.n_types)] for l in range(spec.n_types)]
    raise ValueError(f"unsupported spec {type(spec).__name__}")


def relative_intensity_laplace(spec: ModelSpec, s: float):
    """int e^{-st} G(dt) for G = mu^{-1} E xi(dt).

    Single-type specs give a scalar; multitype specs the matrix of G_lk
    transforms; configuration specs the matrix U_lk(s) of censored transforms.
    """
    if s < 0:
        raise ValueError(f"s must be nonnegative, got {s}")
    if isinstance(spec, SINGLE_TYPE):
        return float(spec.contact_time.laplace(s))
    if isinstance(spec, Multitype):
        d = spec.n_types
        return np.array([[spec.times[l][k].laplace(s) for k in range(d)] for l in range(d)])
    if isinstance(spec, Configuration):
        d = spec.n_types
        return np.array([[Kernel(1.0, spec.contact_between(l, k), spec.period_of(l)).laplace(s)
                          for k in range(d)] for l in range(d)])
    raise ValueError(f"unsupported spec {type(spec).__name__}")


def _period_expectation(period: TimeDistribution, fn) -> float:
    """E fn(T) for an infectious period T, fn vectorized, fn(inf) for the defect."""
    defect = 1.0 - period.total_mass
    base = period.base if isinstance(period, Defective) else period
    if isinstance(base, PointMass):
        proper = float(fn(np.asarray(base.at)))
    else:
        lo, hi = base.support
        proper = integrate.quad(lambda t: fn(np.asarray(t)) * base.pdf(t), lo, hi,
                                epsabs=config.QUAD_EPSABS, epsrel=config.QUAD_EPSREL,
                                limit=config.QUAD_LIMIT)[0]
    tail = defect * float(fn(np.asarray(np.inf))) if defect > 0 else 0.0
    return period.total_mass * proper + tail


def moments(spec: ModelSpec):
    """(mean, second moment) of the contact count, per type pair where applicable."""
    if isinstance(spec, MarkovSIR):
        law = spec.offspring
        return law.mean, law.second_moment
    if isinstance(spec, CountTimes):
        return spec.offspring.mean, spec.offspring.second_moment
    if isinstance(spec, ReedFrost):
        return spec.mu, spec.mu ** 2 + spec.mu
    if isinstance(spec, Multitype):
        mu = spec.mean_matrix
        return mu, mu ** 2 + mu
    if isinstance(spec, Configuration):
        d = spec.n_types
        mean = np.zeros((d, d))
        second = np.zeros((d, d))
        for l in range(d):
            slots = spec.degrees[l] - 1
            for k in range(d):
                G = spec.contact_between(l, k)
                b = spec.size_biased[k]
                # per-slot success probability given the period T is b * G(T)
                p1 = _period_expectation(spec.period_of(l), lambda t: b * np.asarray(G.cdf(t)))
                p2 = _period_expectation(spec.period_of(l), lambda t: (b * np.asarray(G.cdf(t))) ** 2)
                mean[l, k] = slots * p1
                second[l, k] = slots * p1 + slots * (slots - 1) * p2
        return mean, second
    raise ValueError(f"unsupported spec {type(spec).__name__}")
