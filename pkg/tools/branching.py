# tools/branching.py
"""
Forward and backward Crump-Mode-Jagers branching processes.

Realizations are event-driven (heap keyed by (time, insertion sequence));
limit variables W and W-hat are estimated with a vectorized generation sweep.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

import config
from models import (
    SINGLE_TYPE, Configuration, HistoryBatch, ModelSpec, Multitype, _configuration_batch,
    check_type, sample_histories,
)

logger = logging.getLogger(__name__)


class PopulationCapError(RuntimeError):
    """More births than config.POPULATION_CAP."""


# =============================================================================
# OFFSPRING DRAWS
# =============================================================================

def backward_histories(spec: ModelSpec, source_types, rng: np.random.Generator,
                       roots=False) -> HistoryBatch:
    """Children of individuals in the backward (susceptibility) process.

    Single-type parents have Po(mu) children with i.i.d. contact-time delays,
    multitype parents Po(mu_kl) type-k children with G_kl delays. Configuration
    children are drawn as forward, but each delay is censored by the child's
    own infectious period.
    """
    types = np.atleast_1d(np.asarray(source_types, dtype=np.int64))
    n = len(types)
    removal = np.full(n, np.inf)
    if n and (types.min() < 0 or types.max() >= spec.n_types):
        raise ValueError(f"invalid type index in {types.tolist()} for {spec.kind}")

    if isinstance(spec, SINGLE_TYPE):
        counts = rng.poisson(spec.offspring.mean, n)
        owners = np.repeat(np.arange(n), counts)
        times = spec.contact_time.sample(rng, int(counts.sum()))
        return HistoryBatch.assemble(n, owners, times, np.zeros_like(owners), removal)

    if isinstance(spec, Multitype):
        mu = spec.mean_matrix
        parts_o, parts_t, parts_k = [np.zeros(0, dtype=np.int64)], [np.zeros(0)], [np.zeros(0, dtype=np.int64)]
        for l in range(spec.n_types):
            idx = np.flatnonzero(types == l)
            if not len(idx):
                continue
            for k in range(spec.n_types):
                counts = rng.poisson(mu[k, l], size=len(idx))
                total = int(counts.sum())
                parts_o.append(np.repeat(idx, counts))
                parts_t.append(spec.times[k][l].sample(rng, total))
                parts_k.append(np.full(total, k, dtype=np.int64))
        return HistoryBatch.assemble(n, np.concatenate(parts_o), np.concatenate(parts_t),
                                     np.concatenate(parts_k), removal)

    if isinstance(spec, Configuration):
        def child_periods(owners, child, rng):
            period = np.empty(len(child))
            for k in range(spec.n_types):
                mask = child == k
                if mask.any():
                    period[mask] = spec.period_of(k).sample(rng, int(mask.sum()))
            return period

        slots = spec.degrees[types] - 1 + np.asarray(roots, dtype=np.int64)
        owners, times, child = _configuration_batch(
            spec, types, slots, rng, period_of=child_periods,
            contact_of=lambda parent, kid: spec.contact_between(kid, parent),
        )
        return HistoryBatch.assemble(n, owners, times, child, removal, candidates=slots)

    raise ValueError(f"unsupported spec {type(spec).__name__}")


def _drawer(direction: str) -> Callable:
    if direction == "forward":
        return sample_histories
    if direction == "backward":
        return backward_histories
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


class _HistoryPool:
    """Per-type blocks of pre-sampled histories, handed out one at a time."""

    def __init__(self, spec: ModelSpec, draw: Callable, rng: np.random.Generator):
        self.spec, self.draw, self.rng = spec, draw, rng
        self.blocks: dict[int, HistoryBatch] = {}
        self.cursor: dict[int, int] = {}

    def take(self, type_index: int) -> tuple[np.ndarray, np.ndarray]:
        batch = self.blocks.get(type_index)
        if batch is None or self.cursor[type_index] >= batch.size:
            batch = self.draw(self.spec, np.full(config.HISTORY_BLOCK, type_index), self.rng)
            self.blocks[type_index] = batch
            self.cursor[type_index] = 0
        i = self.cursor[type_index]
        self.cursor[type_index] = i + 1
        lo, hi = batch.offsets[i], batch.offsets[i + 1]
        return batch.times[lo:hi], batch.targets[lo:hi]


# =============================================================================
# REALIZATIONS
# =============================================================================

@dataclass
class BranchingRealization:
    """Births in time order plus the determined-but-unborn births at the stop."""

    birth_times: np.ndarray
    birth_types: np.ndarray
    parents: np.ndarray            # -1 for the root
    pending_times: np.ndarray
    pending_types: np.ndarray
    pending_parents: np.ndarray
    horizon: float
    direction: str = "forward"

    @property
    def size(self) -> int:
        return len(self.birth_times)

    @property
    def extinct(self) -> bool:
        return len(self.pending_times) == 0

    def births_by(self, t: float) -> int:
        return int(np.searchsorted(self.birth_times, t, side="right"))

    def type_fractions(self, n_types: int) -> np.ndarray:
        return np.bincount(self.birth_types, minlength=n_types) / self.size


def _simulate(spec: ModelSpec, direction: str, rng: np.random.Generator, initial_type: int,
              count: Optional[int], time: Optional[float], root_slots: bool) -> BranchingRealization:
    check_type(spec, initial_type)
    draw = _drawer(direction)
    pool = _HistoryPool(spec, draw, rng)
    seq = itertools.count()
    heap: list[tuple[float, int, int, int]] = []
    times, types, parents = [], [], []

    def give_birth(t, type_index, parent):
        index = len(times)
        if index >= config.POPULATION_CAP:
            raise PopulationCapError(f"more than {config.POPULATION_CAP} births in a {direction} run")
        times.append(t)
        types.append(type_index)
        parents.append(parent)
        if index == 0:
            root = draw(spec, [type_index], rng, roots=root_slots)
            delays, kids = root.times, root.targets
        else:
            delays, kids = pool.take(type_index)
        for delay, kid in zip(delays, kids):
            heapq.heappush(heap, (t + float(delay), next(seq), int(kid), index))

    give_birth(0.0, initial_type, -1)
    horizon = 0.0
    while heap:
        if count is not None and len(times) >= count:
            break
        if time is not None and heap[0][0] > time:
            break
        t, _, kid, parent = heapq.heappop(heap)
        give_birth(t, kid, parent)
        horizon = t
    if time is not None:
        horizon = time
    pending = sorted(heap)
    logger.debug(f"{direction} run: {len(times)} births, {len(pending)} pending at {horizon:.4g}")
    return BranchingRealization(
        birth_times=np.asarray(times, dtype=float),
        birth_types=np.asarray(types, dtype=np.int64),
        parents=np.asarray(parents, dtype=np.int64),
        pending_times=np.asarray([p[0] for p in pending], dtype=float),
        pending_types=np.asarray([p[2] for p in pending], dtype=np.int64),
        pending_parents=np.asarray([p[3] for p in pending], dtype=np.int64),
        horizon=float(horizon),
        direction=direction,
    )


def _check_stop(count, time):
    if (count is None) == (time is None):
        raise ValueError("give exactly one of count or time as the stop criterion")
    if count is not None and count <= 0:
        raise ValueError(f"stop count must be positive, got {count}")
    if time is not None and not time > 0:
        raise ValueError(f"stop time must be positive, got {time}")


def simulate_forward(spec: ModelSpec, rng: np.random.Generator, *, count: Optional[int] = None,
                     time: Optional[float] = None, initial_type: int = 0) -> BranchingRealization:
    """Exact forward process until `count` births or time `time`.

    A configuration root of degree l has l acquaintance slots, everyone else l - 1.
    """
    _check_stop(count, time)
    return _simulate(spec, "forward", rng, initial_type, count, time, root_slots=True)


def simulate_backward(spec: ModelSpec, time: float, rng: np.random.Generator, initial_type: int = 0,
                      typical_root: bool = False) -> BranchingRealization:
    """Exact backward process up to time `time`.

    With typical_root a configuration root has l - 1 slots like any other
    individual; by default it has l.
    """
    _check_stop(None, time)
    return _simulate(spec, "backward", rng, initial_type, None, time, root_slots=not typical_root)


def residual_and_age_laws(realization: BranchingRealization, t: float,
                          type_index: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """(V'(t), A(t)): residual delays of determined unborn births, ages of born individuals.

    With type_index both are restricted to individuals of that type.
    """
    if t < 0 or t > realization.horizon:
        raise ValueError(f"t = {t} outside [0, {realization.horizon}]")
    born = realization.birth_times <= t
    own = born if type_index is None else born & (realization.birth_types == type_index)
    ages = t - realization.birth_times[own]
    parent_born = lambda parents: (parents >= 0) & born[np.maximum(parents, 0)]
    scheduled = np.concatenate([realization.birth_times, realization.pending_times])
    parents = np.concatenate([realization.parents, realization.pending_parents])
    mask = parent_born(parents) & (scheduled > t)
    if type_index is not None:
        mask &= np.concatenate([realization.birth_types, realization.pending_types]) == type_index
    return scheduled[mask] - t, ages


# =============================================================================
# LIMIT VARIABLES
# =============================================================================

@dataclass(frozen=True)
class LimitSample:
    value: float       # e^{-lambda T} B(T), 0 if extinct by T
    horizon: float
    survived: bool
    births: int


def default_horizon(lam: float) -> float:
    return float(np.log(config.W_HORIZON_GROWTH) / lam)


def _sweep(spec: ModelSpec, draw: Callable, lam: float, horizon: float, n: int, rng: np.random.Generator,
           initial_type: int, root_slots: bool) -> list[LimitSample]:
    """Advance n independent realizations generation by generation up to the horizon."""
    births = np.ones(n, dtype=np.int64)
    pending = np.zeros(n, dtype=np.int64)
    sample = np.arange(n)
    born = np.zeros(n)
    types = np.full(n, initial_type, dtype=np.int64)
    first = True
    while len(sample):
        batch = draw(spec, types, rng, roots=root_slots if first else False)
        first = False
        owners = batch.owners
        kid_times = born[owners] + batch.times
        inside = kid_times <= horizon
        pending += np.bincount(sample[owners[~inside]], minlength=n)
        sample, born, types = sample[owners[inside]], kid_times[inside], batch.targets[inside]
        births += np.bincount(sample, minlength=n)
        if births.max() > config.POPULATION_CAP:
            raise PopulationCapError(f"more than {config.POPULATION_CAP} births before the horizon")
    scale = np.exp(-lam * horizon)
    return [LimitSample(float(b * scale) if p else 0.0, horizon, bool(p), int(b))
            for b, p in zip(births, pending)]


def sample_W(spec: ModelSpec, direction: str, lam: float, n_samples: int, rng: np.random.Generator,
             horizon: Optional[float] = None, initial_type: int = 0,
             typical_root: bool = False) -> list[LimitSample]:
    """Truncation estimates e^{-lambda T} B(T) of W (forward) or W-hat (backward).

    Runs that die after the horizon are counted as surviving; with
    e^{lambda T} >= 1e3 this bias is small and left uncorrected.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if n_samples <= 0:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    check_type(spec, initial_type)
    draw = _drawer(direction)
    horizon = default_horizon(lam) if horizon is None else float(horizon)
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if np.exp(lam * horizon) < config.W_HORIZON_GROWTH:
        logger.warning(f"horizon {horizon:.3g} gives growth {np.exp(lam * horizon):.3g} < {config.W_HORIZON_GROWTH:g}")
    root_slots = not (direction == "backward" and typical_root)
    chunks = [min(config.SWEEP_CHUNK, n_samples - lo) for lo in range(0, n_samples, config.SWEEP_CHUNK)]
    samples: list[LimitSample] = []
    for size, stream in zip(chunks, rng.spawn(len(chunks))):
        samples.extend(_sweep(spec, draw, lam, horizon, size, stream, initial_type, root_slots))
    logger.info(f"{direction} W: {n_samples} samples at horizon {horizon:.4g}, "
                f"{sum(s.survived for s in samples)} survived")
    return samples
