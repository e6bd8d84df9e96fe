# tools/epidemic.py
"""
Finite-population SIR simulators built from labelled infection histories.

Each infective draws an i.i.d. history and every contact hits a uniformly
chosen label; contacts on labels already infected are void. The
configuration simulator instead matches half-edges on the fly.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

import config
from models import (
    SINGLE_TYPE, Configuration, HistoryBatch, ModelSpec, Multitype, ReedFrost, sample_histories,
)

logger = logging.getLogger(__name__)


# =============================================================================
# TRAJECTORY
# =============================================================================

@dataclass
class Trajectory:
    """Infection events in time order; susceptible counts are derived on demand."""

    times: np.ndarray
    types: np.ndarray
    N: int
    N_by_type: np.ndarray
    clock: str = "continuous"      # or "generation"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) > self.N:
            raise ValueError("more infections than individuals")
        threshold = self.threshold
        self.tau_N = float(self.times[threshold - 1]) if len(self.times) >= threshold else math.inf
        self.major = math.isfinite(self.tau_N)

    @property
    def threshold(self) -> int:
        return max(1, math.isqrt(self.N))

    @property
    def n_types(self) -> int:
        return len(self.N_by_type)

    @property
    def infections(self) -> int:
        return len(self.times)

    def is_major(self, factor: int = 1) -> bool:
        return self.infections >= factor * self.threshold

    def susceptible(self, t, type_index: Optional[int] = None):
        """S_N(t) (or S_{N,l}(t)), counting infections at times <= t."""
        t = np.asarray(t, dtype=float)
        if type_index is None:
            return self.N - np.searchsorted(self.times, t, side="right")
        own = self.times[self.types == type_index]
        return self.N_by_type[type_index] - np.searchsorted(own, t, side="right")

    def final_fraction(self, type_index: Optional[int] = None) -> float:
        if type_index is None:
            return (self.N - self.infections) / self.N
        return float(self.N_by_type[type_index] - np.count_nonzero(self.types == type_index)) / self.N_by_type[type_index]

    def header(self) -> dict:
        info = {"N": self.N, "N_by_type": " ".join(str(int(n)) for n in self.N_by_type),
                "tau_N": repr(self.tau_N), "major": self.major, "clock": self.clock}
        info.update(self.diagnostics)
        return info

    def to_frame(self) -> pd.DataFrame:
        """One row per infection: time, type, cumulative infections, S_l after the event."""
        frame = pd.DataFrame({"time": self.times, "type": self.types + 1,
                              "cum_infections": np.arange(1, self.infections + 1)})
        for l in range(self.n_types):
            frame[f"S_{l + 1}"] = self.N_by_type[l] - np.cumsum(self.types == l)
        return frame


def split_counts(N: int, probs) -> np.ndarray:
    """Largest-remainder rounding: counts in {floor, ceil} of N p_l summing to N."""
    exact = N * np.asarray(probs, dtype=float)
    counts = np.floor(exact).astype(np.int64)
    short = N - int(counts.sum())
    if short:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


class _LabelPool:
    """Uniform labels in [0, size), drawn in blocks."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size, self.rng = size, rng
        self.block = np.zeros(0, dtype=np.int64)
        self.cursor = 0

    def take(self) -> int:
        if self.cursor >= len(self.block):
            self.block = self.rng.integers(0, self.size, config.LABEL_BLOCK)
            self.cursor = 0
        self.cursor += 1
        return int(self.block[self.cursor - 1])


class _HistoryBlocks:
    """Per-type blocks of pre-sampled infection histories."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec, self.rng = spec, rng
        self.blocks: dict[int, tuple[HistoryBatch, int]] = {}

    def take(self, type_index: int):
        batch, i = self.blocks.get(type_index, (None, 0))
        if batch is None or i >= batch.size:
            batch, i = sample_histories(self.spec, np.full(config.HISTORY_BLOCK, type_index), self.rng), 0
        self.blocks[type_index] = (batch, i + 1)
        lo, hi = batch.offsets[i], batch.offsets[i + 1]
        return batch.times[lo:hi], batch.targets[lo:hi]


# =============================================================================
# LABELLED CONSTRUCTION
# =============================================================================

def _labelled(spec: ModelSpec, sizes: np.ndarray, initial: list[tuple[int, int]], rng: np.random.Generator,
              distinct_targets: bool, stop_after: Optional[int] = None) -> Trajectory:
    """Shared engine for single-type and multitype epidemics.

    `initial` lists (type, label) pairs infected at time 0. With `stop_after`
    the run ends once that many infections have occurred.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    infected = [np.zeros(n, dtype=bool) for n in sizes]
    histories = _HistoryBlocks(spec, rng)
    labels = [_LabelPool(int(n), rng) for n in sizes]
    seq = itertools.count()
    heap: list[tuple[float, int, int, int]] = []
    times, types = [], []
    ghosts = 0

    def infect(t, k, label):
        infected[k][label] = True
        times.append(t)
        types.append(k)
        delays, targets = histories.take(k)
        if distinct_targets:
            for target, (delay, chosen) in _distinct(delays, targets, sizes, k, label, rng):
                heapq.heappush(heap, (t + float(delay), next(seq), target, chosen))
            return
        for delay, target in zip(delays, targets):
            heapq.heappush(heap, (t + float(delay), next(seq), int(target), labels[target].take()))

    for k, label in initial:
        infect(0.0, k, label)
    while heap and (stop_after is None or len(times) < stop_after):
        t, _, k, label = heapq.heappop(heap)
        if infected[k][label]:
            ghosts += 1
            continue
        infect(t, k, label)
    return Trajectory(np.asarray(times, dtype=float), np.asarray(types, dtype=np.int64), int(sizes.sum()),
                      sizes, diagnostics={"ghosts": ghosts, "stopped_early": bool(heap)})


def _distinct(delays, targets, sizes, own_type, own_label, rng):
    """Pair each contact with a label drawn without replacement, never the infective itself."""
    out = []
    for k in np.unique(targets):
        idx = np.flatnonzero(targets == k)
        pool = int(sizes[k]) - (1 if k == own_type else 0)
        if len(idx) > pool:
            raise ValueError(f"{len(idx)} distinct contacts requested among {pool} type-{k} individuals")
        chosen = rng.choice(pool, size=len(idx), replace=False)
        if k == own_type:
            chosen = np.where(chosen >= own_label, chosen + 1, chosen)
        out.extend((int(k), (delays[j], int(c))) for j, c in zip(idx, chosen))
    return out


def simulate_single(spec: ModelSpec, N: int, I0: int, rng: np.random.Generator,
                    distinct_targets: bool = False, stop_after: Optional[int] = None) -> Trajectory:
    """Single-type epidemic with labels 0..I0-1 infected at time 0."""
    if not isinstance(spec, SINGLE_TYPE) or isinstance(spec, ReedFrost):
        raise ValueError("simulate_single needs a MarkovSIR or CountTimes spec")
    if not 1 <= I0 < N:
        raise ValueError(f"need 1 <= I0 < N, got I0={I0}, N={N}")
    traj = _labelled(spec, np.array([N]), [(0, i) for i in range(I0)], rng, distinct_targets, stop_after)
    logger.debug(f"single-type run N={N}: {traj.infections} infections, major={traj.major}")
    return traj


def simulate_multitype(spec: Multitype, N: int, initial_type: int, rng: np.random.Generator,
                       distinct_targets: bool = False, stop_after: Optional[int] = None) -> Trajectory:
    """Multitype epidemic from one type-`initial_type` infective; type sizes by largest remainder."""
    if not isinstance(spec, Multitype):
        raise ValueError("simulate_multitype needs a Multitype spec")
    sizes = split_counts(N, spec.proportions)
    if not 0 <= initial_type < spec.n_types:
        raise ValueError(f"invalid type index {initial_type}")
    if sizes.min() < 1:
        raise ValueError(f"population N={N} too small for proportions {spec.proportions}")
    traj = _labelled(spec, sizes, [(initial_type, 0)], rng, distinct_targets, stop_after)
    logger.debug(f"multitype run N={N}: {traj.infections} infections, major={traj.major}")
    return traj


def simulate_reed_frost(mu: float, N: int, I0: int, rng: np.random.Generator,
                        stop_after: Optional[int] = None) -> Trajectory:
    """Chain-binomial Reed-Frost epidemic; event times are generation numbers."""
    if not mu > 1:
        raise ValueError(f"mu must exceed 1, got {mu}")
    if not 1 <= I0 < N:
        raise ValueError(f"need 1 <= I0 < N, got I0={I0}, N={N}")
    p = mu / N
    if p >= 1:
        raise ValueError(f"infection probability mu/N = {p} must be below 1")
    susceptible, active = N - I0, I0
    sizes = [I0]
    while active and susceptible and (stop_after is None or N - susceptible < stop_after):
        escape = (1.0 - p) ** active
        new = int(rng.binomial(susceptible, 1.0 - escape))
        susceptible -= new
        active = new
        sizes.append(new)
    times = np.repeat(np.arange(len(sizes), dtype=float), sizes)
    return Trajectory(times, np.zeros(len(times), dtype=np.int64), N, np.array([N]), clock="generation",
                      diagnostics={"stopped_early": bool(active and susceptible)})


def generation_sizes(traj: Trajectory) -> np.ndarray:
    """New infections per generation of a generation-clock trajectory."""
    if traj.clock != "generation":
        raise ValueError("generation sizes need a generation-clock trajectory")
    return np.bincount(traj.times.astype(np.int64))


# =============================================================================
# CONFIGURATION MODEL
# =============================================================================

def degree_counts(spec: Configuration, N: int) -> tuple[np.ndarray, bool]:
    """Class sizes with an even half-edge total; the flag marks a parity adjustment."""
    exact = N * spec.probs
    counts = split_counts(N, spec.probs)
    if int(np.dot(counts, spec.degrees)) % 2 == 0:
        return counts, False
    floor = np.floor(exact)
    order = np.argsort(-(exact - floor), kind="stable")
    raised = [a for a in order if counts[a] > floor[a]]
    lowered = [b for b in order if counts[b] == floor[b] and exact[b] > floor[b]]
    for a in raised:
        for b in lowered:
            if (spec.degrees[a] - spec.degrees[b]) % 2:
                counts[a] -= 1
                counts[b] += 1
                logger.debug(f"moved one vertex from degree {spec.degrees[a]} to {spec.degrees[b]} for parity")
                return counts, True
    raise ValueError(f"infeasible degree sequence for N={N}: odd half-edge total cannot be repaired")


class _StubPool:
    """Free half-edges; uniform draws and removals in O(1) by swap-with-last."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.stubs = np.arange(size, dtype=np.int64)
        self.where = np.arange(size, dtype=np.int64)
        self.free = size
        self.rng = rng
        self.block = np.zeros(0)
        self.cursor = 0

    def __contains__(self, stub: int) -> bool:
        return self.where[stub] < self.free

    def remove(self, stub: int) -> None:
        i, last = self.where[stub], self.stubs[self.free - 1]
        self.stubs[i], self.where[last] = last, i
        self.stubs[self.free - 1], self.where[stub] = stub, self.free - 1
        self.free -= 1

    def draw(self) -> int:
        """Remove and return a uniformly chosen free half-edge."""
        if self.cursor >= len(self.block):
            self.block = self.rng.random(config.LABEL_BLOCK)
            self.cursor = 0
        u = self.block[self.cursor]
        self.cursor += 1
        stub = int(self.stubs[min(int(u * self.free), self.free - 1)])
        self.remove(stub)
        return stub


def simulate_config(spec: Configuration, N: int, rng: np.random.Generator,
                    stop_after: Optional[int] = None) -> Trajectory:
    """Epidemic on a configuration graph whose half-edges are matched as infection spreads.

    The initial infective is a uniformly chosen vertex. Each infective draws
    its infectious period, then pairs its free half-edges one at a time with a
    uniform free half-edge, its own included, and schedules a contact along
    every edge that is not a self-loop.
    """
    if not isinstance(spec, Configuration):
        raise ValueError("simulate_config needs a Configuration spec")
    if N < 2:
        raise ValueError(f"N must be at least 2, got {N}")
    counts, adjusted = degree_counts(spec, N)
    vertex_class = np.repeat(np.arange(spec.n_types), counts)
    degree = spec.degrees[vertex_class]
    first_stub = np.concatenate([[0], np.cumsum(degree)])
    owner = np.repeat(np.arange(N), degree)
    infected = np.zeros(N, dtype=bool)
    pool = _StubPool(len(owner), rng)
    seq = itertools.count()
    heap: list[tuple[float, int, int]] = []
    times, types = [], []
    edges: set[tuple[int, int]] = set()
    self_loops = multi_edges = 0

    def infect(t, v):
        nonlocal self_loops, multi_edges
        infected[v] = True
        c = int(vertex_class[v])
        times.append(t)
        types.append(c)
        period = float(spec.period_of(c).sample(rng, 1)[0])
        partners = []
        for stub in range(first_stub[v], first_stub[v + 1]):
            if stub not in pool:
                continue
            pool.remove(stub)
            w = int(owner[pool.draw()])
            if w == v:
                self_loops += 1
                continue
            edge = (min(v, w), max(v, w))
            if edge in edges:
                multi_edges += 1
            edges.add(edge)
            partners.append(w)
        if not partners:
            return
        partners = np.asarray(partners)
        delays = np.empty(len(partners))
        partner_class = vertex_class[partners]
        for k in np.unique(partner_class):
            mask = partner_class == k
            delays[mask] = spec.contact_between(c, int(k)).sample(rng, int(mask.sum()))
        for w, delay in zip(partners, delays):
            if np.isfinite(delay) and delay <= period:
                heapq.heappush(heap, (t + float(delay), next(seq), int(w)))

    infect(0.0, int(rng.integers(N)))
    while heap and (stop_after is None or len(times) < stop_after):
        t, _, w = heapq.heappop(heap)
        if not infected[w]:
            infect(t, w)
    if self_loops or multi_edges:
        logger.debug(f"half-edge matching met {self_loops} self-loops and {multi_edges} multi-edges")
    diagnostics = {"self_loops": self_loops, "multi_edges": multi_edges, "degree_adjusted": adjusted,
                   "stopped_early": bool(heap)}
    return Trajectory(np.asarray(times, dtype=float), np.asarray(types, dtype=np.int64), N, counts,
                      diagnostics=diagnostics)


# =============================================================================
# ALIGNMENT
# =============================================================================

def align_curve(traj: Trajectory, lam: float, u_grid) -> np.ndarray:
    """S_{N,l}(tau_N + (log N / 2 + u) / lambda) / N_l on the grid, one row per type."""
    if not traj.major:
        raise ValueError("cannot align a minor outbreak (tau_N is infinite)")
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    t = traj.tau_N + (0.5 * math.log(traj.N) + np.asarray(u_grid, dtype=float)) / lam
    return np.vstack([traj.susceptible(t, l) / traj.N_by_type[l] for l in range(traj.n_types)])


def growth_rate(traj: Trajectory, lo: int = 10, hi: Optional[int] = None) -> float:
    """Slope of log cumulative infections against infection time, for counts in [lo, hi]."""
    hi = traj.threshold if hi is None else hi
    hi = min(hi, traj.infections)
    if hi - lo < 2:
        raise ValueError(f"too few infections ({traj.infections}) to fit a growth rate on [{lo}, {hi}]")
    k = np.arange(lo, hi + 1)
    slope, _ = np.polyfit(traj.times[k - 1], np.log(k), 1)
    return float(slope)


def simulate(spec: ModelSpec, N: int, rng: np.random.Generator, I0: int = 1,
             distinct_targets: bool = False, stop_after: Optional[int] = None) -> Trajectory:
    """Run the simulator matching the spec variant, optionally only up to `stop_after` infections.

    Multitype and configuration runs start from a single infective; the
    multitype index case has a type drawn from the type proportions.
    """
    if isinstance(spec, ReedFrost):
        return simulate_reed_frost(spec.mu, N, I0, rng, stop_after=stop_after)
    if isinstance(spec, SINGLE_TYPE):
        return simulate_single(spec, N, I0, rng, distinct_targets=distinct_targets, stop_after=stop_after)
    if I0 != 1:
        raise ValueError(f"{spec.kind} runs start from one infective, got I0={I0}")
    if isinstance(spec, Multitype):
        initial_type = int(rng.choice(spec.n_types, p=np.asarray(spec.proportions)))
        return simulate_multitype(spec, N, initial_type, rng, distinct_targets=distinct_targets,
                                  stop_after=stop_after)
    if isinstance(spec, Configuration):
        return simulate_config(spec, N, rng, stop_after=stop_after)
    raise ValueError(f"unsupported spec {type(spec).__name__}")
