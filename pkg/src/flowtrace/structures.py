"""Loops, cycles, periodic cycles and diamonds in measured routes.

Detectors work on the per-TTL responder sequence of a route (the first probe
slot of each hop; the source address is not part of it).  ``None`` marks a
star.  Aggregators take a Dataset (or any iterable of routes) and group by
destination.
"""

from __future__ import annotations

import enum
from collections import Counter, defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import NamedTuple

from .tracestore import Dataset, MeasuredRoute, as_dataset

PERSISTENCE_THRESHOLD = 0.95

Addr = str
Path = Sequence[Addr | None]


def _addrs(route: MeasuredRoute | Path) -> tuple:
    return route.addresses if isinstance(route, MeasuredRoute) else tuple(route)


# -- loops -------------------------------------------------------------------


class LoopInstance(NamedTuple):
    addr: Addr
    start: int
    n: int


class LoopClass(str, enum.Enum):
    PERSISTENT = "persistent"
    SYSTEMATIC = "systematic"
    OCCASIONAL = "occasional"
    OTHER = "other"


def find_loop_instances(route: MeasuredRoute | Path) -> list[LoopInstance]:
    """One instance per maximal run of two or more equal non-star addresses."""
    seq = _addrs(route)
    out = []
    i = 0
    while i < len(seq):
        j = i
        while j + 1 < len(seq) and seq[i] is not None and seq[j + 1] == seq[i]:
            j += 1
        if j > i:
            out.append(LoopInstance(seq[i], i, j - i))
        i = j + 1
    return out


def _loop_class(appearance: float, conditional: float, containing_loop: int) -> LoopClass:
    if appearance >= PERSISTENCE_THRESHOLD:
        return LoopClass.PERSISTENT
    if conditional == 1.0:
        return LoopClass.SYSTEMATIC
    if containing_loop == 1:
        return LoopClass.OCCASIONAL
    return LoopClass.OTHER


@dataclass(frozen=True)
class LoopSignature:
    addr: Addr
    destination: str
    instance_count: int
    max_length: int
    routes_to_d: int
    routes_containing_r: int
    routes_containing_loop: int

    @property
    def key(self) -> tuple[Addr, str]:
        return (self.addr, self.destination)

    @property
    def appearance_frequency(self) -> float:
        return self.routes_containing_loop / self.routes_to_d

    @property
    def conditional_appearance_frequency(self) -> float:
        return self.routes_containing_loop / self.routes_containing_r

    @property
    def loop_class(self) -> LoopClass:
        return _loop_class(
            self.appearance_frequency,
            self.conditional_appearance_frequency,
            self.routes_containing_loop,
        )


def loop_instances_by_signature(
    dataset: Dataset | Iterable[MeasuredRoute],
) -> dict[tuple[Addr, str], list[tuple[MeasuredRoute, LoopInstance]]]:
    out: dict = defaultdict(list)
    for route in as_dataset(dataset):
        for inst in find_loop_instances(route):
            out[(inst.addr, route.destination)].append((route, inst))
    return dict(out)


def aggregate_loops(dataset: Dataset | Iterable[MeasuredRoute]) -> list[LoopSignature]:
    out = []
    for dest, routes in as_dataset(dataset).by_destination().items():
        instances: dict[Addr, list[int]] = defaultdict(list)
        looped: Counter = Counter()
        containing: Counter = Counter()
        for route in routes:
            seq = route.addresses
            containing.update({a for a in seq if a is not None})
            found = find_loop_instances(seq)
            for inst in found:
                instances[inst.addr].append(inst.n)
            looped.update({inst.addr for inst in found})
        for addr in sorted(instances):
            ns = instances[addr]
            out.append(LoopSignature(addr, dest, len(ns), max(ns), len(routes),
                                     containing[addr], looped[addr]))
    return out


# -- cycles ------------------------------------------------------------------


class CyclePair(NamedTuple):
    addr: Addr
    i: int
    j: int

    @property
    def separation(self) -> int:
        return self.j - self.i


def find_cycle_pairs(route: MeasuredRoute | Path) -> list[CyclePair]:
    """Occurrence pairs (i, j) of one address with a distinct non-star address between."""
    seq = _addrs(route)
    positions: dict[Addr, list[int]] = defaultdict(list)
    for idx, a in enumerate(seq):
        if a is not None:
            positions[a].append(idx)
    out = []
    for addr, pos in positions.items():
        for x, i in enumerate(pos):
            for j in pos[x + 1:]:
                if j > i + 1 and any(b is not None and b != addr for b in seq[i + 1:j]):
                    out.append(CyclePair(addr, i, j))
    out.sort(key=lambda p: (p.i, p.j))
    return out


class PeriodicCycle(NamedTuple):
    block: tuple[Addr, ...]
    start: int
    repeats: int

    @property
    def period(self) -> int:
        return len(self.block)

    @property
    def end(self) -> int:
        """One past the last position of the repetition."""
        return self.start + self.length

    @property
    def length(self) -> int:
        return self.period * self.repeats


def minimal_period(seq: Sequence) -> int:
    n = len(seq)
    for p in range(1, n + 1):
        if all(seq[i] == seq[i + p] for i in range(n - p)):
            return p
    return n


def find_periodic_cycles(route: MeasuredRoute | Path) -> list[PeriodicCycle]:
    """Maximal repetitions of a block of k >= 2 addresses, repeated at least twice.

    Runs are star-free; the reported block has the run's minimal period, so a
    run of a single repeated address (a loop) is never reported.  ``repeats`` is
    the number of whole blocks in the run.
    """
    seq = _addrs(route)
    n = len(seq)
    out = []
    for k in range(2, n // 2 + 1):
        # same[i]: positions i and i + k hold the same non-star address
        same = [seq[i] is not None and seq[i] == seq[i + k] for i in range(n - k)]
        i = 0
        while i < len(same):
            if not same[i]:
                i += 1
                continue
            j = i
            while j + 1 < len(same) and same[j + 1]:
                j += 1
            run = seq[i:j + 1 + k]
            if len(run) >= 2 * k and minimal_period(run) == k:
                out.append(PeriodicCycle(tuple(run[:k]), i, len(run) // k))
            i = j + 1
    out.sort(key=lambda c: (c.start, c.period))
    return out


@dataclass(frozen=True)
class CycleSignature:
    addr: Addr
    destination: str
    instance_count: int
    length: int
    span: int
    routes_to_d: int
    routes_containing_r: int
    routes_containing_cycle: int
    periodic: tuple[int, tuple[Addr, ...], int] | None = None  # (period, block, max repeats)

    @property
    def key(self) -> tuple[Addr, str]:
        return (self.addr, self.destination)

    @property
    def appearance_frequency(self) -> float:
        return self.routes_containing_cycle / self.routes_to_d

    @property
    def conditional_appearance_frequency(self) -> float:
        return self.routes_containing_cycle / self.routes_containing_r


def cycle_instances_by_signature(
    dataset: Dataset | Iterable[MeasuredRoute],
) -> dict[tuple[Addr, str], list[tuple[MeasuredRoute, list[CyclePair]]]]:
    """r-cyclic routes per (r, d), each with its qualifying pairs on r."""
    out: dict = defaultdict(list)
    for route in as_dataset(dataset):
        by_addr: dict[Addr, list[CyclePair]] = defaultdict(list)
        for p in find_cycle_pairs(route):
            by_addr[p.addr].append(p)
        for addr, pairs in by_addr.items():
            out[(addr, route.destination)].append((route, pairs))
    return dict(out)


def aggregate_cycles(dataset: Dataset | Iterable[MeasuredRoute]) -> list[CycleSignature]:
    out = []
    for dest, routes in as_dataset(dataset).by_destination().items():
        seps: dict[Addr, list[int]] = defaultdict(list)
        cyclic: Counter = Counter()
        containing: Counter = Counter()
        periodic: dict[Addr, tuple[int, tuple, int]] = {}
        for route in routes:
            seq = route.addresses
            containing.update({a for a in seq if a is not None})
            pairs = find_cycle_pairs(seq)
            for p in pairs:
                seps[p.addr].append(p.separation)
            cyclic.update({p.addr for p in pairs})
            for pc in find_periodic_cycles(seq):
                for a in set(pc.block):
                    cur = periodic.get(a)
                    cand = (pc.period, pc.block, pc.repeats)
                    if cur is None or (cand[0], -cand[2]) < (cur[0], -cur[2]):
                        periodic[a] = cand
        for addr in sorted(seps):
            s = seps[addr]
            out.append(CycleSignature(addr, dest, cyclic[addr], min(s), max(s), len(routes),
                                      containing[addr], cyclic[addr], periodic.get(addr)))
    return out


# -- diamonds ----------------------------------------------------------------


@dataclass(frozen=True)
class DiamondRecord:
    head: Addr
    tail: Addr
    per_destination_cores: dict[str, frozenset[Addr]] = field(hash=False)

    @property
    def key(self) -> tuple[Addr, Addr]:
        return (self.head, self.tail)

    @property
    def global_core(self) -> frozenset[Addr]:
        return frozenset().union(*self.per_destination_cores.values())

    @property
    def global_size(self) -> int:
        return len(self.global_core)

    @property
    def d_diamond_sizes(self) -> dict[str, int]:
        return {d: len(c) for d, c in self.per_destination_cores.items() if len(c) >= 2}

    @property
    def one_destination_size(self) -> int:
        return max(self.d_diamond_sizes.values(), default=0)

    @property
    def is_global(self) -> bool:
        return self.global_size >= 2

    @property
    def is_one_destination(self) -> bool:
        return self.one_destination_size >= 2


def diamond_cores(
    dataset: Dataset | Iterable[MeasuredRoute],
) -> dict[tuple[Addr, Addr], dict[str, set[Addr]]]:
    """A_d(h, t) for every (h, t) seen with one non-star address between them."""
    cores: dict = defaultdict(lambda: defaultdict(set))
    for route in as_dataset(dataset):
        seq = route.addresses
        for h, m, t in zip(seq, seq[1:], seq[2:]):
            if h is not None and m is not None and t is not None:
                cores[(h, t)][route.destination].add(m)
    return cores


def find_diamonds(dataset: Dataset | Iterable[MeasuredRoute]) -> list[DiamondRecord]:
    """Global diamonds (|A_all| >= 2), each carrying its per-destination cores."""
    out = []
    for (h, t), per_dest in sorted(diamond_cores(dataset).items()):
        rec = DiamondRecord(h, t, {d: frozenset(c) for d, c in sorted(per_dest.items())})
        if rec.is_global:
            out.append(rec)
    return out


@dataclass(frozen=True)
class DiamondMembership:
    observed: int
    head: float
    core: float
    tail: float
    any: float


def diamond_membership(dataset: Dataset | Iterable[MeasuredRoute]) -> DiamondMembership:
    """Fraction of observed addresses that are a head, core member or tail of a global diamond."""
    ds = as_dataset(dataset)
    observed = {a for r in ds for a in r.addresses if a is not None}
    heads, cores, tails = set(), set(), set()
    for d in find_diamonds(ds):
        heads.add(d.head)
        tails.add(d.tail)
        cores |= d.global_core
    n = len(observed)

    def frac(s: set) -> float:
        return len(s & observed) / n if n else 0.0

    return DiamondMembership(n, frac(heads), frac(cores), frac(tails), frac(heads | cores | tails))


# -- summaries ---------------------------------------------------------------


def histogram(values: Iterable[int]) -> list[tuple[int, int]]:
    """Unit-width bins as sorted (value, count) pairs."""
    return sorted(Counter(values).items())


def fraction_of_routes_with_loop(dataset: Dataset | Iterable[MeasuredRoute]) -> float:
    ds = as_dataset(dataset)
    n = len(ds)
    return sum(1 for r in ds if find_loop_instances(r)) / n if n else 0.0


def fraction_of_routes_with_cycle(dataset: Dataset | Iterable[MeasuredRoute]) -> float:
    ds = as_dataset(dataset)
    n = len(ds)
    return sum(1 for r in ds if find_cycle_pairs(r)) / n if n else 0.0


# -- probabilities -----------------------------------------------------------


class Probability(NamedTuple):
    exact: Fraction
    value: float


def _prob(x: Fraction) -> Probability:
    return Probability(x, float(x))


def missing_router_probability(k: int, n: int) -> Probability:
    """Chance that n probes, each uniform over k routers, miss at least one router."""
    if k < 1 or n < 1:
        raise ValueError("k and n must be >= 1")
    surjections = sum((-1) ** j * comb(k, j) * (k - j) ** n for j in range(k + 1))
    return _prob(1 - Fraction(surjections, k ** n))


def identical_path_probability(branches: int, probes: int) -> Probability:
    """Chance that ``probes`` independent uniform choices over ``branches`` all agree."""
    if branches < 1 or probes < 1:
        raise ValueError("branches and probes must be >= 1")
    return _prob(Fraction(branches, branches ** probes))
