"""Attributing route structures to their causes and tabulating the result.

A structure that a classic trace shows but a flow-stable (paris) trace does
not is put down to per-flow load balancing.  What survives is examined with
the paris traces' metadata, in this order: zero-TTL forwarding (loops),
interrupted routes, fake addresses, routing cycles (cycles).  Anything left
is ``unknown``.
"""

from __future__ import annotations

import csv
import enum
import io
from collections.abc import Iterable
from dataclasses import dataclass, field

from . import wire
from .structures import (
    CycleSignature,
    LoopSignature,
    aggregate_cycles,
    aggregate_loops,
    cycle_instances_by_signature,
    find_diamonds,
    find_periodic_cycles,
    loop_instances_by_signature,
)
from .tracestore import Dataset, MeasuredRoute, as_dataset

IP_ID_WINDOW = 1024
_UNREACH_TYPES = frozenset({wire.ICMP_UNREACH, wire.ICMP_SOURCE_QUENCH})


class Cause(str, enum.Enum):
    PER_FLOW = "per_flow_load_balancing"
    ZERO_TTL = "zero_ttl_forwarding"
    ROUTING_CYCLE = "routing_cycle"
    INTERRUPTED = "interrupted_route"
    FAKE = "fake_address"
    UNKNOWN = "unknown"


class Kind(str, enum.Enum):
    LOOP_SIGNATURES = "loop_signatures"
    LOOP_INSTANCES = "loop_instances"
    CYCLE_SIGNATURES = "cycle_signatures"
    CYCLE_INSTANCES = "cycle_instances"
    GLOBAL_DIAMONDS = "global_diamonds"
    ONE_DEST_DIAMONDS = "one_destination_diamonds"


KIND_LABELS = {
    Kind.LOOP_SIGNATURES: "Loop sign.",
    Kind.LOOP_INSTANCES: "Loop inst.",
    Kind.CYCLE_SIGNATURES: "Cycle sign.",
    Kind.CYCLE_INSTANCES: "Cycle inst.",
    Kind.GLOBAL_DIAMONDS: "Global diam.",
    Kind.ONE_DEST_DIAMONDS: "One-dest. diam.",
}

CAUSE_LABELS = {
    Cause.PER_FLOW: "Per-flow load balancing",
    Cause.ZERO_TTL: "Zero-TTL forwarding",
    Cause.ROUTING_CYCLE: "Routing cycle",
    Cause.INTERRUPTED: "Interrupted route",
    Cause.FAKE: "Fake address",
    Cause.UNKNOWN: "Unknown",
}

_LOOPS = {Kind.LOOP_SIGNATURES, Kind.LOOP_INSTANCES}
_CYCLES = {Kind.CYCLE_SIGNATURES, Kind.CYCLE_INSTANCES}
APPLICABLE: dict[Cause, frozenset[Kind]] = {
    Cause.PER_FLOW: frozenset(Kind),
    Cause.ZERO_TTL: frozenset(_LOOPS),
    Cause.ROUTING_CYCLE: frozenset(_CYCLES),
    Cause.INTERRUPTED: frozenset(_LOOPS | _CYCLES),
    Cause.FAKE: frozenset(_LOOPS | _CYCLES),
    Cause.UNKNOWN: frozenset(Kind),
}


class DestinationMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    result: bool
    undecidable: bool = False

    def __bool__(self) -> bool:
        return self.result


class CycleEvidence(str, enum.Enum):
    CONFIRMED = "confirmed"
    COUNTER_UNAVAILABLE = "counter_unavailable"
    REFUTED = "refuted"


Signature = LoopSignature | CycleSignature


@dataclass
class InstanceIndex:
    """Loop and cycle instances of one dataset, computed once."""

    loops: dict
    cycles: dict

    @classmethod
    def of(cls, dataset: Dataset) -> InstanceIndex:
        return cls(loop_instances_by_signature(dataset), cycle_instances_by_signature(dataset))


Source = "Dataset | InstanceIndex | Iterable[MeasuredRoute]"


def _occurrences(sig: Signature, dataset: Source) -> list[tuple[MeasuredRoute, list[int]]]:
    """Each instance of a signature as (route, hop indices of the repeated address).

    For a loop that is the run itself; for a cycle, every position of r in the
    r-cyclic route.
    """
    index = dataset
    if not isinstance(index, InstanceIndex):
        index = InstanceIndex.of(as_dataset(dataset))
    if isinstance(sig, LoopSignature):
        found = index.loops.get(sig.key, [])
        return [(r, list(range(i.start, i.start + i.n + 1))) for r, i in found]
    found = index.cycles.get(sig.key, [])
    return [(r, sorted({p.i for p in ps} | {p.j for p in ps})) for r, ps in found]


# -- classifiers -------------------------------------------------------------


def classify_zero_ttl(sig: LoopSignature, dataset: Source) -> Verdict:
    """First hop of some run quotes probe TTL 0 and the next quotes 1."""
    decidable = False
    for route, pos in _occurrences(sig, dataset):
        a, b = route.hops[pos[0]].probe_ttl, route.hops[pos[1]].probe_ttl
        if a is None or b is None:
            continue
        decidable = True
        if a == 0 and b == 1:
            return Verdict(True)
    return Verdict(False, undecidable=not decidable)


def _last_answered(route: MeasuredRoute) -> int | None:
    for idx in range(len(route.hops) - 1, -1, -1):
        if route.hops[idx].addr is not None:
            return idx
    return None


def classify_interrupted(sig: Signature, dataset: Source) -> Verdict:
    """Later occurrence of r ends the route with an unreachable-class error."""
    for route, pos in _occurrences(sig, dataset):
        last = _last_answered(route)
        if pos[-1] == last and route.hops[last].icmp_type in _UNREACH_TYPES:
            return Verdict(True)
    return Verdict(False)


def fake_instance(route: MeasuredRoute, positions: list[int]) -> bool | None:
    """Response TTLs of one instance: True when strictly decreasing, None when absent."""
    ttls = [route.hops[i].response_ttl for i in positions]
    if any(t is None for t in ttls):
        return None
    return all(x > y for x, y in zip(ttls, ttls[1:]))


def classify_fake(sig: Signature, dataset: Source) -> Verdict:
    """Response TTLs differ in every instance and strictly decrease in at least one."""
    decreasing = False
    seen = False
    for route, pos in _occurrences(sig, dataset):
        ttls = [route.hops[i].response_ttl for i in pos]
        if any(t is None for t in ttls):
            return Verdict(False, undecidable=True)
        seen = True
        if len(set(ttls)) == 1:
            return Verdict(False)
        decreasing = decreasing or bool(fake_instance(route, pos))
    return Verdict(seen and decreasing, undecidable=not seen)


def verify_routing_cycle(
    sig: CycleSignature,
    dataset: Source,
    window: int = IP_ID_WINDOW,
) -> CycleEvidence:
    """Same-router evidence from the IP IDs of r's occurrences.

    A responder is in counter mode in an instance when its IP IDs there are
    neither constant nor all zero.  Occurrences then confirm the cycle when each
    forward distance modulo 2**16 is in (0, window].
    """
    confirmed = False
    for route, pos in _occurrences(sig, dataset):
        ids = [route.hops[i].ip_id for i in pos]
        if any(x is None for x in ids) or len(set(ids)) == 1:
            continue
        if all(0 < (b - a) % 0x10000 <= window for a, b in zip(ids, ids[1:])):
            confirmed = True
        else:
            return CycleEvidence.REFUTED
    return CycleEvidence.CONFIRMED if confirmed else CycleEvidence.COUNTER_UNAVAILABLE


def _in_periodic_cycle(sig: CycleSignature, dataset: Dataset | InstanceIndex) -> bool:
    for route, _ in _occurrences(sig, dataset):
        if any(sig.addr in pc.block for pc in find_periodic_cycles(route)):
            return True
    return False


def classify_loop(sig: LoopSignature, paris: Dataset | InstanceIndex) -> Cause:
    if classify_zero_ttl(sig, paris):
        return Cause.ZERO_TTL
    if classify_interrupted(sig, paris):
        return Cause.INTERRUPTED
    if classify_fake(sig, paris):
        return Cause.FAKE
    return Cause.UNKNOWN


def classify_cycle(sig: CycleSignature, paris: Source, window: int = IP_ID_WINDOW) -> Cause:
    if classify_interrupted(sig, paris):
        return Cause.INTERRUPTED
    if classify_fake(sig, paris):
        return Cause.FAKE
    evidence = verify_routing_cycle(sig, paris, window)
    if evidence is CycleEvidence.CONFIRMED:
        return Cause.ROUTING_CYCLE
    if evidence is CycleEvidence.COUNTER_UNAVAILABLE and _in_periodic_cycle(sig, paris):
        return Cause.ROUTING_CYCLE
    return Cause.UNKNOWN


# -- differential comparison ---------------------------------------------------


@dataclass(frozen=True)
class KindComparison:
    classic_total: int
    paris_total: int
    disappeared: int
    appeared: int

    @property
    def disappeared_fraction(self) -> float:
        return self.disappeared / self.classic_total if self.classic_total else 0.0

    @property
    def appeared_fraction(self) -> float:
        return self.appeared / self.classic_total if self.classic_total else 0.0


@dataclass
class ComparisonReport:
    kinds: dict[Kind, KindComparison]
    disappeared: dict[Kind, list] = field(default_factory=dict)

    def __getitem__(self, kind: Kind | str) -> KindComparison:
        return self.kinds[Kind(kind)]


@dataclass
class _Structures:
    loops: dict
    cycles: dict
    loop_instances: dict
    cycle_instances: dict
    global_diamonds: set
    one_dest_diamonds: set


def _structures(ds: Dataset) -> _Structures:
    diamonds = find_diamonds(ds)
    return _Structures(
        loops={s.key: s for s in aggregate_loops(ds)},
        cycles={s.key: s for s in aggregate_cycles(ds)},
        loop_instances={k: len(v) for k, v in loop_instances_by_signature(ds).items()},
        cycle_instances={k: len(v) for k, v in cycle_instances_by_signature(ds).items()},
        global_diamonds={d.key for d in diamonds},
        one_dest_diamonds={d.key for d in diamonds if d.is_one_destination},
    )


def _check_destinations(classic: Dataset, paris: Dataset) -> None:
    a, b = set(classic.destinations), set(paris.destinations)
    if a != b:
        raise DestinationMismatch(
            f"destination lists differ: {len(a - b)} only in classic, {len(b - a)} only in paris"
        )


def _kind_sets(s: _Structures) -> dict[Kind, dict]:
    """Per kind: structure key -> weight (instances count for instance kinds)."""
    return {
        Kind.LOOP_SIGNATURES: dict.fromkeys(s.loops, 1),
        Kind.LOOP_INSTANCES: s.loop_instances,
        Kind.CYCLE_SIGNATURES: dict.fromkeys(s.cycles, 1),
        Kind.CYCLE_INSTANCES: s.cycle_instances,
        Kind.GLOBAL_DIAMONDS: dict.fromkeys(s.global_diamonds, 1),
        Kind.ONE_DEST_DIAMONDS: dict.fromkeys(s.one_dest_diamonds, 1),
    }


def compare_datasets(
    classic: Dataset | Iterable[MeasuredRoute],
    paris: Dataset | Iterable[MeasuredRoute],
) -> ComparisonReport:
    """Structures present in one dataset and absent from the other.

    Identity is (r, d) for loops and cycles and (h, t) for diamonds; an
    instance counts as disappeared when its signature did.  Fractions are over
    the classic totals.
    """
    classic, paris = as_dataset(classic), as_dataset(paris)
    _check_destinations(classic, paris)
    c, p = _kind_sets(_structures(classic)), _kind_sets(_structures(paris))
    kinds, gone = {}, {}
    for kind in Kind:
        gone_keys = sorted(set(c[kind]) - set(p[kind]))
        new_keys = set(p[kind]) - set(c[kind])
        kinds[kind] = KindComparison(
            classic_total=sum(c[kind].values()),
            paris_total=sum(p[kind].values()),
            disappeared=sum(c[kind][k] for k in gone_keys),
            appeared=sum(p[kind][k] for k in new_keys),
        )
        gone[kind] = gone_keys
    return ComparisonReport(kinds, gone)


# -- classification and summary ------------------------------------------------


@dataclass
class Classified:
    """Every structure of either dataset with its cause and weight per kind."""

    labels: dict[Kind, dict[tuple, Cause]]
    weights: dict[Kind, dict[tuple, int]]

    def count(self, kind: Kind, cause: Cause) -> int:
        w = self.weights[kind]
        return sum(w[k] for k, c in self.labels[kind].items() if c is cause)

    def total(self, kind: Kind) -> int:
        return sum(self.weights[kind].values())


def classify(
    classic: Dataset | Iterable[MeasuredRoute],
    paris: Dataset | Iterable[MeasuredRoute],
    *,
    window: int = IP_ID_WINDOW,
) -> Classified:
    """Label each structure of the union of both datasets with exactly one cause.

    Classic-only structures are per-flow artifacts, weighted by their classic
    instances.  The rest are judged on the paris dataset and weighted by their
    paris instances.
    """
    classic, paris = as_dataset(classic), as_dataset(paris)
    _check_destinations(classic, paris)
    cs, ps = _structures(classic), _structures(paris)
    c, p = _kind_sets(cs), _kind_sets(ps)
    index = InstanceIndex.of(paris)
    loop_cause = {k: classify_loop(s, index) for k, s in ps.loops.items()}
    cycle_cause = {k: classify_cycle(s, index, window) for k, s in ps.cycles.items()}
    labels: dict[Kind, dict] = {}
    weights: dict[Kind, dict] = {}
    for kind in Kind:
        lab, wt = {}, {}
        for key in sorted(set(c[kind]) | set(p[kind])):
            if key not in p[kind]:
                lab[key], wt[key] = Cause.PER_FLOW, c[kind][key]
                continue
            wt[key] = p[kind][key]
            if kind in _LOOPS:
                lab[key] = loop_cause[key]
            elif kind in _CYCLES:
                lab[key] = cycle_cause[key]
            else:
                lab[key] = Cause.UNKNOWN
        labels[kind], weights[kind] = lab, wt
    return Classified(labels, weights)


@dataclass
class SummaryTable:
    """Percentages per (cause, kind); None where the cause cannot apply."""

    cells: dict[Cause, dict[Kind, float | None]]
    totals: dict[Kind, int]

    @property
    def empty(self) -> bool:
        return not any(self.totals.values())

    def _cell(self, cause: Cause, kind: Kind) -> str:
        v = self.cells[cause][kind]
        if v is None:
            return "-"
        if not self.totals[kind]:
            return "n/a"
        return f"{v:.1f}"

    def to_text(self) -> str:
        if self.empty:
            return "no structures\n"
        head = ["Cause"] + [KIND_LABELS[k] for k in Kind]
        rows = [[CAUSE_LABELS[c]] + [self._cell(c, k) for k in Kind] for c in Cause]
        rows.append(["Total (count)"] + [str(self.totals[k]) for k in Kind])
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]

        def fmt(r: list[str]) -> str:
            return "  ".join(
                r[i].ljust(widths[i]) if i == 0 else r[i].rjust(widths[i]) for i in range(len(r))
            ).rstrip()

        lines = [fmt(head), "  ".join("-" * w for w in widths), *map(fmt, rows)]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cause"] + [k.value for k in Kind])
        if not self.empty:
            for c in Cause:
                w.writerow([c.value] + [self._cell(c, k) for k in Kind])
            w.writerow(["total_count"] + [self.totals[k] for k in Kind])
        return buf.getvalue()


def summary_report(classified: Classified) -> SummaryTable:
    cells: dict[Cause, dict[Kind, float | None]] = {c: {} for c in Cause}
    totals = {k: classified.total(k) for k in Kind}
    for kind in Kind:
        for cause in Cause:
            if kind not in APPLICABLE[cause]:
                cells[cause][kind] = None
            elif totals[kind]:
                cells[cause][kind] = 100.0 * classified.count(kind, cause) / totals[kind]
            else:
                cells[cause][kind] = 0.0
    return SummaryTable(cells, totals)


def comparison_csv(report: ComparisonReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "classic_total", "paris_total", "disappeared", "appeared",
                "disappeared_fraction", "appeared_fraction"])
    for kind, kc in report.kinds.items():
        w.writerow([kind.value, kc.classic_total, kc.paris_total, kc.disappeared, kc.appeared,
                    f"{kc.disappeared_fraction:.6f}", f"{kc.appeared_fraction:.6f}"])
    return buf.getvalue()


def comparison_text(report: ComparisonReport) -> str:
    lines = [f"{'Kind':<26}{'classic':>9}{'paris':>9}{'disappeared':>14}{'appeared':>11}"]
    for kind, kc in report.kinds.items():
        lines.append(
            f"{KIND_LABELS[kind]:<26}{kc.classic_total:>9}{kc.paris_total:>9}"
            f"{100 * kc.disappeared_fraction:>13.1f}%{100 * kc.appeared_fraction:>10.1f}%"
        )
    return "\n".join(lines) + "\n"
