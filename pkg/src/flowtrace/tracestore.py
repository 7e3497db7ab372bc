"""Measured routes, their JSON-lines form, and per-destination grouping."""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .wire import FlowKey, Mode

STAR = None

_SLOT_FIELDS = ("addr", "rtt", "probe_ttl", "response_ttl", "ip_id", "icmp_type", "icmp_code")


class StopReason(str, enum.Enum):
    DESTINATION = "destination"
    OTHER_ICMP = "other_icmp"
    MAX_TTL = "max_ttl"
    STAR_GAP = "star_gap"


class MalformedLineError(ValueError):
    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno
        self.reason = reason


@dataclass(frozen=True)
class ProbeSlot:
    """One probe's outcome at a hop.  ``addr is None`` is a star."""

    addr: str | None = None
    rtt: int | None = None  # microseconds
    probe_ttl: int | None = None
    response_ttl: int | None = None
    ip_id: int | None = None
    icmp_type: int | None = None
    icmp_code: int | None = None

    def __post_init__(self) -> None:
        if self.addr is None and any(getattr(self, f) is not None for f in _SLOT_FIELDS[1:]):
            raise ValueError("a star carries no response metadata")

    @property
    def is_star(self) -> bool:
        return self.addr is None

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in _SLOT_FIELDS}


@dataclass(frozen=True)
class HopRecord:
    """All probe slots sent with one TTL.  Attribute access reads the first slot."""

    ttl: int
    slots: tuple[ProbeSlot, ...] = (ProbeSlot(),)

    def __post_init__(self) -> None:
        if not self.slots:
            raise ValueError("a hop has at least one probe slot")

    @classmethod
    def single(cls, ttl: int, **kw) -> HopRecord:
        return cls(ttl, (ProbeSlot(**kw),))

    @property
    def first(self) -> ProbeSlot:
        return self.slots[0]

    @property
    def addr(self) -> str | None:
        return self.first.addr

    @property
    def rtt(self) -> int | None:
        return self.first.rtt

    @property
    def probe_ttl(self) -> int | None:
        return self.first.probe_ttl

    @property
    def response_ttl(self) -> int | None:
        return self.first.response_ttl

    @property
    def ip_id(self) -> int | None:
        return self.first.ip_id

    @property
    def icmp_type(self) -> int | None:
        return self.first.icmp_type

    @property
    def icmp_code(self) -> int | None:
        return self.first.icmp_code

    @property
    def all_stars(self) -> bool:
        return all(s.is_star for s in self.slots)


@dataclass(frozen=True)
class MeasuredRoute:
    tool: Mode
    destination: str
    hops: tuple[HopRecord, ...]
    round: int = 0
    started_at: int = 0  # microseconds, opaque ordering key
    flow: FlowKey | None = None
    stop_reason: StopReason = StopReason.DESTINATION
    source: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tool", Mode(self.tool))
        object.__setattr__(self, "stop_reason", StopReason(self.stop_reason))
        object.__setattr__(self, "hops", tuple(self.hops))
        for a, b in zip(self.hops, self.hops[1:]):
            if b.ttl != a.ttl + 1:
                raise ValueError(f"hops not contiguous: TTL {a.ttl} then {b.ttl}")

    @classmethod
    def from_addresses(
        cls,
        destination: str,
        addrs: Sequence[str | None],
        *,
        tool: Mode | str = Mode.PARIS,
        min_ttl: int = 1,
        **kw,
    ) -> MeasuredRoute:
        """Route with bare addresses (``None`` = star); handy for analysis and tests."""
        hops = tuple(HopRecord.single(min_ttl + i, addr=a) for i, a in enumerate(addrs))
        return cls(Mode(tool), destination, hops, **kw)

    @property
    def min_ttl(self) -> int:
        return self.hops[0].ttl if self.hops else 1

    @property
    def addresses(self) -> tuple[str | None, ...]:
        """Responder per probed TTL (first probe slot); the source is not included."""
        return tuple(h.addr for h in self.hops)

    @property
    def length(self) -> int:
        return self.hops[-1].ttl if self.hops else 0

    @property
    def probes_per_hop(self) -> int:
        return max((len(h.slots) for h in self.hops), default=1)

    def per_probe(self) -> list[MeasuredRoute]:
        """Split an n-probe route into n single-probe routes, one per slot index."""
        n = self.probes_per_hop
        if n == 1:
            return [self]
        out = []
        for k in range(n):
            hops = tuple(
                HopRecord(h.ttl, (h.slots[k] if k < len(h.slots) else ProbeSlot(),))
                for h in self.hops
            )
            out.append(
                MeasuredRoute(self.tool, self.destination, hops, self.round,
                              self.started_at, self.flow, self.stop_reason, self.source)
            )
        return out


# -- serialization -------------------------------------------------------------


def _hop_to_dict(h: HopRecord) -> dict:
    d = {"ttl": h.ttl, **h.first.to_dict()}
    if len(h.slots) > 1:
        d["slots"] = [s.to_dict() for s in h.slots]
    return d


def serialize_route(route: MeasuredRoute) -> str:
    obj = {
        "tool": route.tool.value,
        "destination": route.destination,
        "round": route.round,
        "started_at": route.started_at,
        "source": route.source,
        "flow": route.flow.to_dict() if route.flow else None,
        "stop_reason": route.stop_reason.value,
        "hops": [_hop_to_dict(h) for h in route.hops],
    }
    return json.dumps(obj, separators=(",", ":"))


def _slot(d: dict) -> ProbeSlot:
    return ProbeSlot(**{f: d.get(f) for f in _SLOT_FIELDS})


def deserialize_route(line: str, lineno: int = 1) -> MeasuredRoute:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedLineError(lineno, f"invalid JSON: {e.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedLineError(lineno, "expected a JSON object")
    try:
        hops = []
        for h in obj["hops"]:
            slots = tuple(_slot(s) for s in h["slots"]) if "slots" in h else (_slot(h),)
            hops.append(HopRecord(int(h["ttl"]), slots))
        flow = FlowKey.from_dict(obj["flow"]) if obj.get("flow") else None
        return MeasuredRoute(
            tool=Mode(obj["tool"]),
            destination=obj["destination"],
            hops=tuple(hops),
            round=int(obj.get("round", 0)),
            started_at=int(obj.get("started_at", 0)),
            flow=flow,
            stop_reason=StopReason(obj.get("stop_reason", "destination")),
            source=obj.get("source"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedLineError(lineno, str(e) or type(e).__name__) from None


def read_routes(path: str | Path) -> list[MeasuredRoute]:
    routes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                routes.append(deserialize_route(line, lineno))
    return routes


def iter_lines(routes: Iterable[MeasuredRoute]) -> Iterator[str]:
    for r in routes:
        yield serialize_route(r) + "\n"


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    """Routes grouped by (tool, destination), round order preserved within a group."""

    groups: dict[tuple[Mode, str], list[MeasuredRoute]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(g) for g in self.groups.values())

    def __iter__(self) -> Iterator[MeasuredRoute]:
        for g in self.groups.values():
            yield from g

    @property
    def tools(self) -> set[Mode]:
        return {t for t, _ in self.groups}

    @property
    def destinations(self) -> list[str]:
        seen = dict.fromkeys(d for _, d in self.groups)
        return list(seen)

    def routes_to(self, destination: str) -> list[MeasuredRoute]:
        out = []
        for (_t, d), g in self.groups.items():
            if d == destination:
                out.extend(g)
        return out

    def by_destination(self) -> dict[str, list[MeasuredRoute]]:
        return {d: self.routes_to(d) for d in self.destinations}

    def count_routes_containing(self, addr: str, destination: str) -> int:
        return sum(1 for r in self.routes_to(destination) if addr in r.addresses)

    def select(self, tool: Mode | str) -> Dataset:
        tool = Mode(tool)
        return Dataset({k: v for k, v in self.groups.items() if k[0] is tool})

    def expanded(self) -> Dataset:
        """Same dataset with multi-probe routes split into one route per probe slot."""
        return group_dataset(p for r in self for p in r.per_probe())


def group_dataset(routes: Iterable[MeasuredRoute]) -> Dataset:
    groups: dict[tuple[Mode, str], list[MeasuredRoute]] = defaultdict(list)
    for r in routes:
        groups[(r.tool, r.destination)].append(r)
    return Dataset(dict(groups))


def as_dataset(routes: Dataset | Iterable[MeasuredRoute]) -> Dataset:
    return routes if isinstance(routes, Dataset) else group_dataset(routes)


def subroutes(route: MeasuredRoute | Sequence, i: int, k: int) -> tuple:
    """The subroute (r_i, ..., r_{i+k}) of a route tuple (r_0, ..., r_l).

    For a MeasuredRoute, r_0 is the source address.
    """
    if isinstance(route, MeasuredRoute):
        seq = (route.source,) + route.addresses
    else:
        seq = tuple(route)
    if i < 0 or k < 0 or i + k > len(seq) - 1:
        raise IndexError(f"subroute ({i}, {k}) out of range for length {len(seq) - 1}")
    return tuple(seq[i:i + k + 1])
