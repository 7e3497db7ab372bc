"""Deterministic IPv4 network simulator.

Routers forward probes hop by hop with TTL processing, pick next hops with
per-flow, per-packet or per-destination balancing, and can be given the
pathologies that distort traceroute output: zero-TTL forwarding, source
address masquerading, probabilistic unreachables and scheduled forwarding
changes.  The whole state is driven by the topology seed, so replaying the
same packets yields the same bytes back.

Topology documents are JSON, either one nested object::

    {"seed": 1,
     "source": {"address": "192.0.2.1", "first_hop": "R1:0"},
     "routers": [{"id": "R1",
                  "interfaces": [{"name": "0", "address": "10.0.0.1"}, ...],
                  "behavior": {...},
                  "forwarding": [{"prefix": "0.0.0.0/0", "next_hops": ["R2:0"],
                                  "policy": "per_flow"}]}],
     "hosts": [{"address": "203.0.113.1", "responds": true}],
     "links": [["R1:1", "R2:0"], ["R2:1", "203.0.113.1"]]}

or JSON lines, one element per line tagged with ``"kind"`` (``meta``,
``source``, ``router``, ``host``, ``link``).  Router interfaces are written
``ROUTER:NAME``; hosts are referenced by address.
"""

from __future__ import annotations

import enum
import heapq
import ipaddress
import json
import math
import random
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .wire import FlowKey, IPHeader, Protocol

MASK64 = (1 << 64) - 1
TICK = 0.010  # virtual seconds per injected packet

DEFAULT_FIELD_MASK = frozenset(FlowKey.FIELDS)


class TopologyError(ValueError):
    """Parse or validation failure; the message names the offending element."""


class ScheduleConflict(TopologyError):
    pass


def mix64(z: int) -> int:
    """SplitMix64 finalizer."""
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def hash_fields(seed: int, salt: int, values: list[int]) -> int:
    h = mix64((seed ^ salt) & MASK64)
    for v in values:
        h = mix64(h ^ (v & MASK64))
    return h


def _salt(name: str) -> int:
    return zlib.crc32(name.encode())


class Policy(str, enum.Enum):
    PER_FLOW = "per_flow"
    PER_PACKET = "per_packet"
    PER_DESTINATION = "per_destination"


@dataclass(frozen=True)
class Route:
    prefix: ipaddress.IPv4Network
    next_hops: tuple[str, ...] = ()
    policy: Policy = Policy.PER_FLOW
    field_mask: frozenset[str] = DEFAULT_FIELD_MASK
    blackhole: bool = False


@dataclass
class RouterBehavior:
    zero_ttl_bug: bool = False
    masquerade_as: str | None = None
    unreachable: tuple[float, int] | None = None  # (probability, ICMP code)
    ip_id_mode: str = "counter"
    ip_id_seed: int | None = None
    response_initial_ttl: int = 255
    responds: bool = True  # False: forwards but never emits ICMP


@dataclass
class Router:
    id: str
    interfaces: dict[str, str]
    behavior: RouterBehavior = field(default_factory=RouterBehavior)
    routes: list[Route] = field(default_factory=list)


@dataclass
class Host:
    address: str
    responds: bool = True
    initial_ttl: int = 64
    ip_id_mode: str = "counter"


@dataclass
class Topology:
    routers: dict[str, Router]
    hosts: dict[str, Host]
    links: list[tuple[str, str]]
    source_address: str
    first_hop: str
    seed: int = 0
    hop_latency: float = 0.001
    schedules: list[dict] = field(default_factory=list)  # applied by each Simulator

    def owner(self, address: str) -> str | None:
        """Router id (or host address) owning an address."""
        for r in self.routers.values():
            if address in r.interfaces.values():
                return r.id
        return address if address in self.hosts else None

    def neighbours(self, node: str) -> set[str]:
        """Routers/hosts directly linked to a router id or host address."""
        out = set()
        for a, b in self.links:
            na, nb = _node_of(a), _node_of(b)
            if na == node:
                out.add(nb)
            if nb == node:
                out.add(na)
        return out

    def linked(self, a: str, b: str) -> bool:
        return b in self.neighbours(a)

    def address_of(self, ref: str) -> str:
        if ":" in ref:
            rid, name = ref.split(":", 1)
            return self.routers[rid].interfaces[name]
        return ref


def _node_of(ref: str) -> str:
    return ref.split(":", 1)[0] if ":" in ref else ref


# -- loading -----------------------------------------------------------------


def _parse_route(entry: dict, where: str) -> Route:
    try:
        prefix = ipaddress.IPv4Network(entry.get("prefix", "0.0.0.0/0"))
    except ValueError as e:
        raise TopologyError(f"{where}: bad prefix: {e}") from None
    if entry.get("blackhole"):
        return Route(prefix, blackhole=True)
    hops = tuple(entry.get("next_hops", ()))
    if not hops:
        raise TopologyError(f"{where}: empty next-hop set for {prefix}")
    try:
        policy = Policy(entry.get("policy", "per_flow"))
    except ValueError:
        raise TopologyError(f"{where}: unknown policy {entry.get('policy')!r}") from None
    mask = frozenset(entry.get("field_mask", DEFAULT_FIELD_MASK))
    if policy is Policy.PER_FLOW:
        if not mask:
            raise TopologyError(f"{where}: empty field_mask")
        if bad := mask - DEFAULT_FIELD_MASK:
            raise TopologyError(f"{where}: unknown flow fields {sorted(bad)}")
    return Route(prefix, hops, policy, mask)


def _parse_behavior(d: dict, where: str) -> RouterBehavior:
    unreach = d.get("unreachable")
    if unreach is not None:
        p = float(unreach.get("probability", 1.0))
        if not 0.0 <= p <= 1.0:
            raise TopologyError(f"{where}: unreachable probability {p} outside [0, 1]")
        unreach = (p, int(unreach.get("code", wire.UNREACH_HOST)))
    ip_id = d.get("ip_id", {})
    mode = ip_id.get("mode", "counter")
    if mode not in ("counter", "constant_zero"):
        raise TopologyError(f"{where}: unknown ip_id mode {mode!r}")
    masq = d.get("masquerade_as")
    if masq is not None:
        try:
            ipaddress.IPv4Address(masq)
        except ValueError:
            raise TopologyError(f"{where}: masquerade_as {masq!r} is not IPv4") from None
    return RouterBehavior(
        zero_ttl_bug=bool(d.get("zero_ttl_bug", False)),
        masquerade_as=masq,
        unreachable=unreach,
        ip_id_mode=mode,
        ip_id_seed=ip_id.get("seed"),
        response_initial_ttl=int(d.get("response_initial_ttl", 255)),
        responds=bool(d.get("responds", True)),
    )


def _parse_document(text: str) -> dict:
    text = text.strip()
    try:
        doc = json.loads(text)
        if isinstance(doc, dict) and "kind" not in doc:
            return doc
        lines = [doc]
    except json.JSONDecodeError:
        try:
            lines = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
        except json.JSONDecodeError as e:
            raise TopologyError(f"parse error: {e}") from None
    doc: dict = {"routers": [], "hosts": [], "links": []}
    for obj in lines:
        kind = obj.get("kind") if isinstance(obj, dict) else None
        if kind == "router":
            doc["routers"].append(obj)
        elif kind == "host":
            doc["hosts"].append(obj)
        elif kind == "link":
            doc["links"].append(obj["ends"])
        elif kind == "source":
            doc["source"] = obj
        elif kind == "meta":
            doc.update({k: v for k, v in obj.items() if k != "kind"})
        else:
            raise TopologyError(f"parse error: unknown element kind {kind!r}")
    return doc


def load_topology(text: str | dict) -> Topology:
    doc = text if isinstance(text, dict) else _parse_document(text)
    try:
        return _build(doc)
    except (KeyError, TypeError) as e:
        raise TopologyError(f"parse error: missing or malformed field {e}") from None


def load_topology_file(path: str | Path) -> Topology:
    return load_topology(Path(path).read_text(encoding="utf-8"))


def _build(doc: dict) -> Topology:
    seen: dict[str, str] = {}

    def claim(addr: str, who: str) -> None:
        try:
            ipaddress.IPv4Address(addr)
        except ValueError:
            raise TopologyError(f"{who}: {addr!r} is not an IPv4 address") from None
        if addr in seen:
            raise TopologyError(f"duplicate address {addr} ({seen[addr]} and {who})")
        seen[addr] = who

    src = doc["source"]
    claim(src["address"], "source")
    routers: dict[str, Router] = {}
    for rd in doc["routers"]:
        rid = rd["id"]
        if rid in routers:
            raise TopologyError(f"duplicate router id {rid}")
        ifaces = rd["interfaces"]
        if isinstance(ifaces, list):
            ifaces = {i["name"]: i["address"] for i in ifaces}
        for name, addr in ifaces.items():
            claim(addr, f"{rid}:{name}")
        routers[rid] = Router(
            rid,
            dict(ifaces),
            _parse_behavior(rd.get("behavior", {}), f"router {rid}"),
            [_parse_route(e, f"router {rid}") for e in rd.get("forwarding", [])],
        )
    hosts: dict[str, Host] = {}
    for hd in doc.get("hosts", []):
        claim(hd["address"], f"host {hd['address']}")
        hosts[hd["address"]] = Host(
            hd["address"],
            bool(hd.get("responds", True)),
            int(hd.get("initial_ttl", 64)),
            hd.get("ip_id", {}).get("mode", "counter"),
        )
    topo = Topology(
        routers=routers,
        hosts=hosts,
        links=[tuple(l) for l in doc.get("links", [])],
        source_address=src["address"],
        first_hop=src["first_hop"],
        seed=int(doc.get("seed", 0)) & MASK64,
        hop_latency=float(doc.get("hop_latency_ms", 1.0)) / 1000.0,
        schedules=list(doc.get("schedules", [])),
    )
    _validate(topo)
    Simulator(topo)  # rejects malformed or overlapping schedules
    return topo


def _check_ref(topo: Topology, ref: str, where: str) -> None:
    if ":" in ref:
        rid, name = ref.split(":", 1)
        if rid not in topo.routers or name not in topo.routers[rid].interfaces:
            raise TopologyError(f"{where}: dangling interface {ref}")
    elif ref not in topo.hosts:
        raise TopologyError(f"{where}: dangling reference {ref}")


def validate_routes(topo: Topology, rid: str, routes: list[Route]) -> None:
    if rid not in topo.routers:
        raise TopologyError(f"forwarding for unknown router {rid}")
    linked = set()
    for a, b in topo.links:
        if _node_of(a) == rid:
            linked.add(b)
        if _node_of(b) == rid:
            linked.add(a)
    for route in routes:
        for nh in route.next_hops:
            _check_ref(topo, nh, f"router {rid} next hop")
            if nh not in linked:
                raise TopologyError(f"router {rid}: next hop {nh} is not linked to it")


def _validate(topo: Topology) -> None:
    for a, b in topo.links:
        _check_ref(topo, a, "link")
        _check_ref(topo, b, "link")
    _check_ref(topo, topo.first_hop, "source first_hop")
    if ":" not in topo.first_hop:
        raise TopologyError("source first_hop must be a router interface")
    for rid, r in topo.routers.items():
        validate_routes(topo, rid, r.routes)
    for dst in topo.hosts:
        _check_reachable(topo, dst, topo.routers)


def _lookup(routes: list[Route], dst: str) -> Route | None:
    addr = ipaddress.IPv4Address(dst)
    best = None
    for r in routes:
        if addr in r.prefix and (best is None or r.prefix.prefixlen > best.prefix.prefixlen):
            best = r
    return best


def _check_reachable(topo: Topology, dst: str, routing: dict) -> None:
    stack, seen = [_node_of(topo.first_hop)], set()
    while stack:
        node = stack.pop()
        if node in seen or node in topo.hosts:
            continue
        seen.add(node)
        route = _lookup(routing[node].routes, dst)
        if route is None:
            raise TopologyError(f"router {node}: no route to {dst} (add one or black-hole it)")
        stack.extend(_node_of(nh) for nh in route.next_hops)


# -- simulation --------------------------------------------------------------


@dataclass
class _Schedule:
    start: int
    end: float
    routes: dict[str, list[Route]]


def _loop_erase(path: list[str]) -> list[str]:
    out: list[str] = []
    for node in path:
        if node in out:
            del out[out.index(node) + 1:]
        else:
            out.append(node)
    return out


class Simulator:
    """Mutable simulation state over an immutable topology."""

    def __init__(self, topology: Topology, *, seed: int | None = None, capture: bool = False):
        self.topology = topology
        self.seed = topology.seed if seed is None else seed & MASK64
        self.rng = random.Random(self.seed)
        self.injected = 0
        self.clock = 0.0
        self.capture = capture
        self.captured: list[bytes] = []
        self._rr: dict[tuple[str, int], int] = {}
        self._ip_id: dict[str, int] = {}
        self._schedules: list[_Schedule] = []
        for sd in topology.schedules:
            try:
                self.schedule_forwarding_change(
                    int(sd["at_probe_count"]), sd["forwarding"], sd.get("duration")
                )
            except (KeyError, TypeError, ValueError) as e:
                if isinstance(e, TopologyError):
                    raise
                raise TopologyError(f"schedule: malformed entry {sd!r}") from None

    # forwarding changes

    def schedule_forwarding_change(
        self,
        at_probe_count: int,
        replacement: dict[str, list[dict] | list[Route]],
        duration: int | None = None,
    ) -> list[tuple[int, float]]:
        """Swap in ``replacement`` forwarding once ``at_probe_count`` packets have
        been injected, reverting after ``duration`` more (never, if None).

        Returns the list of scheduled (start, end) windows.
        """
        routes = {}
        for rid, entries in replacement.items():
            parsed = [e if isinstance(e, Route) else _parse_route(e, f"router {rid}")
                      for e in entries]
            validate_routes(self.topology, rid, parsed)
            routes[rid] = parsed
        end = math.inf if duration is None else at_probe_count + duration
        for s in self._schedules:
            if at_probe_count < s.end and s.start < end:
                raise ScheduleConflict(
                    f"schedule [{at_probe_count}, {end}) overlaps [{s.start}, {s.end})"
                )
        self._schedules.append(_Schedule(at_probe_count, end, routes))
        return [(s.start, s.end) for s in self._schedules]

    def _routes(self, rid: str, k: int) -> list[Route]:
        for s in self._schedules:
            if s.start <= k < s.end and rid in s.routes:
                return s.routes[rid]
        return self.topology.routers[rid].routes

    # per-node state

    def _next_ip_id(self, node: str, mode: str, seed: int | None) -> int:
        if mode == "constant_zero":
            return 0
        if node not in self._ip_id:
            start = seed if seed is not None else mix64(self.seed ^ _salt(node))
            self._ip_id[node] = start & 0xFFFF
        value = self._ip_id[node]
        self._ip_id[node] = (value + 1) & 0xFFFF
        return value

    def _choose(self, rid: str, idx: int, route: Route, flow: FlowKey, dst: str) -> str:
        hops = route.next_hops
        if len(hops) == 1:
            return hops[0]
        if route.policy is Policy.PER_PACKET:
            n = self._rr.get((rid, idx), 0)
            self._rr[(rid, idx)] = n + 1
            return hops[n % len(hops)]
        if route.policy is Policy.PER_DESTINATION:
            values = [wire.ip_to_int(dst)]
        else:
            values = flow.field_values(route.field_mask)
        return hops[hash_fields(self.seed, _salt(rid), values) % len(hops)]

    # injection

    def inject(self, octets: bytes) -> bytes | None:
        out = self.deliver(octets)
        return out[0] if out else None

    def deliver(self, octets: bytes) -> tuple[bytes, float] | None:
        """Forward one packet; the response (if any) and its round-trip time."""
        k = self.injected
        self.injected += 1
        self.clock += TICK
        if self.capture:
            self.captured.append(octets)
        hdr = IPHeader.unpack(octets)
        flow = wire.extract_flow_key(octets)
        topo = self.topology
        ttl = hdr.ttl
        pkt = octets
        ref = topo.first_hop
        path: list[str] = []
        while True:
            if ":" not in ref:
                return self._host_reply(ref, hdr, pkt, path)
            rid, ifname = ref.split(":", 1)
            router = topo.routers[rid]
            b = router.behavior
            path.append(rid)
            in_addr = b.masquerade_as or router.interfaces[ifname]
            if ttl == 0 or (ttl == 1 and not b.zero_ttl_bug):
                return self._router_reply(router, in_addr, wire.ICMP_TIME_EXCEEDED, 0, pkt, path)
            routes = self._routes(rid, k)
            route = _lookup(routes, hdr.dst)
            if route is None or route.blackhole:
                return None
            nxt = self._choose(rid, routes.index(route), route, flow, hdr.dst)
            if b.unreachable and self.rng.random() < b.unreachable[0]:
                return self._router_reply(
                    router, in_addr, wire.ICMP_UNREACH, b.unreachable[1], pkt, path
                )
            ttl -= 1
            pkt = wire.with_ttl(pkt, ttl)
            ref = nxt

    def _rtt(self, forward: int, back: int) -> float:
        return (forward + back) * self.topology.hop_latency

    def _router_reply(self, router: Router, src: str, itype: int, code: int,
                      pkt: bytes, path: list[str]) -> tuple[bytes, float]:
        b = router.behavior
        if not b.responds:
            return None
        back = _loop_erase(path).index(router.id)
        reply = wire.build_icmp_error(
            itype, code, src, IPHeader.unpack(pkt).src, pkt,
            ttl=max(b.response_initial_ttl - back, 1),
            ip_id=self._next_ip_id(router.id, b.ip_id_mode, b.ip_id_seed),
        )
        return reply, self._rtt(len(path), back + 1)

    def _host_reply(self, addr: str, hdr: IPHeader, pkt: bytes,
                    path: list[str]) -> tuple[bytes, float] | None:
        host = self.topology.hosts[addr]
        if hdr.dst != addr or not host.responds:
            return None
        back = len(_loop_erase(path))
        ttl = max(host.initial_ttl - back, 1)
        ip_id = self._next_ip_id(addr, host.ip_id_mode, None)
        if hdr.protocol == Protocol.UDP:
            reply = wire.build_icmp_error(
                wire.ICMP_UNREACH, wire.UNREACH_PORT, addr, hdr.src, pkt, ttl=ttl, ip_id=ip_id
            )
        elif hdr.protocol == Protocol.ICMP:
            reply = wire.build_echo_reply(pkt, ttl=ttl, ip_id=ip_id)
        else:
            reply = wire.build_tcp_reset(pkt, ttl=ttl, ip_id=ip_id)
        return reply, self._rtt(len(path) + 1, back + 1)


def inject(sim: Simulator, packet: bytes | wire.ProbePacket) -> bytes | None:
    octets = packet.octets if isinstance(packet, wire.ProbePacket) else packet
    return sim.inject(octets)


class SimTransport:
    """The probing Transport on top of a Simulator's virtual clock."""

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.source_address = sim.topology.source_address
        self._queue: list[tuple[float, int, bytes]] = []
        self._n = 0
        self.sent: list[wire.ProbePacket] = []

    def now(self) -> float:
        return self.sim.clock

    def pause(self, seconds: float) -> None:
        self.sim.clock += seconds

    def send(self, probe: wire.ProbePacket) -> float:
        t = self.sim.clock
        self.sent.append(probe)
        out = self.sim.deliver(probe.octets)
        if out is not None:
            heapq.heappush(self._queue, (t + out[1], self._n, out[0]))
            self._n += 1
        return t

    def receive(self, deadline: float) -> tuple[bytes, float] | None:
        if self._queue and self._queue[0][0] <= deadline:
            arrival, _, octets = heapq.heappop(self._queue)
            self.sim.clock = max(self.sim.clock, arrival)
            return octets, arrival
        self.sim.clock = max(self.sim.clock, deadline)
        return None
