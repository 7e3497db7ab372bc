"""Ready-made simulator topologies, one per traceroute anomaly.

Each builder returns a :class:`Scenario`: a topology document (the JSON
structure :func:`simnet.load_topology` reads) plus the addresses and router
names needed to interpret the traces it produces.  Scenario parts can be
hung below a common root router to form a mixed campaign.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

SOURCE = "192.0.2.1"


class Builder:
    """Assembles a topology document, allocating interface addresses on demand.

    The ``i``-th router gets addresses ``10.<i // 250>.<i % 250>.<n>`` unless an
    explicit address is given.
    """

    def __init__(self, seed: int = 1, source: str = SOURCE):
        self.seed = seed
        self.source = source
        self.first_hop: str | None = None
        self.routers: dict[str, dict] = {}
        self.hosts: dict[str, dict] = {}
        self.links: list[list[str]] = []

    def router(self, rid: str, **behavior) -> str:
        if rid in self.routers:
            raise ValueError(f"router {rid} already defined")
        self.routers[rid] = {"id": rid, "interfaces": [], "behavior": behavior, "forwarding": []}
        return rid

    def host(self, address: str, responds: bool = True) -> str:
        self.hosts[address] = {"address": address, "responds": responds}
        return address

    def iface(self, rid: str, name: str, address: str | None = None) -> str:
        r = self.routers[rid]
        if all(i["name"] != name for i in r["interfaces"]):
            idx = list(self.routers).index(rid) + 1
            n = len(r["interfaces"]) + 1
            r["interfaces"].append(
                {"name": name, "address": address or f"10.{idx // 250}.{idx % 250}.{n}"}
            )
        return f"{rid}:{name}"

    def address(self, ref: str) -> str:
        if ":" not in ref:
            return ref
        rid, name = ref.split(":", 1)
        return next(i["address"] for i in self.routers[rid]["interfaces"] if i["name"] == name)

    def hop(self, a: str, b: str, *, a_iface: str = "out", b_iface: str = "in",
            b_address: str | None = None) -> str:
        """Link router ``a`` to router or host ``b``; returns ``b``'s end for use as a next hop."""
        ra = self.iface(a, a_iface)
        rb = b if b in self.hosts else self.iface(b, b_iface, b_address)
        if [ra, rb] not in self.links:
            self.links.append([ra, rb])
        return rb

    def attach_source(self, rid: str, address: str | None = None) -> None:
        self.first_hop = self.iface(rid, "in", address)

    def route(self, rid: str, next_hops: list[str], *, prefix: str = "0.0.0.0/0",
              policy: str = "per_flow") -> None:
        self.routers[rid]["forwarding"].append(
            {"prefix": prefix, "next_hops": list(next_hops), "policy": policy}
        )

    def chain(self, names: list[str]) -> None:
        """Single-path forwarding names[0] -> names[1] -> ... (last may be a host)."""
        for here, nxt in zip(names, names[1:]):
            self.route(here, [self.hop(here, nxt)])

    def build(self) -> dict:
        return {
            "seed": self.seed,
            "hop_latency_ms": 1.0,
            "source": {"address": self.source, "first_hop": self.first_hop},
            "routers": list(self.routers.values()),
            "hosts": list(self.hosts.values()),
            "links": self.links,
        }


@dataclass
class Scenario:
    name: str
    topology: dict
    destinations: list[str]
    labels: dict[str, str] = field(default_factory=dict)  # label -> address
    # router id -> forwarding entries that create a transient cycle when swapped in
    cycle_forwarding: dict[str, list[dict]] = field(default_factory=dict)

    def with_schedule(self, at_probe_count: int, duration: int | None) -> dict:
        """Topology document carrying the cycle swap as a schedule."""
        doc = dict(self.topology)
        doc["schedules"] = [{"at_probe_count": at_probe_count, "duration": duration,
                             "forwarding": self.cycle_forwarding}]
        return doc

    def to_json(self) -> str:
        return json.dumps(self.topology, indent=1, sort_keys=True) + "\n"


def _enter(b: Builder, up: str | None, first: str, dest: str) -> None:
    """Hang a branch starting at ``first`` below ``up`` (or at the source)."""
    if up is None:
        b.attach_source(first)
    else:
        b.route(up, [b.hop(up, first, a_iface=f"to_{first}")], prefix=f"{dest}/32")


def _prefix(b: Builder, tag: str, n: int) -> list[str]:
    return [b.router(f"{tag}P{i}") for i in range(1, n + 1)]


# -- branches ------------------------------------------------------------------


def _false_link(b: Builder, up: str | None, tag: str, dest: str, prefix_hops: int) -> dict:
    pre = _prefix(b, tag, prefix_hops)
    L, A, B, C, D, E = (b.router(f"{tag}{x}") for x in "LABCDE")
    b.routers[B]["behavior"]["responds"] = False
    b.routers[C]["behavior"]["responds"] = False
    b.host(dest)
    _enter(b, up, (pre or [L])[0], dest)
    b.chain(pre + [L])
    b.route(L, [b.hop(L, A, a_iface="0"), b.hop(L, B, a_iface="1")])
    b.chain([A, C, E])
    b.chain([B, D])
    b.route(D, [b.hop(D, E, b_iface="in2")])
    b.chain([E, dest])
    return {x: b.address(f"{tag}{x}:in") for x in "LABCDE"}


def _balanced_loop(b: Builder, up: str | None, tag: str, dest: str, prefix_hops: int) -> dict:
    pre = _prefix(b, tag, prefix_hops)
    L, A, B, C, E, F = (b.router(f"{tag}{x}") for x in "LABCEF")
    b.host(dest)
    _enter(b, up, (pre or [L])[0], dest)
    b.chain(pre + [L])
    b.route(L, [b.hop(L, A, a_iface="0"), b.hop(L, B, a_iface="1")])
    b.chain([A, C, E])  # long branch
    b.chain([B, E])  # short branch, into the same interface of E
    b.chain([E, F, dest])
    return {x: b.address(f"{tag}{x}:in") for x in "LABCEF"}


ZERO_TTL_ADDRS = {"P6": "10.10.146.134", "G": "10.10.127.197", "H": "10.10.127.37"}


def _zero_ttl(b: Builder, up: str | None, tag: str, dest: str, fig_addresses: bool) -> dict:
    pre = _prefix(b, tag, 6)
    F = b.router(f"{tag}F", zero_ttl_bug=True)
    G, H = b.router(f"{tag}G"), b.router(f"{tag}H")
    b.host(dest)
    _enter(b, up, pre[0], dest)
    if fig_addresses:
        b.iface(pre[5], "in", ZERO_TTL_ADDRS["P6"])
        b.iface(G, "in", ZERO_TTL_ADDRS["G"])
        b.iface(H, "in", ZERO_TTL_ADDRS["H"])
    b.chain(pre + [F, G, H, dest])
    return {"P6": b.address(f"{pre[5]}:in"), "F": b.address(f"{F}:in"),
            "G": b.address(f"{G}:in"), "H": b.address(f"{H}:in")}


def _nat(b: Builder, up: str | None, tag: str, dest: str, masquerade: bool) -> dict:
    R1, R2, N1 = b.router(f"{tag}R1"), b.router(f"{tag}R2"), b.router(f"{tag}N1")
    b.host(dest)
    _enter(b, up, R1, dest)
    gateway = b.address(b.iface(N1, "in"))
    extra = {"masquerade_as": gateway} if masquerade else {}
    N2, N3 = b.router(f"{tag}N2", **extra), b.router(f"{tag}N3", **extra)
    b.chain([R1, R2, N1, N2, N3, dest])
    return {"N1": gateway, "N2": b.address(f"{N2}:in"), "N3": b.address(f"{N3}:in")}


def _cycle(b: Builder, up: str | None, tag: str, dest: str, ip_id_mode: str) -> tuple[dict, dict]:
    mode = {"ip_id": {"mode": ip_id_mode}}
    R1, R2, R3, R4 = (b.router(f"{tag}R{i}", **mode) for i in range(1, 5))
    b.host(dest)
    _enter(b, up, R1, dest)
    b.chain([R1, R2, R3, R4, dest])
    # R3 sends everything back over the R2-R3 link
    swap = {R3: [{"prefix": "0.0.0.0/0", "next_hops": [f"{R2}:out"], "policy": "per_flow"}]}
    labels = {"R2": b.address(f"{R2}:in"), "R2out": b.address(f"{R2}:out"),
              "R3": b.address(f"{R3}:in"), "R4": b.address(f"{R4}:in")}
    return labels, swap


def _unreachable(b: Builder, up: str | None, tag: str, dest: str, probability: float,
                 code: int) -> dict:
    R1, R2, R3 = (b.router(f"{tag}R{i}") for i in range(1, 4))
    U = b.router(f"{tag}U", unreachable={"probability": probability, "code": code})
    R5 = b.router(f"{tag}R5")
    b.host(dest)
    _enter(b, up, R1, dest)
    b.chain([R1, R2, R3, U, R5, dest])
    return {"U": b.address(f"{U}:in"), "R5": b.address(f"{R5}:in")}


# -- scenarios -----------------------------------------------------------------


def false_link(seed: int = 1, prefix_hops: int = 5) -> Scenario:
    """Two-way per-flow balancer L at hop ``prefix_hops + 1``.

    Paths L-A-C-E and L-B-D-E; B and C never answer.  A trace that meets A at
    one hop and D at the next suggests the nonexistent link A-D.
    """
    b = Builder(seed)
    dest = "203.0.113.10"
    labels = _false_link(b, None, "", dest, prefix_hops)
    return Scenario("false_link", b.build(), [dest], labels)


def balanced_loop(seed: int = 1, prefix_hops: int = 2) -> Scenario:
    """Per-flow balancer L whose two branches to E differ in length by one hop."""
    b = Builder(seed)
    dest = "203.0.113.20"
    labels = _balanced_loop(b, None, "", dest, prefix_hops)
    return Scenario("balanced_loop", b.build(), [dest], labels)


def zero_ttl(seed: int = 1, fig_addresses: bool = True) -> Scenario:
    """Router F at hop 7 forwards packets whose TTL it has decremented to zero."""
    b = Builder(seed)
    dest = "203.0.113.30"
    labels = _zero_ttl(b, None, "", dest, fig_addresses)
    return Scenario("zero_ttl", b.build(), [dest], labels)


def nat(seed: int = 1, masquerade: bool = True) -> Scenario:
    """Gateway N1 and two routers behind it that answer with N1's address."""
    b = Builder(seed)
    dest = "203.0.113.40"
    labels = _nat(b, None, "", dest, masquerade)
    return Scenario("nat", b.build(), [dest], labels)


def transient_cycle(seed: int = 1, ip_id_mode: str = "counter") -> Scenario:
    """Chain R1-R4; the swap makes R3 send everything back to R2."""
    b = Builder(seed)
    dest = "203.0.113.50"
    labels, swap = _cycle(b, None, "", dest, ip_id_mode)
    return Scenario("transient_cycle", b.build(), [dest], labels, swap)


def unreachable(seed: int = 1, probability: float = 0.2, code: int = 1) -> Scenario:
    """Router U answers forwarded probes with an unreachable at the given rate."""
    b = Builder(seed)
    dest = "203.0.113.60"
    labels = _unreachable(b, None, "", dest, probability, code)
    return Scenario("unreachable", b.build(), [dest], labels)


MIXED_DESTINATIONS = {
    "per_flow": "203.0.113.20",
    "zero_ttl": "203.0.113.30",
    "fake": "203.0.113.40",
    "cycle": "203.0.113.50",
    "interrupted": "203.0.113.60",
}


def mixed(seed: int = 1) -> Scenario:
    """One balancer, one zero-TTL router, one NAT segment, one cycle-prone pair
    and one unreachable emitter, each on the path to its own destination."""
    b = Builder(seed)
    root = b.router("X0")
    b.attach_source(root)
    d = MIXED_DESTINATIONS
    labels = {}
    for k, v in _balanced_loop(b, root, "lb", d["per_flow"], 1).items():
        labels[f"lb.{k}"] = v
    for k, v in _zero_ttl(b, root, "zt", d["zero_ttl"], False).items():
        labels[f"zt.{k}"] = v
    for k, v in _nat(b, root, "nat", d["fake"], True).items():
        labels[f"nat.{k}"] = v
    cyc, swap = _cycle(b, root, "cy", d["cycle"], "counter")
    labels.update({f"cy.{k}": v for k, v in cyc.items()})
    for k, v in _unreachable(b, root, "un", d["interrupted"], 0.2, 1).items():
        labels[f"un.{k}"] = v
    return Scenario("mixed", b.build(), list(d.values()), labels, swap)


SCENARIOS = {
    "false_link": false_link,
    "balanced_loop": balanced_loop,
    "zero_ttl": zero_ttl,
    "nat": nat,
    "transient_cycle": transient_cycle,
    "unreachable": unreachable,
    "mixed": mixed,
}
