from __future__ import annotations

import copy
import json
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtrace.probing import TraceConfig, new_session, run_trace
from flowtrace.simnet import (
    ScheduleConflict,
    SimTransport,
    Simulator,
    TopologyError,
    hash_fields,
    load_topology,
    mix64,
)
from flowtrace.structures import find_loop_instances, find_periodic_cycles
from flowtrace.topologies import balanced_loop, false_link, transient_cycle, zero_ttl
from flowtrace.wire import (
    ICMP_ECHO_REPLY,
    ICMP_TIME_EXCEEDED,
    ICMP_UNREACH,
    UNREACH_PORT,
    Mode,
    Protocol,
    Session,
    craft_probe,
    craft_udp_probe,
    parse_response,
)

from .nets import DEST, diamond, linear

SRC = "192.0.2.1"


def sim(doc, **kw) -> Simulator:
    return Simulator(load_topology(doc), **kw)


def session(sid=7, **kw) -> Session:
    return Session(SRC, DEST, sid, **kw)


# -- loading -----------------------------------------------------------------------


def test_false_link_topology_loads():
    topo = load_topology(false_link(prefix_hops=0).to_json())
    assert sorted(topo.routers) == ["A", "B", "C", "D", "E", "L"]


def test_json_lines_format():
    doc = linear(2)
    lines = [{"kind": "meta", "seed": doc["seed"], "hop_latency_ms": 1.0},
             {"kind": "source", **doc["source"]}]
    lines += [{"kind": "router", **r} for r in doc["routers"]]
    lines += [{"kind": "host", **h} for h in doc["hosts"]]
    lines += [{"kind": "link", "ends": l} for l in doc["links"]]
    topo = load_topology("\n".join(json.dumps(x) for x in lines))
    assert set(topo.routers) == {"R1", "R2"}
    assert topo.seed == doc["seed"]


def _mutated(fn):
    doc = copy.deepcopy(linear(3))
    fn(doc)
    return doc


@pytest.mark.parametrize("mutate,needle", [
    (lambda d: d["routers"][1]["interfaces"][0].update(address=d["routers"][0]["interfaces"][0]["address"]),
     "duplicate address"),
    (lambda d: d["routers"][0]["forwarding"][0].update(next_hops=["R9:in"]), "dangling"),
    (lambda d: d["routers"][0]["forwarding"][0].update(next_hops=[]), "empty next-hop"),
    (lambda d: d["routers"][0]["forwarding"][0].update(next_hops=["R3:in"]), "not linked"),
    (lambda d: d["routers"][0]["forwarding"].clear(), "no route"),
    (lambda d: d["routers"][0]["forwarding"][0].update(policy="random"), "unknown policy"),
    (lambda d: d["routers"][0]["forwarding"][0].update(field_mask=[]), "empty field_mask"),
    (lambda d: d["routers"][0]["behavior"].update(unreachable={"probability": 1.5}), "probability"),
    (lambda d: d["routers"][0]["behavior"].update(ip_id={"mode": "random"}), "ip_id mode"),
    (lambda d: d["source"].update(first_hop=DEST), "first_hop"),
    (lambda d: d.pop("source"), "parse error"),
])
def test_validation_errors(mutate, needle):
    with pytest.raises(TopologyError) as e:
        load_topology(_mutated(mutate))
    assert needle in str(e.value)


def test_blackhole_allowed_and_silent():
    def bh(d):
        d["routers"][1]["forwarding"] = [{"prefix": "0.0.0.0/0", "blackhole": True}]
    s = sim(_mutated(bh))
    p = craft_udp_probe(Mode.PARIS, session(), 1, 10)
    assert s.inject(p.octets) is None


def test_garbage_text_rejected():
    with pytest.raises(TopologyError):
        load_topology("{not json")
    with pytest.raises(TopologyError):
        load_topology('{"kind": "spaceship"}')


# -- forwarding ----------------------------------------------------------------------


def test_time_exceeded_from_incoming_interface():
    doc = linear(3)
    s = sim(doc)
    for ttl in (1, 2, 3):
        info = parse_response(s.inject(craft_udp_probe(Mode.PARIS, session(), ttl, ttl).octets))
        assert info.icmp_type == ICMP_TIME_EXCEEDED
        assert info.responder_addr == doc["routers"][ttl - 1]["interfaces"][0]["address"]
        assert info.quoted_probe_ttl == 1
        assert info.response_ttl == 255 - (ttl - 1)


@pytest.mark.parametrize("proto,itype", [(Protocol.UDP, ICMP_UNREACH),
                                         (Protocol.ICMP, ICMP_ECHO_REPLY), (Protocol.TCP, None)])
def test_destination_replies(proto, itype):
    s = sim(linear(3))
    info = parse_response(s.inject(craft_probe(proto, Mode.PARIS, session(), 5, 30).octets))
    assert info.responder_addr == DEST
    assert info.icmp_type == itype
    if proto is Protocol.UDP:
        assert info.icmp_code == UNREACH_PORT
    assert info.response_ttl == 64 - 3


def test_unresponsive_host():
    s = sim(linear(2, host={"responds": False}))
    assert s.inject(craft_udp_probe(Mode.PARIS, session(), 1, 30).octets) is None


def test_zero_ttl_bug_quotes_zero():
    sc = zero_ttl()
    s = sim(sc.topology)
    g = sc.labels["G"]
    infos = []
    for ttl in range(1, 10):
        p = craft_udp_probe(Mode.PARIS, Session(SRC, sc.destinations[0], 3), ttl, ttl)
        infos.append(parse_response(s.inject(p.octets)))
    at_g = [i for i in infos if i.responder_addr == g]
    assert [i.quoted_probe_ttl for i in at_g] == [0, 1]
    assert all(i.quoted_probe_ttl == 1 for i in infos if i.responder_addr != g)


def test_masquerade_source():
    doc = linear(3, behaviors={"R3": {"masquerade_as": "10.99.0.1"}})
    s = sim(doc)
    info = parse_response(s.inject(craft_udp_probe(Mode.PARIS, session(), 3, 3).octets))
    assert info.responder_addr == "10.99.0.1"


def test_unreachable_probability():
    doc = linear(3, behaviors={"R2": {"unreachable": {"probability": 0.2, "code": 1}}})
    s = sim(doc, seed=11)
    hits = 0
    for i in range(1, 2001):
        info = parse_response(s.inject(craft_udp_probe(Mode.PARIS, session(), i, 5).octets))
        hits += info.icmp_type == ICMP_UNREACH and info.icmp_code == 1
    assert 0.17 < hits / 2000 < 0.23


# -- load balancing ------------------------------------------------------------------


def _branch(s: Simulator, probe) -> str:
    return parse_response(s.inject(probe.octets)).responder_addr


@settings(max_examples=50)
@given(st.integers(0, 0xFFFF), st.integers(1, 0xFFFE), st.integers(1, 0xFFFE), st.integers(0, 2**32))
def test_per_flow_stability(sid, i, j, seed):
    s = sim(diamond(seed=seed))
    sess = Session(SRC, DEST, sid, src_port=20000, dst_port=30000)
    a = craft_udp_probe(Mode.PARIS, sess, i, 2)
    b = craft_udp_probe(Mode.PARIS, sess, j, 2)
    assert _branch(s, a) == _branch(s, b)


def test_per_flow_spreads_classic():
    s = sim(diamond())
    seen = Counter(_branch(s, craft_udp_probe(Mode.CLASSIC, session(), i, 2)) for i in range(400))
    assert len(seen) == 2
    assert all(120 < c < 280 for c in seen.values())


def test_field_mask_limits_hash():
    s = sim(diamond(field_mask=["src_addr", "dst_addr", "protocol"]))
    seen = {_branch(s, craft_udp_probe(Mode.CLASSIC, session(), i, 2)) for i in range(50)}
    assert len(seen) == 1


@pytest.mark.parametrize("m", [1, 7, 10, 33])
def test_per_packet_fairness(m):
    s = sim(diamond("per_packet"))
    sess = session()
    counts = Counter(_branch(s, craft_udp_probe(Mode.PARIS, sess, 1, 2)) for _ in range(m))
    assert sum(counts.values()) == m
    assert all(c in (m // 2, -(-m // 2)) for c in counts.values())


def test_per_destination_ignores_ports():
    s = sim(diamond("per_destination"))
    seen = {_branch(s, craft_udp_probe(Mode.CLASSIC, session(), i, 2)) for i in range(50)}
    assert len(seen) == 1


def test_mixer_is_deterministic_and_salted():
    assert mix64(0) == mix64(0) != mix64(1)
    assert hash_fields(1, 2, [3, 4]) == hash_fields(1, 2, [3, 4])
    assert hash_fields(1, 2, [3, 4]) != hash_fields(1, 3, [3, 4])


# -- determinism, IP IDs, TTLs -------------------------------------------------------


def _responses(seed):
    sc = balanced_loop(seed=5)
    s = Simulator(load_topology(sc.topology), seed=seed)
    rng = random.Random(0)
    out = []
    for _ in range(300):
        proto = rng.choice(list(Protocol))
        mode = Mode.PARIS if proto is Protocol.TCP else rng.choice(list(Mode))
        sess = Session(SRC, sc.destinations[0], rng.randrange(1, 0xFFFF))
        out.append(s.inject(craft_probe(proto, mode, sess, rng.randrange(1, 0xFFFE),
                                        rng.randrange(1, 8)).octets))
    return out


def test_determinism():
    assert _responses(9) == _responses(9)
    assert _responses(9) != _responses(10)


def test_counter_monotonic():
    s = sim(linear(3))
    ids = [parse_response(s.inject(craft_udp_probe(Mode.PARIS, session(), i, 2).octets)).ip_id
           for i in range(1, 300)]
    assert all((b - a) & 0xFFFF == 1 for a, b in zip(ids, ids[1:]))


def test_counter_wraps():
    s = sim(linear(2, behaviors={"R1": {"ip_id": {"mode": "counter", "seed": 0xFFFE}}}))
    ids = [parse_response(s.inject(craft_udp_probe(Mode.PARIS, session(), i, 1).octets)).ip_id
           for i in range(1, 5)]
    assert ids == [0xFFFE, 0xFFFF, 0, 1]


def test_constant_zero_ip_id():
    s = sim(linear(2, behaviors={"R1": {"ip_id": {"mode": "constant_zero"}}}))
    ids = {parse_response(s.inject(craft_udp_probe(Mode.PARIS, session(), i, 1).octets)).ip_id
           for i in range(1, 20)}
    assert ids == {0}


@given(st.integers(1, 12))
def test_ttl_conservation(ttl):
    s = sim(linear(12))
    info = parse_response(s.inject(craft_udp_probe(Mode.PARIS, session(), 1, ttl).octets))
    # the responder is the ttl-th router: ttl - (ttl - 1) hops consumed before it
    assert info.quoted_probe_ttl == 1
    assert info.response_ttl == 255 - (ttl - 1)


# -- schedules -----------------------------------------------------------------------


def _trace(s, dest, seed=0):
    t = SimTransport(s)
    return run_trace(dest, TraceConfig(probes_per_hop=1, max_ttl=20), t,
                     new_session(t.source_address, dest, random.Random(seed)))


def test_cycle_schedule_window():
    sc = transient_cycle()
    dest = sc.destinations[0]
    s = sim(sc.topology)
    before = _trace(s, dest)
    s.schedule_forwarding_change(s.injected, sc.cycle_forwarding, duration=40)
    # each looping trace spends max_ttl = 20 probes, so two fill the window
    during = [_trace(s, dest, 1), _trace(s, dest, 2)]
    after = _trace(s, dest, 3)
    assert not find_periodic_cycles(before) and not find_periodic_cycles(after)
    assert not find_loop_instances(before)
    for route in during:
        cycles = find_periodic_cycles(route)
        assert cycles and all(c.period == 2 for c in cycles)


def test_schedule_at_zero_is_immediate():
    sc = transient_cycle()
    s = sim(sc.topology)
    s.schedule_forwarding_change(0, sc.cycle_forwarding, duration=None)
    assert find_periodic_cycles(_trace(s, sc.destinations[0]))


def test_overlapping_schedule_rejected():
    sc = transient_cycle()
    s = sim(sc.topology)
    s.schedule_forwarding_change(10, sc.cycle_forwarding, duration=40)
    with pytest.raises(ScheduleConflict):
        s.schedule_forwarding_change(30, sc.cycle_forwarding, duration=5)
    s.schedule_forwarding_change(50, sc.cycle_forwarding, duration=5)


def test_schedule_validated():
    sc = transient_cycle()
    s = sim(sc.topology)
    with pytest.raises(TopologyError):
        s.schedule_forwarding_change(0, {"R1": [{"next_hops": ["R4:in"]}]})
    with pytest.raises(TopologyError):
        load_topology({**sc.topology, "schedules": [{"duration": 3}]})


def test_schedule_in_document():
    sc = transient_cycle()
    s = sim(sc.with_schedule(0, 40))
    assert find_periodic_cycles(_trace(s, sc.destinations[0]))


def test_transport_orders_by_arrival():
    s = sim(linear(20))
    t = SimTransport(s)
    far = craft_udp_probe(Mode.PARIS, session(), 1, 20)
    near = craft_udp_probe(Mode.PARIS, session(), 2, 1)
    t.send(far)
    t.send(near)
    first = parse_response(t.receive(t.now() + 5)[0])
    assert first.quoted_probe_id == 2
    assert t.receive(t.now() + 5) is not None
    assert t.receive(t.now() + 5) is None
