"""The twelve acceptance criteria, each at its stated tolerance and time limit."""

from __future__ import annotations

import random
import socket
import struct
from fractions import Fraction
from pathlib import Path

from flowtrace import cli
from flowtrace.artifacts import (
    Cause,
    CycleEvidence,
    Kind,
    classify,
    classify_fake,
    classify_zero_ttl,
    compare_datasets,
    fake_instance,
    summary_report,
    verify_routing_cycle,
)
from flowtrace.campaign import CampaignConfig, sim_run
from flowtrace.probing import TraceConfig, new_session, run_trace
from flowtrace.simnet import SimTransport, Simulator, load_topology
from flowtrace.structures import (
    LoopClass,
    aggregate_cycles,
    aggregate_loops,
    find_cycle_pairs,
    find_diamonds,
    find_loop_instances,
    find_periodic_cycles,
    identical_path_probability,
    loop_instances_by_signature,
    missing_router_probability,
)
from flowtrace.topologies import balanced_loop, false_link, nat, transient_cycle, unreachable
from flowtrace.topologies import zero_ttl as zero_ttl_scenario
from flowtrace.tracestore import MeasuredRoute, group_dataset
from flowtrace.wire import (
    IP_HDR_LEN,
    ICMP_SOURCE_QUENCH,
    ICMP_UNREACH,
    Mode,
    Protocol,
    Session,
    craft_icmp_probe,
    craft_probe,
    craft_udp_probe,
    extract_flow_key,
)

from .accept import criterion
from .oracles import (
    checksum_oracle,
    cycle_pairs_oracle,
    cycle_signatures_oracle,
    diamond_classes_oracle,
    identical_path_oracle,
    loop_signatures_oracle,
    loops_oracle,
    missing_router_oracle,
    periodic_oracle,
)
from .worked import CYCLE_EXAMPLE, D1, D2, DIAMOND_EXAMPLE, LOOP_EXAMPLE

TOPOLOGIES = Path(__file__).resolve().parent.parent / "topologies"


def _random_session(rng: random.Random) -> Session:
    def addr():
        return socket.inet_ntoa(rng.getrandbits(32).to_bytes(4, "big"))

    return Session(addr(), addr(), rng.randrange(0x10000), src_port=rng.randint(10_000, 60_000),
                   dst_port=rng.randint(10_000, 60_000), tos=rng.randrange(256),
                   payload_len=rng.randint(2, 16))


def _campaign(scenario, rounds: int, seed: int = 0):
    topo = load_topology(scenario.topology)
    classic, paris = sim_run(topo, scenario.destinations,
                             CampaignConfig(rounds=rounds, seed=seed, parallel=1))
    return topo, group_dataset(classic), group_dataset(paris)


def _slot_trace(sim_transport, dest, rng, mode, n, max_ttl=36):
    session = new_session(sim_transport.source_address, dest, rng)
    cfg = TraceConfig(mode=mode, probes_per_hop=n, max_ttl=max_ttl)
    return run_trace(dest, cfg, sim_transport, session)


# 1 ---------------------------------------------------------------------------------


def test_criterion_01_flow_constancy():
    with criterion(1, "flow constancy (paris) and port variation (classic)", 5) as res:
        rng = random.Random(1)
        for _ in range(1000):
            s = _random_session(rng)
            keys = {extract_flow_key(craft_udp_probe(Mode.PARIS, s, i, rng.randint(1, 36)).octets)
                    for i in range(1, 11)}
            assert len(keys) == 1
            ports = [extract_flow_key(craft_udp_probe(Mode.CLASSIC, s, i, 1).octets).dst_port
                     for i in range(10)]
            assert ports == [33435 + i for i in range(10)]
        res.notes.append("1000 paris sessions x 10 probes: 1 key each")


# 2 ---------------------------------------------------------------------------------


def _oracle_verifies(octets: bytes) -> bool:
    if checksum_oracle(octets[:IP_HDR_LEN]) != 0:
        return False
    proto = octets[9]
    seg = octets[IP_HDR_LEN:]
    if proto == Protocol.ICMP:
        return checksum_oracle(seg) == 0
    pseudo = octets[12:20] + bytes([0, proto]) + struct.pack("!H", len(seg))
    return checksum_oracle(pseudo + seg) == 0


def test_criterion_02_checksum_soundness():
    with criterion(2, "checksum soundness over 10,000 crafted packets", 10) as res:
        rng = random.Random(2)
        combos = [(p, m) for p in Protocol for m in Mode
                  if not (p is Protocol.TCP and m is Mode.CLASSIC)]
        for k in range(10_000):
            proto, mode = combos[k % len(combos)]
            s = _random_session(rng)
            idx = rng.randint(1, 0xFFFE)
            pkt = craft_probe(proto, mode, s, idx, rng.randint(1, 255))
            assert _oracle_verifies(pkt.octets)
            if proto is Protocol.UDP and mode is Mode.PARIS:
                assert struct.unpack("!H", pkt.octets[26:28])[0] == idx
            if proto is Protocol.ICMP and mode is Mode.PARIS:
                other = craft_icmp_probe(Mode.PARIS, s, rng.randint(0, 0xFFFF), 1)
                assert pkt.octets[22:24] == other.octets[22:24]
        res.notes.append("10000 packets, 0 oracle failures")


# 3 ---------------------------------------------------------------------------------


def _branch(route: MeasuredRoute, ttl: int, labels: dict) -> list[str]:
    """Ground-truth branch per probe at hops 7 and 8 (B and C never answer)."""
    hop = route.hops[ttl - 1]
    if ttl == 7:
        return ["A" if s.addr == labels["A"] else "B" for s in hop.slots]
    return ["B" if s.addr == labels["D"] else "A" for s in hop.slots]


def _false_adjacencies(topo, routes) -> int:
    n = 0
    for r in routes:
        seq = r.addresses
        for a, b in zip(seq, seq[1:]):
            if a and b and a != b and not topo.linked(topo.owner(a), topo.owner(b)):
                n += 1
    return n


def test_criterion_03_false_links():
    with criterion(3, "false links behind a 2-way per-flow balancer", 30) as res:
        sc = false_link(prefix_hops=5)
        dest = sc.destinations[0]
        topo = load_topology(sc.topology)
        assert topo.owner(sc.labels["L"]) == "L"

        # (a) four probes over hops 7-8 (two per hop, as in the 2/2**4 model)
        t = SimTransport(Simulator(topo))
        rng = random.Random(3)
        same = same_single = 0
        rounds = 2000
        for _ in range(rounds):
            r = _slot_trace(t, dest, rng, Mode.CLASSIC, 2)
            branches = _branch(r, 7, sc.labels) + _branch(r, 8, sc.labels)
            same += len(set(branches)) == 1
            same_single += len({branches[0], branches[2]}) == 1
        frac = same / rounds
        res.notes.append(f"consistent fraction {frac:.4f} (2 probes/hop)")
        res.notes.append(f"{same_single / rounds:.4f} with 1 probe/hop")
        assert abs(frac - 0.125) <= 0.03

        # (b) false adjacencies with one probe per hop
        classic, paris = [], []
        for _ in range(rounds):
            paris.append(_slot_trace(t, dest, rng, Mode.PARIS, 1))
            classic.append(_slot_trace(t, dest, rng, Mode.CLASSIC, 1))
        fc, fp = _false_adjacencies(topo, classic), _false_adjacencies(topo, paris)
        res.notes.append(f"false adjacencies classic={fc} paris={fp}")
        assert fc >= 1 and fp == 0
        a0, d0 = sc.labels["A"], sc.labels["D"]
        assert any((a0, d0) in zip(r.addresses, r.addresses[1:]) for r in classic)


# 4 ---------------------------------------------------------------------------------


def test_criterion_04_balancer_loop():
    with criterion(4, "loop from unequal balanced paths disappears under paris", 30) as res:
        sc = balanced_loop()
        dest = sc.destinations[0]
        _, classic, paris = _campaign(sc, 1000, seed=4)
        e = sc.labels["E"]
        sig = {s.key: s for s in aggregate_loops(classic)}.get((e, dest))
        assert sig is not None and sig.appearance_frequency > 0
        assert sum(len(v) for v in loop_instances_by_signature(paris).values()) == 0
        report = compare_datasets(classic, paris)
        assert (e, dest) in report.disappeared[Kind.LOOP_SIGNATURES]
        labels = classify(classic, paris).labels[Kind.LOOP_SIGNATURES]
        assert labels[(e, dest)] is Cause.PER_FLOW
        res.notes.append(f"classic appearance {sig.appearance_frequency:.3f}, paris loops 0")


# 5 ---------------------------------------------------------------------------------


def test_criterion_05_zero_ttl(tmp_path, capsys):
    with criterion(5, "zero-TTL forwarding: !T0 listing and classification", 5) as res:
        sc = zero_ttl_scenario()
        topo_file = tmp_path / "zero_ttl.json"
        topo_file.write_text(sc.to_json())
        assert cli.main(["trace", sc.destinations[0], "--sim", str(topo_file), "-q", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        fields = [ln.split("  ") for ln in lines[5:9]]
        assert [f[0] for f in fields] == ["6", "7", "8", "9"]
        assert [f[1] for f in fields] == ["10.10.146.134", "10.10.127.197", "10.10.127.197",
                                         "10.10.127.37"]
        assert fields[1][2].endswith(" ms !T0")
        assert all(not f[2].split(" ms")[1] for f in (fields[0], fields[2], fields[3]))

        _, classic, paris = _campaign(sc, 50, seed=5)
        sigs = aggregate_loops(paris)
        assert sigs
        assert all(classify_zero_ttl(s, paris) for s in sigs)
        labels = classify(classic, paris).labels
        for kind in (Kind.LOOP_SIGNATURES, Kind.LOOP_INSTANCES):
            assert set(labels[kind].values()) == {Cause.ZERO_TTL}
        res.notes.append(f"{len(sigs)} loop signature(s), all zero-TTL")


# 6 ---------------------------------------------------------------------------------


def test_criterion_06_fake_addresses():
    with criterion(6, "masqueraded segment yields fake-address loops", 5) as res:
        sc = nat()
        dest = sc.destinations[0]
        _, classic, paris = _campaign(sc, 20, seed=6)
        (sig,) = aggregate_loops(paris)
        assert sig.addr == sc.labels["N1"]
        assert sig.max_length == 2 and sig.loop_class is LoopClass.PERSISTENT
        inst = loop_instances_by_signature(paris)[sig.key]
        for route, i in inst:
            ttls = [route.hops[k].response_ttl for k in range(i.start, i.start + i.n + 1)]
            assert all(a > b for a, b in zip(ttls, ttls[1:]))
            assert fake_instance(route, list(range(i.start, i.start + i.n + 1)))
        assert classify_fake(sig, paris)
        assert set(classify(classic, paris).labels[Kind.LOOP_SIGNATURES].values()) == {Cause.FAKE}

        plain = nat(masquerade=False)
        _, _, paris_plain = _campaign(plain, 20, seed=6)
        assert not classify_fake(sig, paris_plain)
        assert all(not find_loop_instances(r) for r in paris_plain)
        assert not any(classify_fake(s, paris_plain) for s in aggregate_loops(paris_plain))
        res.notes.append(f"{len(inst)} instances, all strictly decreasing")


# 7 ---------------------------------------------------------------------------------


def _cycle_run(ip_id_mode: str):
    sc = transient_cycle(ip_id_mode=ip_id_mode)
    dest = sc.destinations[0]
    sim = Simulator(load_topology(sc.topology))
    t = SimTransport(sim)
    rng = random.Random(7)

    def one():
        return _slot_trace(t, dest, rng, Mode.PARIS, 1, max_ttl=30)

    before = one()
    sim.schedule_forwarding_change(sim.injected, sc.cycle_forwarding, duration=40)
    during = one()
    while sim.injected < 40 + len(before.hops):
        sim.clock += 0.01  # idle until the window closes
        sim.injected += 1
    after = [one() for _ in range(3)]
    return sc, before, during, after


def test_criterion_07_routing_cycles():
    with criterion(7, "transient routing cycle confirmed by IP IDs", 10) as res:
        sc, before, during, after = _cycle_run("counter")
        assert len(during.hops) <= 40
        cycles = find_periodic_cycles(during)
        assert cycles and {c.period for c in cycles} == {2}
        looped = set(cycles[0].block)
        spans = [p.separation for p in find_cycle_pairs(during) if p.addr in looped]
        assert spans and all(s % 2 == 0 for s in spans)
        sigs = [s for s in aggregate_cycles([during]) if s.addr in looped]
        assert sigs
        for s in sigs:
            assert verify_routing_cycle(s, [during]) is CycleEvidence.CONFIRMED
        for r in [before, *after]:
            assert not find_cycle_pairs(r) and not find_loop_instances(r)
        res.notes.append(f"period 2, spans {sorted(set(spans))[:3]}..., confirmed")

        _, _, during0, _ = _cycle_run("constant_zero")
        sigs0 = [s for s in aggregate_cycles([during0]) if s.addr in looped]
        assert sigs0
        for s in sigs0:
            assert verify_routing_cycle(s, [during0]) is CycleEvidence.COUNTER_UNAVAILABLE
        res.notes.append("constant-zero: counter_unavailable")


# 8 ---------------------------------------------------------------------------------


def _ends_unreachable(route: MeasuredRoute, positions) -> bool:
    answered = [i for i, h in enumerate(route.hops) if h.addr is not None]
    last = answered[-1]
    return positions[-1] == last and route.hops[last].icmp_type in (ICMP_UNREACH,
                                                                   ICMP_SOURCE_QUENCH)


def test_criterion_08_interrupted():
    with criterion(8, "unreachable emitter yields interrupted routes", 20) as res:
        sc = unreachable(probability=0.2)
        _, classic, paris = _campaign(sc, 500, seed=8)
        classified = classify(classic, paris)
        checked = 0
        for ds in (classic, paris):
            for route in ds:
                for inst in find_loop_instances(route):
                    pos = list(range(inst.start, inst.start + inst.n + 1))
                    if _ends_unreachable(route, pos):
                        checked += 1
                        key = (inst.addr, route.destination)
                        assert classified.labels[Kind.LOOP_SIGNATURES][key] is Cause.INTERRUPTED
                for p in find_cycle_pairs(route):
                    if _ends_unreachable(route, [p.i, p.j]):
                        checked += 1
                        key = (p.addr, route.destination)
                        assert classified.labels[Kind.CYCLE_SIGNATURES][key] is Cause.INTERRUPTED
        assert checked > 0
        for kind in Kind:
            assert Cause.FAKE not in classified.labels[kind].values()
            assert Cause.ZERO_TTL not in classified.labels[kind].values()
        res.notes.append(f"{checked} unreachable-terminated structures, all interrupted")


# 9 ---------------------------------------------------------------------------------


def _random_route_set(rng: random.Random) -> list[MeasuredRoute]:
    alphabet = [f"10.0.0.{i}" for i in range(1, rng.randint(2, 8) + 1)]
    dests = ["198.51.100.1", "198.51.100.2", "198.51.100.3"][:rng.randint(1, 3)]
    out = []
    for rnd in range(rng.randint(1, 10)):
        seq = [None if rng.random() < 0.1 else rng.choice(alphabet)
               for _ in range(rng.randint(0, 10))]
        out.append(MeasuredRoute.from_addresses(rng.choice(dests), seq, round=rnd))
    return out


def test_criterion_09_oracle_equivalence():
    with criterion(9, "detectors match brute-force references on 10,000 route sets", 60) as res:
        rng = random.Random(9)
        mismatches = 0
        for _ in range(10_000):
            rs = _random_route_set(rng)
            bd: dict = {}
            for r in rs:
                bd.setdefault(r.destination, []).append(list(r.addresses))
                s = list(r.addresses)
                mismatches += [tuple(x) for x in find_loop_instances(s)] != loops_oracle(s)
                mismatches += [tuple(x) for x in find_cycle_pairs(s)] != cycle_pairs_oracle(s)
                got = sorted(((p.block, p.start, p.repeats) for p in find_periodic_cycles(s)),
                             key=lambda c: (c[1], len(c[0])))
                mismatches += got != periodic_oracle(s)
            loops = {s.key: (s.instance_count, s.max_length, s.routes_to_d,
                             s.routes_containing_r, s.routes_containing_loop)
                     for s in aggregate_loops(rs)}
            mismatches += loops != loop_signatures_oracle(bd)
            cycles = {s.key: (s.instance_count, s.length, s.span, s.routes_containing_r)
                      for s in aggregate_cycles(rs)}
            mismatches += cycles != cycle_signatures_oracle(bd)
            diamonds = {d.key: (d.global_size, d.one_destination_size, d.d_diamond_sizes)
                        for d in find_diamonds(rs)}
            mismatches += diamonds != diamond_classes_oracle(bd)
        res.notes.append(f"{mismatches} mismatches")
        assert mismatches == 0


# 10 --------------------------------------------------------------------------------


def test_criterion_10_worked_examples():
    with criterion(10, "worked examples (loops, cycles, diamonds)") as res:
        loops = aggregate_loops(LOOP_EXAMPLE)
        assert len(loops) == 2 and sum(s.instance_count for s in loops) == 4
        cyc = {s.key: s for s in aggregate_cycles(CYCLE_EXAMPLE)}[("r", D2)]
        assert (cyc.length, cyc.span) == (3, 4)
        dia = {d.key: d for d in find_diamonds(DIAMOND_EXAMPLE)}
        gl = dia[("G0", "L0")]
        assert gl.d_diamond_sizes == {D1: 3, D2: 2} and gl.one_destination_size == 3
        ad = dia[("A0", "D0")]
        assert ad.is_global and not ad.is_one_destination
        res.notes.append("exact match")


# 11 --------------------------------------------------------------------------------


def test_criterion_11_probabilities():
    with criterion(11, "probability utilities") as res:
        p = identical_path_probability(2, 4)
        assert p.exact == Fraction(1, 8) and p.value == 0.125
        for k in range(1, 7):
            for n in range(1, 7):
                assert missing_router_probability(k, n).exact == missing_router_oracle(k, n)
        assert identical_path_probability(3, 2).exact == identical_path_oracle(3, 2)
        res.notes.append(f"missing_router(4,4) = {missing_router_probability(4, 4).exact}")


# 12 --------------------------------------------------------------------------------


def test_criterion_12_determinism(tmp_path, capsys):
    with criterion(12, "seeded sim-run and reports are byte-identical") as res:
        files = []
        for name in ("one", "two"):
            prefix = tmp_path / name
            assert cli.main(["sim-run", str(TOPOLOGIES / "mixed.json"), "--rounds", "10",
                             "--seed", "12", "--output-prefix", str(prefix)]) == 0
            c, p = f"{prefix}.classic.jsonl", f"{prefix}.paris.jsonl"
            outs = [Path(c).read_bytes(), Path(p).read_bytes()]
            for cmd in (["analyze", c], ["compare", c, p], ["report", c, p]):
                out = tmp_path / f"{name}.{cmd[0]}.csv"
                assert cli.main([*cmd, "--format", "csv", "-o", str(out)]) == 0
                outs.append(out.read_bytes())
            files.append(outs)
        assert files[0] == files[1]
        assert files[0][0] and files[0][1]
        res.notes.append("traces + analyze/compare/report CSV identical")

