"""Command-line front end: trace, sim-run, analyze, compare, report."""

from __future__ import annotations

import argparse
import csv
import io
import os
import random
import sys
import tempfile
from collections.abc import Iterable
from pathlib import Path

from . import artifacts, structures
from .campaign import CampaignConfig, sim_run
from .probing import ConfigError, Strategy, TraceConfig, TransportError, new_session, run_trace
from .simnet import SimTransport, Simulator, TopologyError, load_topology_file
from .tracestore import (
    Dataset,
    HopRecord,
    MalformedLineError,
    MeasuredRoute,
    group_dataset,
    iter_lines,
    read_routes,
    serialize_route,
)
from .wire import ICMP_SOURCE_QUENCH, ICMP_UNREACH, UNREACH_PORT, Mode, Protocol

EXIT_USAGE = 1
EXIT_TRANSPORT = 2
EXIT_TOPOLOGY = 3
EXIT_MALFORMED = 4
EXIT_MISMATCH = 5

SEED_ENV = "FLOWTRACE_SEED"
KINDS = ("loops", "cycles", "diamonds")
_UNREACH_FLAGS = {0: "!N", 1: "!H", 2: "!P", 13: "!X"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- output helpers --------------------------------------------------------------


def atomic_write(path: str | Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, output: str | None) -> None:
    if output:
        atomic_write(output, text)
    else:
        sys.stdout.write(text)


def _flags(hop_slot, destination: str) -> str:
    out = []
    if hop_slot.probe_ttl is not None and hop_slot.probe_ttl != 1:
        out.append(f"!T{hop_slot.probe_ttl}")
    if hop_slot.icmp_type == ICMP_SOURCE_QUENCH:
        out.append("!Q")
    elif hop_slot.icmp_type == ICMP_UNREACH:
        if not (hop_slot.icmp_code == UNREACH_PORT and hop_slot.addr == destination):
            out.append(_UNREACH_FLAGS.get(hop_slot.icmp_code, f"!<{hop_slot.icmp_code}>"))
    return " ".join(out)


def format_hop(hop: HopRecord, destination: str) -> str:
    """One listing line: hop number, then address and RTT per probe with flags."""
    parts = [str(hop.ttl)]
    shown = None
    for slot in hop.slots:
        if slot.is_star:
            parts.append("*")
            continue
        if slot.addr != shown:
            parts.append(slot.addr)
            shown = slot.addr
        text = f"{slot.rtt / 1000:.3f} ms" if slot.rtt is not None else "? ms"
        flags = _flags(slot, destination)
        parts.append(f"{text} {flags}" if flags else text)
    return "  ".join(parts)


def format_route(route: MeasuredRoute) -> str:
    return "".join(format_hop(h, route.destination) + "\n" for h in route.hops)


# -- analysis rendering ------------------------------------------------------------


def _table(rows: list[list], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        return buf.getvalue()
    if len(rows) == 1:
        return "  ".join(map(str, rows[0])) + "\n(none)\n"
    cells = [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n" for r in cells)


def _f(x: float) -> str:
    return f"{x:.4f}"


def analyze_text(dataset: Dataset, kinds: Iterable[str], fmt: str) -> str:
    """Signature tables, size distributions and summary counts for a trace file."""
    kinds = set(kinds)
    sections: list[tuple[str, list[list]]] = []
    summary = [["metric", "value"], ["routes", len(dataset)],
               ["destinations", len(dataset.destinations)]]
    if "loops" in kinds:
        sigs = structures.aggregate_loops(dataset)
        rows = [["addr", "destination", "instances", "max_n", "routes_to_d",
                 "routes_with_addr", "routes_with_loop", "appearance", "conditional", "class"]]
        rows += [[s.addr, s.destination, s.instance_count, s.max_length, s.routes_to_d,
                  s.routes_containing_r, s.routes_containing_loop, _f(s.appearance_frequency),
                  _f(s.conditional_appearance_frequency), s.loop_class.value] for s in sigs]
        sections.append(("loop signatures", rows))
        inst = structures.loop_instances_by_signature(dataset)
        hist = structures.histogram(i.n for v in inst.values() for _, i in v)
        sections.append(("loop length distribution", [["n", "instances"], *map(list, hist)]))
        summary += [["loop_signatures", len(sigs)],
                    ["loop_instances", sum(len(v) for v in inst.values())],
                    ["routes_with_loop", _f(structures.fraction_of_routes_with_loop(dataset))]]
    if "cycles" in kinds:
        sigs = structures.aggregate_cycles(dataset)
        rows = [["addr", "destination", "instances", "length", "span", "routes_to_d",
                 "routes_with_addr", "routes_with_cycle", "appearance", "conditional",
                 "period", "block", "repeats"]]
        for s in sigs:
            per = s.periodic or ("", (), "")
            rows.append([s.addr, s.destination, s.instance_count, s.length, s.span,
                         s.routes_to_d, s.routes_containing_r, s.routes_containing_cycle,
                         _f(s.appearance_frequency), _f(s.conditional_appearance_frequency),
                         per[0], " ".join(per[1]), per[2]])
        sections.append(("cycle signatures", rows))
        sections.append(("cycle span distribution",
                         [["span", "signatures"], *map(list, structures.histogram(s.span for s in sigs))]))
        summary += [["cycle_signatures", len(sigs)],
                    ["cycle_instances", sum(s.instance_count for s in sigs)],
                    ["routes_with_cycle", _f(structures.fraction_of_routes_with_cycle(dataset))]]
    if "diamonds" in kinds:
        diamonds = structures.find_diamonds(dataset)
        rows = [["head", "tail", "global_size", "one_destination_size", "d_diamonds"]]
        for d in diamonds:
            dd = ";".join(f"{k}={v}" for k, v in sorted(d.d_diamond_sizes.items()))
            rows.append([d.head, d.tail, d.global_size, d.one_destination_size, dd])
        sections.append(("diamonds", rows))
        sections.append(("global diamond size distribution",
                         [["size", "diamonds"],
                          *map(list, structures.histogram(d.global_size for d in diamonds))]))
        sections.append(("one-destination diamond size distribution",
                         [["size", "diamonds"],
                          *map(list, structures.histogram(d.one_destination_size
                                                          for d in diamonds if d.is_one_destination))]))
        m = structures.diamond_membership(dataset)
        summary += [["global_diamonds", len(diamonds)],
                    ["one_destination_diamonds", sum(d.is_one_destination for d in diamonds)],
                    ["addresses_observed", m.observed], ["addr_in_head", _f(m.head)],
                    ["addr_in_core", _f(m.core)], ["addr_in_tail", _f(m.tail)],
                    ["addr_in_any", _f(m.any)]]
    sections.append(("summary", summary))
    return "\n".join(f"# {title}\n{_table(rows, fmt)}" for title, rows in sections)


# -- subcommands -----------------------------------------------------------------


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    try:
        return int(env) if env else 0
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def cmd_trace(args) -> int:
    config = TraceConfig(
        protocol=Protocol[args.proto.upper()], mode=Mode(args.mode), probes_per_hop=args.queries,
        min_ttl=args.first, max_ttl=args.max, timeout=args.wait, inter_probe_delay=args.delay,
        star_gap_stop=args.gap, strategy=Strategy(args.strategy),
    )
    try:
        config.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from None
    rng = random.Random(_seed(args))
    if args.sim:
        topo = load_topology_file(args.sim)
        transport = SimTransport(Simulator(topo, seed=topo.seed + _seed(args)))
        route = _run(args.destination, config, transport, rng)
    else:
        from .live import RawSocketTransport

        with RawSocketTransport(args.destination) as transport:
            route = _run(args.destination, config, transport, rng)
    sys.stdout.write(format_route(route))
    if args.output:
        existing = Path(args.output).read_text(encoding="utf-8") if os.path.exists(args.output) else ""
        atomic_write(args.output, existing + serialize_route(route) + "\n")
    return 0


def _run(destination: str, config: TraceConfig, transport, rng: random.Random) -> MeasuredRoute:
    session = new_session(transport.source_address, destination, rng)
    return run_trace(destination, config, transport, session)


def cmd_sim_run(args) -> int:
    topo = load_topology_file(args.topology)
    if args.destinations:
        dests = [d for d in args.destinations.split(",") if d]
        unknown = [d for d in dests if d not in topo.hosts]
        if unknown:
            raise UsageError(f"not a host in the topology: {', '.join(unknown)}")
    else:
        dests = list(topo.hosts)
    if args.rounds < 0 or args.parallel < 1:
        raise UsageError("--rounds must be >= 0 and --parallel >= 1")
    cfg = CampaignConfig(rounds=args.rounds, seed=_seed(args), parallel=args.parallel,
                         protocol=Protocol[args.proto.upper()], max_ttl=args.max)
    classic, paris = sim_run(topo, dests, cfg, workers=args.workers)
    atomic_write(f"{args.output_prefix}.classic.jsonl", "".join(iter_lines(classic)))
    atomic_write(f"{args.output_prefix}.paris.jsonl", "".join(iter_lines(paris)))
    print(f"{len(classic)} classic and {len(paris)} paris routes written", file=sys.stderr)
    return 0


def _kinds(text: str) -> list[str]:
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise UsageError(f"--kinds takes a subset of {','.join(KINDS)}")
    return kinds


def cmd_analyze(args) -> int:
    ds = group_dataset(read_routes(args.file)).expanded()
    _emit(analyze_text(ds, _kinds(args.kinds), args.format), args.output)
    return 0


def _pair(args) -> tuple[Dataset, Dataset]:
    return (group_dataset(read_routes(args.classic)).expanded(),
            group_dataset(read_routes(args.paris)).expanded())


def cmd_compare(args) -> int:
    report = artifacts.compare_datasets(*_pair(args))
    text = artifacts.comparison_csv(report) if args.format == "csv" else artifacts.comparison_text(report)
    _emit(text, args.output)
    return 0


def cmd_report(args) -> int:
    table = artifacts.summary_report(artifacts.classify(*_pair(args), window=args.window))
    _emit(table.to_csv() if args.format == "csv" else table.to_text(), args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowtrace", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("trace", help="trace the route to one destination")
    t.add_argument("destination")
    t.add_argument("--mode", choices=[m.value for m in Mode], default="paris")
    t.add_argument("--proto", choices=["udp", "icmp", "tcp"], default="udp")
    t.add_argument("-q", "--queries", type=int, default=3, help="probes per hop")
    t.add_argument("-f", "--first", type=int, default=1, help="first TTL")
    t.add_argument("-m", "--max", type=int, default=36, help="maximum TTL")
    t.add_argument("-w", "--wait", type=float, default=2.0, help="response timeout, seconds")
    t.add_argument("-z", "--delay", type=float, default=0.05, help="pause between probes, seconds")
    t.add_argument("--gap", type=int, default=8, help="stop after this many all-star hops")
    t.add_argument("--strategy", choices=[s.value for s in Strategy], default="packet-by-packet")
    t.add_argument("--sim", metavar="TOPOLOGY", help="trace through the simulator instead of the network")
    t.add_argument("--seed", type=int)
    t.add_argument("-o", "--output", metavar="TRACEFILE", help="append the route to this trace file")
    t.set_defaults(func=cmd_trace)

    s = sub.add_parser("sim-run", help="run a paris + classic campaign on a simulated topology")
    s.add_argument("topology")
    s.add_argument("--destinations", help="comma-separated host addresses (default: all hosts)")
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--parallel", type=int, default=32, help="destination shards")
    s.add_argument("--workers", type=int, default=1, help="processes used to run the shards")
    s.add_argument("--proto", choices=["udp", "icmp", "tcp"], default="udp")
    s.add_argument("-m", "--max", type=int, default=36)
    s.add_argument("--seed", type=int)
    s.add_argument("--output-prefix", default="campaign")
    s.set_defaults(func=cmd_sim_run)

    a = sub.add_parser("analyze", help="loops, cycles and diamonds in a trace file")
    a.add_argument("file")
    a.add_argument("--kinds", default="loops,cycles,diamonds")
    a.add_argument("--format", choices=["text", "csv"], default="text")
    a.add_argument("-o", "--output")
    a.set_defaults(func=cmd_analyze)

    for name, func, helptext in (("compare", cmd_compare, "structures that differ between tools"),
                                 ("report", cmd_report, "cause breakdown of all structures")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("classic")
        c.add_argument("paris")
        c.add_argument("--format", choices=["text", "csv"], default="text")
        c.add_argument("-o", "--output")
        if name == "report":
            c.add_argument("--window", type=int, default=artifacts.IP_ID_WINDOW,
                           help="IP ID window for same-router evidence")
        c.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"flowtrace: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TransportError as e:
        print(f"flowtrace: transport failure: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except TopologyError as e:
        print(f"flowtrace: topology error: {e}", file=sys.stderr)
        return EXIT_TOPOLOGY
    except MalformedLineError as e:
        print(f"flowtrace: malformed input: {e}", file=sys.stderr)
        return EXIT_MALFORMED
    except artifacts.DestinationMismatch as e:
        print(f"flowtrace: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except FileNotFoundError as e:
        print(f"flowtrace: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
