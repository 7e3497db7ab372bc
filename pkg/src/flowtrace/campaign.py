"""Measurement campaigns over the simulator: paris then classic, per destination, per round."""

from __future__ import annotations

import dataclasses
import random
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor

from .probing import Strategy, TraceConfig, new_session, run_trace
from .simnet import SimTransport, Simulator, Topology
from .tracestore import MeasuredRoute
from .wire import Mode, Protocol

CLASSIC_EXTRA_HOPS = 3

# Called before each trace with (simulator, round, destination, mode).
Hook = Callable[[Simulator, int, str, Mode], None]


@dataclasses.dataclass
class CampaignConfig:
    rounds: int = 1
    seed: int = 0
    parallel: int = 32
    protocol: Protocol = Protocol.UDP
    max_ttl: int = 36
    star_gap_stop: int = 8
    strategy: Strategy = Strategy.PACKET_BY_PACKET


def shards(destinations: Sequence[str], parallel: int) -> list[list[str]]:
    p = max(1, parallel)
    return [list(destinations[i::p]) for i in range(p) if destinations[i::p]]


def _run_shard(topology: Topology, dests: list[str], index: int, cfg: CampaignConfig,
               hook: Hook | None = None) -> list[tuple[int, str, MeasuredRoute, MeasuredRoute]]:
    sim = Simulator(topology, seed=topology.seed + cfg.seed + index)
    transport = SimTransport(sim)
    rng = random.Random(cfg.seed * 1_000_003 + index)
    out = []
    for rnd in range(cfg.rounds):
        for dest in dests:
            routes = {}
            for mode in (Mode.PARIS, Mode.CLASSIC):
                if mode is Mode.PARIS:
                    max_ttl = cfg.max_ttl
                else:
                    answered = [h.ttl for h in routes[Mode.PARIS].hops if not h.all_stars]
                    max_ttl = min(cfg.max_ttl, max(answered, default=0) + CLASSIC_EXTRA_HOPS)
                tc = TraceConfig(protocol=cfg.protocol, mode=mode, probes_per_hop=1,
                                 max_ttl=max_ttl, star_gap_stop=cfg.star_gap_stop,
                                 strategy=cfg.strategy)
                if hook:
                    hook(sim, rnd, dest, mode)
                session = new_session(transport.source_address, dest, rng)
                route = run_trace(dest, tc, transport, session)
                routes[mode] = dataclasses.replace(route, round=rnd)
            out.append((rnd, dest, routes[Mode.CLASSIC], routes[Mode.PARIS]))
    return out


def _shard_job(args) -> list:
    return _run_shard(*args)


def sim_run(
    topology: Topology,
    destinations: Sequence[str],
    cfg: CampaignConfig,
    *,
    hook: Hook | None = None,
    workers: int = 1,
) -> tuple[list[MeasuredRoute], list[MeasuredRoute]]:
    """Classic and paris routes, ordered by round then destination list position.

    Destinations are split into ``cfg.parallel`` shards, each probed by its own
    simulator seeded with the shard index.  ``workers`` > 1 runs shards in
    separate processes; the output does not depend on it.
    """
    parts = shards(list(destinations), cfg.parallel)
    jobs = [(topology, dests, i, cfg) for i, dests in enumerate(parts)]
    if workers > 1 and hook is None and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_shard_job, jobs))
    else:
        results = [_run_shard(*job, hook) for job in jobs]
    order = {d: i for i, d in enumerate(destinations)}
    rows = sorted((r for part in results for r in part), key=lambda r: (r[0], order[r[1]]))
    return [r[2] for r in rows], [r[3] for r in rows]
