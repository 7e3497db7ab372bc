"""Driving a trace toward one destination over an abstract transport."""

from __future__ import annotations

import enum
import logging
import random
import struct
import threading
from dataclasses import dataclass, field
from typing import Protocol as TypingProtocol

from . import wire
from .tracestore import HopRecord, MeasuredRoute, ProbeSlot, StopReason
from .wire import Mode, ProbePacket, Protocol, ResponseInfo, Session

log = logging.getLogger(__name__)

SCOUT_TTL = 64
SCOUT_MARGIN = 2
MAX_IN_FLIGHT = 64
PARIS_PORT_RANGE = (10_000, 60_000)


class Strategy(str, enum.Enum):
    PACKET_BY_PACKET = "packet-by-packet"
    HOP_BY_HOP = "hop-by-hop"
    CONCURRENT = "concurrent"
    SCOUT = "scout"


class ConfigError(ValueError):
    pass


class TransportError(RuntimeError):
    pass


@dataclass
class TraceConfig:
    protocol: Protocol = Protocol.UDP
    mode: Mode = Mode.PARIS
    probes_per_hop: int = 3
    min_ttl: int = 1
    max_ttl: int = 36
    timeout: float = 2.0
    inter_probe_delay: float = 0.05
    star_gap_stop: int = 8
    strategy: Strategy = Strategy.PACKET_BY_PACKET

    def __post_init__(self) -> None:
        self.protocol = Protocol(self.protocol)
        self.mode = Mode(self.mode)
        self.strategy = Strategy(self.strategy)

    def validate(self) -> None:
        if not 1 <= self.min_ttl <= self.max_ttl <= 255:
            raise ConfigError(f"need 1 <= min_ttl <= max_ttl <= 255, got {self.min_ttl}..{self.max_ttl}")
        if self.probes_per_hop < 1:
            raise ConfigError("probes_per_hop must be >= 1")
        if self.star_gap_stop < 1:
            raise ConfigError("star_gap_stop must be >= 1")
        if self.timeout <= 0 or self.inter_probe_delay < 0:
            raise ConfigError("timeout must be positive and delay non-negative")
        if self.protocol is Protocol.TCP and self.mode is Mode.CLASSIC:
            raise ConfigError("TCP probing exists only in paris mode")


class Transport(TypingProtocol):
    """What a trace needs from the network: a live socket pair or a simulator."""

    source_address: str

    def send(self, probe: ProbePacket) -> float:
        """Emit a probe, returning its send time."""
        ...

    def receive(self, deadline: float) -> tuple[bytes, float] | None:
        """Next response arriving no later than ``deadline``, with its arrival time."""
        ...

    def now(self) -> float: ...

    def pause(self, seconds: float) -> None: ...


def new_session(
    src: str, dst: str, rng: random.Random | None = None, *, tos: int = 0
) -> Session:
    """Session with a random identifier and ports drawn from [10000, 60000]."""
    rng = rng or random.Random()
    return Session(
        src_addr=src,
        dst_addr=dst,
        session_id=rng.randrange(1, 0x8000),
        src_port=rng.randint(*PARIS_PORT_RANGE),
        dst_port=rng.randint(*PARIS_PORT_RANGE),
        tos=tos,
    )


# -- response matching -------------------------------------------------------


@dataclass
class Outstanding:
    probe: ProbePacket
    slot: int
    sent_at: float
    echo_key: tuple[int, int] | None = None


class MatchTable:
    """In-flight probes keyed by (session_id, probe_id).

    Safe for one sender and one receiver working concurrently.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._pending: dict[tuple[int, int], Outstanding] = {}
        self._echo: dict[tuple[int, int], tuple[int, int]] = {}
        self._answered: set[tuple[int, int]] = set()
        self.unmatched = 0
        self.duplicates = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._pending)

    def add(self, probe: ProbePacket, slot: int, sent_at: float) -> Outstanding:
        key = (probe.session_id, probe.probe_id)
        echo = None
        if probe.protocol is Protocol.ICMP:
            echo = struct.unpack("!HH", probe.octets[24:28])
        entry = Outstanding(probe, slot, sent_at, echo)
        with self._lock:
            self._pending[key] = entry
            self._answered.discard(key)
            if echo is not None:
                self._echo[echo] = key
        return entry

    def expire(self, probe: ProbePacket) -> None:
        key = (probe.session_id, probe.probe_id)
        with self._lock:
            entry = self._pending.pop(key, None)
            if entry and entry.echo_key:
                self._echo.pop(entry.echo_key, None)

    def outstanding(self) -> list[Outstanding]:
        with self._lock:
            return list(self._pending.values())

    def match(self, info: ResponseInfo) -> Outstanding | None:
        with self._lock:
            if info.echo_identifier is not None:
                key = self._echo.get((info.echo_identifier, info.echo_sequence))
            elif info.quoted_probe_id is not None:
                key = (info.quoted_session_id, info.quoted_probe_id)
            else:
                key = None
            entry = self._pending.get(key) if key is not None else None
            if entry is not None and info.quoted_probe_id is None:
                # Unquoted replies must come from the traced destination itself.
                if info.responder_addr != entry.probe.flow.dst_addr:
                    entry = None
            if entry is None:
                if key in self._answered:
                    self.duplicates += 1
                else:
                    self.unmatched += 1
                return None
            del self._pending[key]
            if entry.echo_key:
                self._echo.pop(entry.echo_key, None)
            self._answered.add(key)
            return entry


def match_response(table: MatchTable, info: ResponseInfo) -> Outstanding | None:
    return table.match(info)


# -- tracing -----------------------------------------------------------------


def _is_destination_reply(info: ResponseInfo, destination: str) -> bool:
    if info.responder_addr != destination:
        return False
    if info.tcp_flags is not None or info.icmp_type == wire.ICMP_ECHO_REPLY:
        return True
    return info.icmp_type == wire.ICMP_UNREACH and info.icmp_code == wire.UNREACH_PORT


@dataclass
class _Trace:
    destination: str
    config: TraceConfig
    transport: Transport
    session: Session
    table: MatchTable = field(default_factory=MatchTable)
    slots: dict[int, list[ProbeSlot | None]] = field(default_factory=dict)
    terminal: dict[int, StopReason] = field(default_factory=dict)
    next_index: int = 0
    first_flow: wire.FlowKey | None = None

    def __post_init__(self) -> None:
        self.next_index = 1 if self.config.mode is Mode.PARIS else 0

    def _craft(self, ttl: int) -> ProbePacket:
        idx = self.next_index
        self.next_index += 1
        return wire.craft_probe(self.config.protocol, self.config.mode, self.session, idx, ttl)

    def send(self, ttl: int, slot: int) -> Outstanding:
        probe = self._craft(ttl)
        if self.first_flow is None:
            self.first_flow = probe.flow
        try:
            sent_at = self.transport.send(probe)
        except OSError as e:
            raise TransportError(str(e)) from e
        self.slots.setdefault(ttl, [None] * self.config.probes_per_hop)
        return self.table.add(probe, slot, sent_at)

    def _parse(self, octets: bytes) -> ResponseInfo | None:
        try:
            return wire.parse_response(octets, mode=self.config.mode)
        except wire.WireError:
            self.table.unmatched += 1
            return None

    def _record(self, entry: Outstanding, info: ResponseInfo, arrival: float) -> None:
        ttl = entry.probe.ttl
        self.slots[ttl][entry.slot] = ProbeSlot(
            addr=info.responder_addr,
            rtt=round((arrival - entry.sent_at) * 1e6),
            probe_ttl=info.quoted_probe_ttl,
            response_ttl=info.response_ttl,
            ip_id=info.ip_id,
            icmp_type=info.icmp_type,
            icmp_code=info.icmp_code,
        )
        if _is_destination_reply(info, self.destination):
            self.terminal.setdefault(ttl, StopReason.DESTINATION)
        elif not info.is_time_exceeded:
            self.terminal.setdefault(ttl, StopReason.OTHER_ICMP)

    def receive_one(self, deadline: float) -> Outstanding | None | bool:
        """Process one arrival.  False when nothing arrived before the deadline."""
        got = self.transport.receive(deadline)
        if got is None:
            return False
        octets, arrival = got
        info = self._parse(octets)
        if info is None:
            return None
        entry = self.table.match(info)
        if entry is not None:
            self._record(entry, info, arrival)
        return entry

    def wait_for(self, entries: list[Outstanding], deadline: float) -> None:
        want = {id(e) for e in entries}
        while want:
            got = self.receive_one(deadline)
            if got is False:
                break
            if got is not None:
                want.discard(id(got))
        for e in entries:
            self.table.expire(e.probe)

    def drain(self) -> None:
        now = self.transport.now()
        while self.receive_one(now) is not False:
            pass
        for e in self.table.outstanding():
            if e.sent_at + self.config.timeout <= now:
                self.table.expire(e.probe)

    def resolved(self, ttl: int) -> bool:
        if ttl not in self.slots:
            return False
        pending = {e.probe.ttl for e in self.table.outstanding()}
        return ttl not in pending

    def stop_at(self, upto: int) -> tuple[int, StopReason] | None:
        """First TTL <= upto at which a stop rule fires, scanning resolved hops in order."""
        gap = 0
        for ttl in range(self.config.min_ttl, upto + 1):
            if ttl in self.terminal:
                return ttl, self.terminal[ttl]
            if not self.resolved(ttl):
                return None
            if all(s is None for s in self.slots[ttl]):
                gap += 1
                if gap >= self.config.star_gap_stop:
                    return ttl, StopReason.STAR_GAP
            else:
                gap = 0
            if ttl == self.config.max_ttl:
                return ttl, StopReason.MAX_TTL
        return None

    def route(self, last: int, reason: StopReason, started_at: float) -> MeasuredRoute:
        hops = []
        for ttl in range(self.config.min_ttl, last + 1):
            slots = self.slots.get(ttl, [None] * self.config.probes_per_hop)
            hops.append(HopRecord(ttl, tuple(s or ProbeSlot() for s in slots)))
        return MeasuredRoute(
            tool=self.config.mode,
            destination=self.destination,
            hops=tuple(hops),
            started_at=round(started_at * 1e6),
            flow=self.first_flow,
            stop_reason=reason,
            source=self.session.src_addr,
        )


def _packet_by_packet(tr: _Trace, max_ttl: int) -> tuple[int, StopReason]:
    cfg = tr.config
    for ttl in range(cfg.min_ttl, max_ttl + 1):
        for slot in range(cfg.probes_per_hop):
            e = tr.send(ttl, slot)
            tr.wait_for([e], e.sent_at + cfg.timeout)
        stop = tr.stop_at(ttl)
        if stop:
            return stop
    return max_ttl, StopReason.MAX_TTL


def _hop_by_hop(tr: _Trace, max_ttl: int) -> tuple[int, StopReason]:
    cfg = tr.config
    for ttl in range(cfg.min_ttl, max_ttl + 1):
        sent = []
        for slot in range(cfg.probes_per_hop):
            if slot:
                tr.transport.pause(cfg.inter_probe_delay)
            sent.append(tr.send(ttl, slot))
        tr.wait_for(sent, sent[-1].sent_at + cfg.timeout)
        stop = tr.stop_at(ttl)
        if stop:
            return stop
    return max_ttl, StopReason.MAX_TTL


def _concurrent(tr: _Trace, max_ttl: int) -> tuple[int, StopReason]:
    cfg = tr.config
    limit = max_ttl
    order = [(ttl, s) for ttl in range(cfg.min_ttl, max_ttl + 1) for s in range(cfg.probes_per_hop)]
    for n, (ttl, slot) in enumerate(order):
        if ttl > limit:
            break
        while len(tr.table) >= MAX_IN_FLIGHT:
            oldest = min(tr.table.outstanding(), key=lambda e: e.sent_at)
            tr.wait_for([oldest], oldest.sent_at + cfg.timeout)
        if n:
            tr.transport.pause(cfg.inter_probe_delay)
            tr.drain()
            limit = min([limit] + [t for t in tr.terminal])
            stop = tr.stop_at(ttl - 1)
            if stop:
                limit = min(limit, stop[0])
            if ttl > limit:
                break
        tr.send(ttl, slot)
    pending = tr.table.outstanding()
    if pending:
        tr.wait_for(pending, max(e.sent_at for e in pending) + cfg.timeout)
    last_sent = max(tr.slots)
    stop = tr.stop_at(min(last_sent, limit))
    return stop or (min(last_sent, limit), StopReason.MAX_TTL)


def scout_probe(destination: str, config: TraceConfig, transport: Transport,
                session: Session | None = None) -> int | None:
    """Estimate the destination's distance from one high-TTL probe."""
    session = session or new_session(transport.source_address, destination)
    tr = _Trace(destination, config, transport, session)
    tr.next_index = 0xFFFE if config.mode is Mode.PARIS else 0xFFFF
    return _scout(tr)


def _scout(tr: _Trace) -> int | None:
    probe = tr._craft(SCOUT_TTL)
    sent_at = tr.transport.send(probe)
    tr.table.add(probe, 0, sent_at)
    deadline = sent_at + tr.config.timeout
    while True:
        got = tr.transport.receive(deadline)
        if got is None:
            tr.table.expire(probe)
            return None
        info = tr._parse(got[0])
        if info is None or tr.table.match(info) is None:
            continue
        if not _is_destination_reply(info, tr.destination):
            return None
        initial = wire.infer_initial_ttl(info.response_ttl)
        return initial - info.response_ttl + 1


def run_trace(
    destination: str,
    config: TraceConfig,
    transport: Transport,
    session: Session | None = None,
) -> MeasuredRoute:
    config.validate()
    session = session or new_session(transport.source_address, destination)
    tr = _Trace(destination, config, transport, session)
    started = transport.now()
    strategy = config.strategy
    max_ttl = config.max_ttl
    if strategy is Strategy.SCOUT:
        estimate = _scout(tr)
        if estimate is None:
            log.debug("scout got no answer from %s, falling back to hop-by-hop", destination)
            strategy = Strategy.HOP_BY_HOP
        else:
            strategy = Strategy.CONCURRENT
            max_ttl = max(config.min_ttl, min(config.max_ttl, estimate + SCOUT_MARGIN))
    runner = {
        Strategy.PACKET_BY_PACKET: _packet_by_packet,
        Strategy.HOP_BY_HOP: _hop_by_hop,
        Strategy.CONCURRENT: _concurrent,
    }[strategy]
    last, reason = runner(tr, max_ttl)
    return tr.route(last, reason, started)
