"""Probe construction and ICMP response parsing.

Everything here works on raw IPv4 datagrams (``bytes``) laid out per
RFC 791/768/792/793, big-endian throughout.  Probes never carry IP options,
so the part of a probe quoted back by an ICMP error is always the 20-octet
IP header plus the first 8 transport octets.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, field

QUOTE_LEN = 28
IP_HDR_LEN = 20

CLASSIC_BASE_DPORT = 33435
CLASSIC_SPORT_OFFSET = 32768
TCP_DEFAULT_DPORT = 80

ICMP_ECHO_REPLY = 0
ICMP_UNREACH = 3
ICMP_SOURCE_QUENCH = 4
ICMP_ECHO = 8
ICMP_TIME_EXCEEDED = 11

UNREACH_NET = 0
UNREACH_HOST = 1
UNREACH_PROTOCOL = 2
UNREACH_PORT = 3

TCP_SYN = 0x02
TCP_RST = 0x04
TCP_ACK = 0x10

_QUOTING_TYPES = frozenset({ICMP_TIME_EXCEEDED, ICMP_UNREACH, ICMP_SOURCE_QUENCH})


class WireError(ValueError):
    """Base class for malformed or unsupported packets."""


class NotICMPError(WireError):
    pass


class UnsupportedProtocolError(WireError):
    pass


class TruncatedHeaderError(WireError):
    pass


class ProbeIdError(WireError):
    """UDP identifiers 0x0000 and 0xFFFF cannot be carried in the checksum."""


class PayloadTooShortError(WireError):
    pass


class Protocol(enum.IntEnum):
    ICMP = 1
    TCP = 6
    UDP = 17


class Mode(str, enum.Enum):
    CLASSIC = "classic"
    PARIS = "paris"


def ip_to_int(addr: str) -> int:
    return int(ipaddress.IPv4Address(addr))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


# -- checksums ---------------------------------------------------------------


def ones_sum(data: bytes) -> int:
    """One's-complement sum of 16-bit big-endian words, folded to 16 bits."""
    if len(data) % 2:
        data = data + b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data: bytes) -> int:
    return ~ones_sum(data) & 0xFFFF


def ones_add(a: int, b: int) -> int:
    s = a + b
    return (s & 0xFFFF) + (s >> 16)


def ones_sub(a: int, b: int) -> int:
    return ones_add(a, ~b & 0xFFFF)


def _pseudo_header(src: str, dst: str, proto: int, length: int) -> bytes:
    return struct.pack(
        "!4s4sBBH",
        ipaddress.IPv4Address(src).packed,
        ipaddress.IPv4Address(dst).packed,
        0,
        proto,
        length,
    )


def transport_checksum(src: str, dst: str, proto: int, segment: bytes) -> int:
    return internet_checksum(_pseudo_header(src, dst, proto, len(segment)) + segment)


# -- flow keys ---------------------------------------------------------------


@dataclass(frozen=True)
class FlowKey:
    """The header fields a per-flow load balancer may hash.

    UDP/TCP keys carry ports; ICMP keys carry the code and checksum instead.
    The ICMP type is deliberately left out.
    """

    src_addr: str
    dst_addr: str
    protocol: Protocol
    tos: int = 0
    src_port: int | None = None
    dst_port: int | None = None
    icmp_code: int | None = None
    icmp_checksum: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        ports = self.src_port is not None and self.dst_port is not None
        icmp = self.icmp_code is not None and self.icmp_checksum is not None
        if self.protocol is Protocol.ICMP:
            if not icmp or self.src_port is not None or self.dst_port is not None:
                raise ValueError("ICMP flow key needs icmp_code/icmp_checksum only")
        elif not ports or self.icmp_code is not None or self.icmp_checksum is not None:
            raise ValueError(f"{self.protocol.name} flow key needs ports only")

    FIELDS = (
        "src_addr",
        "dst_addr",
        "protocol",
        "tos",
        "src_port",
        "dst_port",
        "icmp_code",
        "icmp_checksum",
    )

    def field_values(self, mask: frozenset[str] | set[str] | None = None) -> list[int]:
        """Integer values of the masked fields, in a fixed order (absent fields skipped)."""
        out = []
        for name in self.FIELDS:
            if mask is not None and name not in mask:
                continue
            value = getattr(self, name)
            if value is None:
                continue
            if name in ("src_addr", "dst_addr"):
                value = ip_to_int(value)
            out.append(int(value))
        return out

    def to_dict(self) -> dict:
        d = {
            "src_addr": self.src_addr,
            "dst_addr": self.dst_addr,
            "protocol": self.protocol.name,
            "tos": self.tos,
        }
        if self.protocol is Protocol.ICMP:
            d["icmp_code"] = self.icmp_code
            d["icmp_checksum"] = self.icmp_checksum
        else:
            d["src_port"] = self.src_port
            d["dst_port"] = self.dst_port
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FlowKey:
        return cls(
            src_addr=d["src_addr"],
            dst_addr=d["dst_addr"],
            protocol=Protocol[d["protocol"]],
            tos=d.get("tos", 0),
            src_port=d.get("src_port"),
            dst_port=d.get("dst_port"),
            icmp_code=d.get("icmp_code"),
            icmp_checksum=d.get("icmp_checksum"),
        )


# -- IPv4 ----------------------------------------------------------------------


@dataclass
class IPHeader:
    src: str
    dst: str
    protocol: int
    ttl: int
    ident: int = 0
    tos: int = 0
    total_length: int = IP_HDR_LEN
    flags_frag: int = 0
    checksum: int = 0

    def pack(self, *, fill_checksum: bool = True) -> bytes:
        hdr = struct.pack(
            "!BBHHHBBH4s4s",
            0x45,
            self.tos,
            self.total_length,
            self.ident,
            self.flags_frag,
            self.ttl,
            self.protocol,
            0,
            ipaddress.IPv4Address(self.src).packed,
            ipaddress.IPv4Address(self.dst).packed,
        )
        if fill_checksum:
            self.checksum = internet_checksum(hdr)
        return hdr[:10] + struct.pack("!H", self.checksum) + hdr[12:]

    @classmethod
    def unpack(cls, data: bytes) -> IPHeader:
        if len(data) < IP_HDR_LEN:
            raise TruncatedHeaderError(f"IPv4 header needs 20 octets, got {len(data)}")
        vihl, tos, total, ident, ff, ttl, proto, csum, src, dst = struct.unpack(
            "!BBHHHBBH4s4s", data[:IP_HDR_LEN]
        )
        if vihl >> 4 != 4:
            raise WireError(f"not IPv4 (version {vihl >> 4})")
        if vihl & 0x0F != 5:
            raise WireError("IP options are not supported")
        return cls(
            src=str(ipaddress.IPv4Address(src)),
            dst=str(ipaddress.IPv4Address(dst)),
            protocol=proto,
            ttl=ttl,
            ident=ident,
            tos=tos,
            total_length=total,
            flags_frag=ff,
            checksum=csum,
        )


def ip_datagram(hdr: IPHeader, payload: bytes) -> bytes:
    hdr.total_length = IP_HDR_LEN + len(payload)
    return hdr.pack() + payload


def with_ttl(octets: bytes, ttl: int) -> bytes:
    """Copy of a datagram with a new TTL and a recomputed header checksum."""
    hdr = bytearray(octets[:IP_HDR_LEN])
    hdr[8] = ttl
    hdr[10:12] = b"\x00\x00"
    hdr[10:12] = struct.pack("!H", internet_checksum(bytes(hdr)))
    return bytes(hdr) + octets[IP_HDR_LEN:]


# -- sessions and probes -----------------------------------------------------


@dataclass
class Session:
    """Parameters held fixed for every probe of one trace.

    ``session_id`` plays the role of the process identifier.  In paris mode it
    travels in the IP Identification field; classic UDP folds it into the
    source port and classic ICMP uses it as the Echo Identifier.
    """

    src_addr: str
    dst_addr: str
    session_id: int
    src_port: int = 33000
    dst_port: int = 33500
    tos: int = 0
    payload_len: int = 2
    tcp_dst_port: int = TCP_DEFAULT_DPORT
    icmp_base_id: int | None = None
    _icmp_target: int | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= self.session_id <= 0xFFFF:
            raise ValueError("session_id must fit in 16 bits")

    @property
    def icmp_identifier(self) -> int:
        return self.session_id if self.icmp_base_id is None else self.icmp_base_id

    @property
    def icmp_target_checksum(self) -> int:
        """The constant ICMP checksum: that of the Sequence = 0 probe."""
        if self._icmp_target is None:
            msg = _icmp_echo(self.icmp_identifier, 0, self._payload())
            self._icmp_target = struct.unpack("!H", msg[2:4])[0]
        return self._icmp_target

    def _payload(self) -> bytes:
        return bytes(self.payload_len)


@dataclass(frozen=True)
class ProbePacket:
    octets: bytes
    ttl: int
    probe_id: int
    session_id: int
    flow: FlowKey
    mode: Mode = Mode.PARIS

    @property
    def protocol(self) -> Protocol:
        return self.flow.protocol


def _icmp_echo(identifier: int, sequence: int, payload: bytes, type_: int = ICMP_ECHO) -> bytes:
    body = struct.pack("!BBHHH", type_, 0, 0, identifier, sequence) + payload
    csum = internet_checksum(body)
    return body[:2] + struct.pack("!H", csum) + body[4:]


def craft_udp_probe(
    mode: Mode | str, session: Session, probe_index: int, ttl: int
) -> ProbePacket:
    mode = Mode(mode)
    if session.payload_len < 2:
        raise PayloadTooShortError("UDP probes need at least a 2-octet payload")
    if mode is Mode.PARIS:
        probe_id = probe_index
        if not 1 <= probe_id <= 0xFFFE:
            raise ProbeIdError(f"probe id {probe_id:#x} outside [0x0001, 0xFFFE]")
        sport, dport, ident = session.src_port, session.dst_port, session.session_id
    else:
        probe_id = probe_index & 0xFFFF
        sport = (session.session_id + CLASSIC_SPORT_OFFSET) & 0xFFFF
        dport = (CLASSIC_BASE_DPORT + probe_index) & 0xFFFF
        ident = probe_index & 0xFFFF
    length = 8 + session.payload_len
    rest = bytes(session.payload_len - 2)
    if mode is Mode.PARIS:
        # Solve the first payload word so the checksum field comes out as probe_id.
        pseudo = _pseudo_header(session.src_addr, session.dst_addr, Protocol.UDP, length)
        base = ones_sum(pseudo + struct.pack("!HHHH", sport, dport, length, 0) + b"\0\0" + rest)
        slot = ones_sub(~probe_id & 0xFFFF, base)
        segment = struct.pack("!HHHHH", sport, dport, length, probe_id, slot) + rest
    else:
        segment = struct.pack("!HHHH", sport, dport, length, 0) + b"\0\0" + rest
        csum = transport_checksum(session.src_addr, session.dst_addr, Protocol.UDP, segment)
        segment = segment[:6] + struct.pack("!H", csum or 0xFFFF) + segment[8:]
    hdr = IPHeader(session.src_addr, session.dst_addr, Protocol.UDP, ttl, ident, session.tos)
    flow = FlowKey(session.src_addr, session.dst_addr, Protocol.UDP, session.tos, sport, dport)
    return ProbePacket(ip_datagram(hdr, segment), ttl, probe_id, session.session_id, flow, mode)


def craft_icmp_probe(
    mode: Mode | str, session: Session, probe_index: int, ttl: int
) -> ProbePacket:
    """Echo Request probe.  Sequence numbers wrap modulo 2**16."""
    mode = Mode(mode)
    seq = probe_index & 0xFFFF
    if mode is Mode.PARIS:
        identifier = ones_sub(session.icmp_identifier, seq)
        ident = session.session_id
    else:
        identifier = session.session_id
        ident = seq
    msg = _icmp_echo(identifier, seq, session._payload())
    csum = struct.unpack("!H", msg[2:4])[0]
    hdr = IPHeader(session.src_addr, session.dst_addr, Protocol.ICMP, ttl, ident, session.tos)
    flow = FlowKey(
        session.src_addr, session.dst_addr, Protocol.ICMP, session.tos,
        icmp_code=0, icmp_checksum=csum,
    )
    return ProbePacket(ip_datagram(hdr, msg), ttl, seq, session.session_id, flow, mode)


def craft_tcp_probe(session: Session, probe_index: int, ttl: int) -> ProbePacket:
    """SYN probe; the Sequence Number holds session_id (high) and probe_id (low)."""
    probe_id = probe_index & 0xFFFF
    seq = (session.session_id << 16) | probe_id
    sport, dport = session.src_port, session.tcp_dst_port
    segment = struct.pack("!HHIIBBHHH", sport, dport, seq, 0, 5 << 4, TCP_SYN, 5840, 0, 0)
    csum = transport_checksum(session.src_addr, session.dst_addr, Protocol.TCP, segment)
    segment = segment[:16] + struct.pack("!H", csum) + segment[18:]
    hdr = IPHeader(session.src_addr, session.dst_addr, Protocol.TCP, ttl, session.session_id, session.tos)
    flow = FlowKey(session.src_addr, session.dst_addr, Protocol.TCP, session.tos, sport, dport)
    return ProbePacket(ip_datagram(hdr, segment), ttl, probe_id, session.session_id, flow)


def craft_probe(
    protocol: Protocol, mode: Mode | str, session: Session, probe_index: int, ttl: int
) -> ProbePacket:
    if protocol is Protocol.UDP:
        return craft_udp_probe(mode, session, probe_index, ttl)
    if protocol is Protocol.ICMP:
        return craft_icmp_probe(mode, session, probe_index, ttl)
    return craft_tcp_probe(session, probe_index, ttl)


def extract_flow_key(octets: bytes) -> FlowKey:
    hdr = IPHeader.unpack(octets)
    t = octets[IP_HDR_LEN:]
    try:
        proto = Protocol(hdr.protocol)
    except ValueError:
        raise UnsupportedProtocolError(f"IP protocol {hdr.protocol}") from None
    if len(t) < 4:
        raise TruncatedHeaderError("transport header truncated")
    if proto is Protocol.ICMP:
        _type, code, csum = struct.unpack("!BBH", t[:4])
        return FlowKey(hdr.src, hdr.dst, proto, hdr.tos, icmp_code=code, icmp_checksum=csum)
    sport, dport = struct.unpack("!HH", t[:4])
    return FlowKey(hdr.src, hdr.dst, proto, hdr.tos, sport, dport)


def verify_packet(octets: bytes) -> bool:
    """True when the IP header and transport checksums all verify."""
    hdr = IPHeader.unpack(octets)
    if internet_checksum(octets[:IP_HDR_LEN]) != 0:
        return False
    seg = octets[IP_HDR_LEN:hdr.total_length]
    if hdr.protocol == Protocol.ICMP:
        return internet_checksum(seg) == 0
    if hdr.protocol == Protocol.UDP and seg[6:8] == b"\0\0":
        return True
    return internet_checksum(_pseudo_header(hdr.src, hdr.dst, hdr.protocol, len(seg)) + seg) == 0


# -- responses ---------------------------------------------------------------


@dataclass(frozen=True)
class ResponseInfo:
    responder_addr: str
    icmp_type: int | None
    icmp_code: int | None
    response_ttl: int
    ip_id: int
    quoted_probe_ttl: int | None = None
    quoted_probe_id: int | None = None
    quoted_session_id: int | None = None
    quoted_flow: FlowKey | None = None
    quote_truncated: bool = False
    echo_identifier: int | None = None
    echo_sequence: int | None = None
    tcp_flags: int | None = None
    return_hops: int | None = None

    @property
    def has_quote(self) -> bool:
        return self.quoted_probe_id is not None

    @property
    def is_time_exceeded(self) -> bool:
        return self.icmp_type == ICMP_TIME_EXCEEDED

    @property
    def is_unreachable_class(self) -> bool:
        return self.icmp_type in (ICMP_UNREACH, ICMP_SOURCE_QUENCH)


def _decode_quote(quote: bytes, mode: Mode) -> tuple[int, int, int, FlowKey]:
    """(probe ttl, probe id, session id, flow) from the 28 quoted octets."""
    hdr = IPHeader.unpack(quote)
    flow = extract_flow_key(quote[:QUOTE_LEN])
    t = quote[IP_HDR_LEN:QUOTE_LEN]
    if hdr.protocol == Protocol.UDP:
        sport, dport, _len, csum = struct.unpack("!HHHH", t)
        if mode is Mode.PARIS:
            return hdr.ttl, csum, hdr.ident, flow
        return (
            hdr.ttl,
            (dport - CLASSIC_BASE_DPORT) & 0xFFFF,
            (sport - CLASSIC_SPORT_OFFSET) & 0xFFFF,
            flow,
        )
    if hdr.protocol == Protocol.ICMP:
        _type, _code, _csum, identifier, seq = struct.unpack("!BBHHH", t)
        session = hdr.ident if mode is Mode.PARIS else identifier
        return hdr.ttl, seq, session, flow
    _sport, _dport, seq = struct.unpack("!HHI", t)
    return hdr.ttl, seq & 0xFFFF, seq >> 16, flow


def infer_initial_ttl(received: int, candidates=(64, 128, 255)) -> int:
    """Smallest conventional initial TTL not below the received value."""
    for c in sorted(candidates):
        if c >= received:
            return c
    return 255


def parse_time_exceeded(
    octets: bytes,
    return_path_model: tuple[int, ...] | None = None,
    *,
    mode: Mode | str = Mode.PARIS,
) -> ResponseInfo:
    """Parse an ICMP response (Time Exceeded, Unreachable, Source Quench, Echo Reply).

    ``mode`` selects how the quoted probe is decoded, since classic and
    paris probes put the identifiers in different fields.  When
    ``return_path_model`` (candidate initial TTLs) is given, the number of
    hops on the return path is estimated from the response TTL.
    """
    mode = Mode(mode)
    hdr = IPHeader.unpack(octets)
    if hdr.protocol != Protocol.ICMP:
        raise NotICMPError(f"IP protocol {hdr.protocol} is not ICMP")
    icmp = octets[IP_HDR_LEN:hdr.total_length]
    if len(icmp) < 8:
        raise TruncatedHeaderError("ICMP header truncated")
    itype, icode = icmp[0], icmp[1]
    ret = None
    if return_path_model:
        ret = infer_initial_ttl(hdr.ttl, return_path_model) - hdr.ttl
    base = dict(
        responder_addr=hdr.src,
        icmp_type=itype,
        icmp_code=icode,
        response_ttl=hdr.ttl,
        ip_id=hdr.ident,
        return_hops=ret,
    )
    if itype == ICMP_ECHO_REPLY:
        ident, seq = struct.unpack("!HH", icmp[4:8])
        return ResponseInfo(**base, echo_identifier=ident, echo_sequence=seq)
    if itype not in _QUOTING_TYPES:
        raise WireError(f"unsupported ICMP type {itype}")
    quote = icmp[8:]
    if len(quote) < QUOTE_LEN:
        return ResponseInfo(**base, quote_truncated=True)
    pttl, pid, sid, flow = _decode_quote(quote, mode)
    return ResponseInfo(
        **base,
        quoted_probe_ttl=pttl,
        quoted_probe_id=pid,
        quoted_session_id=sid,
        quoted_flow=flow,
    )


def parse_tcp_reply(octets: bytes) -> ResponseInfo:
    """A destination's RST/SYN-ACK answer to a TCP probe, matched through the ACK number."""
    hdr = IPHeader.unpack(octets)
    seg = octets[IP_HDR_LEN:]
    if len(seg) < 20:
        raise TruncatedHeaderError("TCP header truncated")
    _sp, _dp, _seq, ack, _off, flags = struct.unpack("!HHIIBB", seg[:14])
    probe_seq = (ack - 1) & 0xFFFFFFFF
    return ResponseInfo(
        responder_addr=hdr.src,
        icmp_type=None,
        icmp_code=None,
        response_ttl=hdr.ttl,
        ip_id=hdr.ident,
        quoted_probe_id=probe_seq & 0xFFFF,
        quoted_session_id=probe_seq >> 16,
        tcp_flags=flags,
    )


def parse_response(octets: bytes, *, mode: Mode | str = Mode.PARIS) -> ResponseInfo:
    hdr = IPHeader.unpack(octets)
    if hdr.protocol == Protocol.TCP:
        return parse_tcp_reply(octets)
    return parse_time_exceeded(octets, mode=mode)


# -- response synthesis (used by the simulator and tests) ---------------------


def build_icmp_error(
    icmp_type: int,
    icmp_code: int,
    src: str,
    dst: str,
    quoted: bytes,
    *,
    ttl: int = 255,
    ip_id: int = 0,
    quote_len: int = QUOTE_LEN,
) -> bytes:
    body = struct.pack("!BBHI", icmp_type, icmp_code, 0, 0) + quoted[:quote_len]
    csum = internet_checksum(body)
    body = body[:2] + struct.pack("!H", csum) + body[4:]
    return ip_datagram(IPHeader(src, dst, Protocol.ICMP, ttl, ip_id), body)


def synthesize_time_exceeded(
    probe: ProbePacket | bytes,
    responder: str,
    *,
    ttl: int = 255,
    ip_id: int = 0,
    quoted_ttl: int = 1,
    quote_len: int = QUOTE_LEN,
) -> bytes:
    octets = probe.octets if isinstance(probe, ProbePacket) else probe
    src = IPHeader.unpack(octets).src
    return build_icmp_error(
        ICMP_TIME_EXCEEDED, 0, responder, src, with_ttl(octets, quoted_ttl),
        ttl=ttl, ip_id=ip_id, quote_len=quote_len,
    )


def build_echo_reply(request: bytes, *, ttl: int = 64, ip_id: int = 0) -> bytes:
    hdr = IPHeader.unpack(request)
    msg = request[IP_HDR_LEN:hdr.total_length]
    ident, seq = struct.unpack("!HH", msg[4:8])
    reply = _icmp_echo(ident, seq, msg[8:], type_=ICMP_ECHO_REPLY)
    return ip_datagram(IPHeader(hdr.dst, hdr.src, Protocol.ICMP, ttl, ip_id), reply)


def build_tcp_reset(request: bytes, *, ttl: int = 64, ip_id: int = 0) -> bytes:
    hdr = IPHeader.unpack(request)
    sport, dport, seq = struct.unpack("!HHI", request[IP_HDR_LEN:IP_HDR_LEN + 8])
    seg = struct.pack(
        "!HHIIBBHHH", dport, sport, 0, (seq + 1) & 0xFFFFFFFF, 5 << 4, TCP_RST | TCP_ACK, 0, 0, 0
    )
    csum = transport_checksum(hdr.dst, hdr.src, Protocol.TCP, seg)
    seg = seg[:16] + struct.pack("!H", csum) + seg[18:]
    return ip_datagram(IPHeader(hdr.dst, hdr.src, Protocol.TCP, ttl, ip_id), seg)
