"""Raw-socket transport for tracing real networks.

Needs CAP_NET_RAW (usually root).  Probes are written with IP_HDRINCL so the
crafted header goes out unchanged; ICMP errors (and TCP replies for TCP
probes) are read from raw receive sockets.
"""

from __future__ import annotations

import select
import socket
import time

from .probing import TransportError
from .wire import ProbePacket, Protocol


def local_address_for(destination: str) -> str:
    """Source address the kernel would pick toward ``destination``."""
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.connect((destination, 33434))
        return s.getsockname()[0]


class RawSocketTransport:
    def __init__(self, destination: str, source: str | None = None):
        try:
            self.source_address = source or local_address_for(destination)
            self._send = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
            self._send.setsockopt(socket.IPPROTO_IP, socket.IP_HDRINCL, 1)
            self._recv = [
                socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_ICMP),
                socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_TCP),
            ]
        except OSError as e:
            raise TransportError(f"raw sockets unavailable ({e}); live tracing needs root") from e

    def close(self) -> None:
        for s in [self._send, *self._recv]:
            s.close()

    def __enter__(self) -> RawSocketTransport:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def now(self) -> float:
        return time.monotonic()

    def pause(self, seconds: float) -> None:
        time.sleep(seconds)

    def send(self, probe: ProbePacket) -> float:
        t = self.now()
        try:
            self._send.sendto(probe.octets, (probe.flow.dst_addr, 0))
        except OSError as e:
            raise TransportError(f"send failed: {e}") from e
        return t

    def receive(self, deadline: float) -> tuple[bytes, float] | None:
        while True:
            left = deadline - self.now()
            if left <= 0:
                return None
            ready, _, _ = select.select(self._recv, [], [], left)
            for s in ready:
                data = s.recv(65535)
                if s is self._recv[1] and data[9:10] != bytes([Protocol.TCP]):
                    continue
                return data, self.now()
