"""Datagram transports: an ordered in-process network and plain UDP.

Both deliver the exact byte sequences the codecs produce. The in-process
network also owns the wire trace and the drop-fault rules, since it is the
only place that sees every datagram in a total order.
"""

from __future__ import annotations

import dataclasses
import logging
import socket
from typing import Callable

from .clock import Reactor

log = logging.getLogger(__name__)

Address = tuple[str, int]
Receiver = Callable[[bytes, Address], None]

_MGCP_VERBS = frozenset({"CRCX", "MDCX", "DLCX", "RQNT", "NTFY", "AUEP", "AUCX", "EPCF", "RSIP"})


@dataclasses.dataclass(frozen=True)
class TraceEntry:
    time: float
    src: str
    dst: str
    protocol: str
    summary: str

    def line(self) -> str:
        return f"{self.time:10.3f} {self.src:>3} -> {self.dst:<3} {self.protocol:<4} {self.summary}"


class WireLabeler:
    """Turns datagrams into short labels, e.g. ``CRCX 1 ivr/$@ms`` or ``200 (CRCX)``.

    MGCP responses carry only a transaction id, so the verb is recovered from
    the command seen earlier in the opposite direction.
    """

    def __init__(self) -> None:
        self._mgcp_verbs: dict[tuple[Address, Address, int], str] = {}

    def label(self, data: bytes, src: Address, dst: Address) -> tuple[str, str]:
        protocol, summary = self._label(data, src, dst)
        if b"\r\nv=0" in data:
            summary += " +sdp"
        return protocol, summary

    def _label(self, data: bytes, src: Address, dst: Address) -> tuple[str, str]:
        first = data.split(b"\r\n", 1)[0].decode("utf-8", "replace")
        parts = first.split()
        if not parts:
            return "?", first
        if parts[0] in _MGCP_VERBS or (len(parts) >= 2 and parts[-1] == "1.0" and parts[-2] == "MGCP"):
            verb = parts[0]
            try:
                self._mgcp_verbs[(src, dst, int(parts[1]))] = verb
            except (IndexError, ValueError):
                pass
            return "MGCP", " ".join(parts[:3])
        if parts[0].isdigit() and len(parts) >= 2 and parts[1].isdigit():
            verb = self._mgcp_verbs.get((dst, src, int(parts[1])), "?")
            return "MGCP", f"{parts[0]} ({verb})"
        if first.startswith("SIP/2.0"):
            method = "?"
            for line in data.split(b"\r\n\r\n", 1)[0].split(b"\r\n")[1:]:
                name, _, value = line.decode("utf-8", "replace").partition(":")
                if name.strip().lower() == "cseq":
                    method = value.split()[-1]
                    break
            return "SIP", f"{parts[1]} ({method})"
        return "SIP", " ".join(parts[:2])


@dataclasses.dataclass
class DropRule:
    """Drop the first ``count`` datagrams whose label matches ``label``."""

    label: str
    count: int = 1
    dropped: int = 0

    def matches(self, summary: str) -> bool:
        return summary.removesuffix(" +sdp").replace(" ", "") == self.label.replace(" ", "")


class InprocNetwork:
    def __init__(self, reactor: Reactor, latency: float = 0.001):
        self.reactor = reactor
        self.latency = latency
        self._receivers: dict[Address, Receiver] = {}
        self._names: dict[Address, str] = {}
        self.labeler = WireLabeler()
        self.trace: list[TraceEntry] = []
        self.record_trace = True
        self.drop_rules: list[DropRule] = []
        self.delivered = 0
        self.dropped = 0

    def attach(self, addr: Address, receiver: Receiver, name: str | None = None) -> "InprocTransport":
        if addr in self._receivers:
            raise ValueError(f"address {addr} already bound")
        self._receivers[addr] = receiver
        self._names[addr] = name or f"{addr[0]}:{addr[1]}"
        return InprocTransport(self, addr)

    def name(self, addr: Address) -> str:
        return self._names.get(addr, f"{addr[0]}:{addr[1]}")

    def send(self, src: Address, dst: Address, data: bytes) -> None:
        protocol, summary = self.labeler.label(data, src, dst)
        for rule in self.drop_rules:
            if rule.dropped < rule.count and rule.matches(summary):
                rule.dropped += 1
                self.dropped += 1
                if self.record_trace:
                    self.trace.append(
                        TraceEntry(self.reactor.now(), self.name(src), self.name(dst), protocol, summary + " [dropped]")
                    )
                return
        if self.record_trace:
            self.trace.append(TraceEntry(self.reactor.now(), self.name(src), self.name(dst), protocol, summary))
        receiver = self._receivers.get(dst)
        if receiver is None:
            log.debug("no receiver bound at %s", dst)
            return

        def deliver() -> None:
            self.delivered += 1
            receiver(data, src)

        self.reactor.call_later(self.latency, deliver)


class InprocTransport:
    def __init__(self, network: InprocNetwork, addr: Address):
        self.network = network
        self.local_address = addr

    def send(self, dst: Address, data: bytes) -> None:
        self.network.send(self.local_address, dst, data)

    def close(self) -> None:
        pass


class UdpTransport:
    def __init__(self, reactor: Reactor, addr: Address, receiver: Receiver):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 * 1024 * 1024)
        except OSError:
            pass
        self.sock.bind(addr)
        self.sock.setblocking(False)
        self.local_address: Address = self.sock.getsockname()
        self.reactor = reactor
        self.receiver = receiver
        reactor.add_reader(self.sock, self._readable)

    def _readable(self) -> None:
        for _ in range(64):
            try:
                data, src = self.sock.recvfrom(65535)
            except BlockingIOError:
                return
            except OSError as exc:
                log.warning("recv failed: %s", exc)
                return
            self.receiver(data, src)

    def send(self, dst: Address, data: bytes) -> None:
        try:
            self.sock.sendto(data, dst)
        except OSError as exc:
            log.warning("send to %s failed: %s", dst, exc)

    def close(self) -> None:
        self.reactor.remove_reader(self.sock)
        self.sock.close()
