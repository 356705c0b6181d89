"""Simulated MGCP media server.

:class:`MediaServer` is the protocol logic: endpoints, connections,
announcement signals and DTMF collection. It never touches the network.
Each call returns the response plus any NTFY commands that became due.
:class:`MediaServerNode` puts it on a reactor and an MGCP endpoint, and adds
a serial service queue with an optional artificial delay and fault switches.

There is no RTP. Digits are injected through :meth:`MediaServer.inject_dtmf`,
addressed by the local SDP port of the connection, which stands in for an
in-band tone on that media stream.
"""

from __future__ import annotations

import dataclasses
import heapq
import itertools
import json
import logging
import re
from pathlib import Path
from typing import Callable

from ..clock import Reactor
from ..mgcp.endpoint import MgcpEndpoint
from ..mgcp.message import DEFAULT_MS_PORT, MgcpCommand, MgcpResponse
from ..sdp import SdpSession, make_sdp
from .digitmap import DigitMap, MalformedDigitMap, MatchKind, digitmap_match, parse_digitmap

log = logging.getLogger(__name__)

Address = tuple[str, int]

TYPE_PREFIX = {"ann": "Announcement", "ivr": "IVR", "pra": "PacketRelayAnnouncement", "pri": "PacketRelayIvr"}
COLLECTING_TYPES = frozenset({"IVR", "PacketRelayIvr"})

_SIGNAL = re.compile(r"^(?:A/)?ann\(([^,()]+)(?:,\s*([0-9.]+)s)?\)$")


class NoActiveRequest(LookupError):
    pass


@dataclasses.dataclass
class MsConfig:
    host: str = "10.0.0.2"
    port: int = DEFAULT_MS_PORT
    endpoints: dict[str, int] = dataclasses.field(
        default_factory=lambda: {"ann": 1000, "ivr": 1000, "pra": 1000, "pri": 1000}
    )
    announcements: dict[str, float] = dataclasses.field(default_factory=dict)
    default_announcement: float = 2.0
    first_digit_timer: float = 16.0
    inter_digit_timer: float = 4.0
    first_rtp_port: int = 4000
    service_delay: float = 0.0

    @classmethod
    def from_json(cls, path: str | Path) -> "MsConfig":
        data = json.loads(Path(path).read_text())
        return cls(**data)

    def announcement_length(self, name: str) -> float:
        return self.announcements.get(name, self.default_announcement)


@dataclasses.dataclass
class MsConnection:
    connection_id: str
    call_id: str
    mode: str
    local_sdp: SdpSession
    remote_sdp: SdpSession | None = None


@dataclasses.dataclass
class ActiveRequest:
    request_id: str
    notify_to: Address
    signal: str | None
    collect: bool
    notify_signal_done: bool
    digit_map: DigitMap | None
    collected: str = ""
    generation: int = 0
    collecting: bool = False
    notified: bool = False


@dataclasses.dataclass
class MsEndpoint:
    id: str
    type: str
    connections: dict[str, MsConnection] = dataclasses.field(default_factory=dict)
    active_request: ActiveRequest | None = None


@dataclasses.dataclass
class MsFaults:
    mdcx_fail: int = 0  # fail the next N MDCX commands with 400
    crcx_fail: int = 0  # fail the next N CRCX commands with 400


Outgoing = tuple[MgcpCommand, Address]  # NTFY with its destination


class MediaServer:
    def __init__(self, config: MsConfig | None = None):
        self.config = config or MsConfig()
        self.faults = MsFaults()
        self.endpoints: dict[str, MsEndpoint] = {}
        self._free: dict[str, list[int]] = {p: list(range(1, n + 1)) for p, n in self.config.endpoints.items()}
        self._by_port: dict[int, tuple[MsEndpoint, MsConnection]] = {}
        self._conn_seq = 0
        self._next_port = self.config.first_rtp_port
        self._schedule: list = []
        self._seq = itertools.count()
        self.connection_count = 0
        self.peak_connections = 0
        self.stats = {"crcx": 0, "mdcx": 0, "dlcx": 0, "rqnt": 0, "ntfy": 0}

    @property
    def domain(self) -> str:
        return f"{self.config.host}:{self.config.port}"

    # -- helpers ------------------------------------------------------------

    def _split(self, endpoint_id: str) -> tuple[str, str, str] | None:
        local, at, domain = endpoint_id.partition("@")
        prefix, slash, index = local.partition("/")
        if not at or not slash or prefix not in self._free:
            return None
        if domain not in (self.domain, self.config.host):
            return None
        return prefix, index, domain

    def _lookup(self, endpoint_id: str) -> MsEndpoint | None:
        parts = self._split(endpoint_id)
        if parts is None:
            return None
        return self.endpoints.get(f"{parts[0]}/{parts[1]}@{self.domain}")

    def _allocate_port(self) -> int:
        while True:
            port = self._next_port
            self._next_port += 2
            if self._next_port > 65534:
                self._next_port = self.config.first_rtp_port
            if port not in self._by_port:
                return port

    def _schedule_at(self, when: float, kind: str, endpoint: MsEndpoint, req: ActiveRequest) -> None:
        heapq.heappush(self._schedule, (when, next(self._seq), kind, endpoint.id, req.request_id, req.generation))

    def next_due(self) -> float | None:
        return self._schedule[0][0] if self._schedule else None

    def _ntfy(self, endpoint: MsEndpoint, req: ActiveRequest, observed: str) -> Outgoing | None:
        if req.notified:
            return None
        req.notified = True
        self.stats["ntfy"] += 1
        cmd = MgcpCommand("NTFY", 0, endpoint.id, (("X", req.request_id), ("O", observed)))
        return cmd, req.notify_to

    def _release_endpoint_if_idle(self, endpoint: MsEndpoint) -> None:
        if endpoint.connections:
            return
        endpoint.active_request = None
        del self.endpoints[endpoint.id]
        prefix, index = endpoint.id.split("@")[0].split("/")
        heapq.heappush(self._free[prefix], int(index))

    # -- commands -----------------------------------------------------------

    def handle_command(self, cmd: MgcpCommand, now: float, src: Address) -> tuple[MgcpResponse, list[Outgoing]]:
        handler = getattr(self, f"_do_{cmd.verb.lower()}", None)
        if handler is None:
            return MgcpResponse(510, cmd.transaction_id, "unsupported"), []
        return handler(cmd, now, src)

    def _do_crcx(self, cmd, now, src):
        tid = cmd.transaction_id
        parts = self._split(cmd.endpoint_id)
        if parts is None:
            return MgcpResponse(500, tid, "endpoint unknown"), []
        if self.faults.crcx_fail > 0:
            self.faults.crcx_fail -= 1
            return MgcpResponse(400, tid, "transient error"), []
        prefix, index, _ = parts
        if index == "$":
            free = self._free[prefix]
            if not free:
                return MgcpResponse(403, tid, "no endpoint available"), []
            index = str(heapq.heappop(free))
            endpoint = MsEndpoint(f"{prefix}/{index}@{self.domain}", TYPE_PREFIX[prefix])
            self.endpoints[endpoint.id] = endpoint
        else:
            endpoint = self._lookup(cmd.endpoint_id)
            if endpoint is None:
                return MgcpResponse(500, tid, "endpoint unknown"), []
        self._conn_seq += 1
        conn_id = f"conn{self._conn_seq}"
        local = make_sdp("ms", self.config.host, self._allocate_port())
        conn = MsConnection(conn_id, cmd.param("C"), cmd.param("M") or "sendrecv", local, cmd.sdp)
        endpoint.connections[conn_id] = conn
        self._by_port[local.audio_port] = (endpoint, conn)
        self.connection_count += 1
        self.peak_connections = max(self.peak_connections, self.connection_count)
        self.stats["crcx"] += 1
        return MgcpResponse(200, tid, "OK", (("I", conn_id), ("Z", endpoint.id)), local), []

    def _do_mdcx(self, cmd, now, src):
        tid = cmd.transaction_id
        endpoint = self._lookup(cmd.endpoint_id)
        if endpoint is None:
            return MgcpResponse(500, tid, "endpoint unknown"), []
        conn = endpoint.connections.get(cmd.param("I") or "")
        if conn is None:
            return MgcpResponse(515, tid, "unknown connection"), []
        if self.faults.mdcx_fail > 0:
            self.faults.mdcx_fail -= 1
            return MgcpResponse(400, tid, "transient error"), []
        if cmd.param("M"):
            conn.mode = cmd.param("M")
        if cmd.sdp is not None:
            conn.remote_sdp = cmd.sdp
        self.stats["mdcx"] += 1
        return MgcpResponse(200, tid, "OK"), []

    def _do_dlcx(self, cmd, now, src):
        tid = cmd.transaction_id
        endpoint = self._lookup(cmd.endpoint_id)
        if endpoint is None:
            return MgcpResponse(500, tid, "endpoint unknown"), []
        conn_id = cmd.param("I")
        if conn_id is not None:
            if conn_id not in endpoint.connections:
                return MgcpResponse(515, tid, "unknown connection"), []
            victims = [conn_id]
        else:
            call_id = cmd.param("C")
            victims = [c for c, v in endpoint.connections.items() if call_id is None or v.call_id == call_id]
        for conn_id in victims:
            conn = endpoint.connections.pop(conn_id)
            self._by_port.pop(conn.local_sdp.audio_port, None)
            self.connection_count -= 1
        self.stats["dlcx"] += 1
        self._release_endpoint_if_idle(endpoint)
        return MgcpResponse(200, tid, "OK"), []

    def _do_rqnt(self, cmd, now, src):
        tid = cmd.transaction_id
        endpoint = self._lookup(cmd.endpoint_id)
        if endpoint is None:
            return MgcpResponse(500, tid, "endpoint unknown"), []
        events = [e.strip() for e in (cmd.param("R") or "").split(",") if e.strip()]
        collect = any(e.startswith("D/") for e in events)
        if collect and endpoint.type not in COLLECTING_TYPES:
            return MgcpResponse(510, tid, "endpoint cannot collect digits"), []
        signal = cmd.param("S")
        duration = None
        if signal:
            m = _SIGNAL.match(signal)
            if m is None:
                return MgcpResponse(510, tid, f"unsupported signal {signal}"), []
            duration = float(m.group(2)) if m.group(2) else self.config.announcement_length(m.group(1))
        dmap = None
        if cmd.param("D"):
            try:
                dmap = parse_digitmap(cmd.param("D"))
            except MalformedDigitMap:
                return MgcpResponse(510, tid, "bad digit map"), []
        notify_to = src
        entity = cmd.param("N")
        if entity and "@" in entity:
            host, _, port = entity.split("@", 1)[1].partition(":")
            notify_to = (host, int(port) if port else src[1])
        previous = endpoint.active_request
        req = ActiveRequest(
            request_id=cmd.param("X"),
            notify_to=notify_to,
            signal=signal,
            collect=collect,
            notify_signal_done="A/oc" in events,
            digit_map=dmap,
            generation=(previous.generation + 1) if previous else 0,
        )
        endpoint.active_request = req if (events or signal) else None
        self.stats["rqnt"] += 1
        if duration is not None:
            self._schedule_at(now + duration, "signal_done", endpoint, req)
        elif collect:
            req.collecting = True
            self._schedule_at(now + self.config.first_digit_timer, "digit_timer", endpoint, req)
        return MgcpResponse(200, tid, "OK"), []

    def _do_ntfy(self, cmd, now, src):
        return MgcpResponse(510, cmd.transaction_id, "NTFY is call-agent bound"), []

    # -- DTMF and timers ----------------------------------------------------

    def inject_dtmf(self, port: int, digit: str, now: float) -> list[Outgoing]:
        found = self._by_port.get(port)
        if found is None:
            log.info("dtmf %r for unknown port %d dropped", digit, port)
            return []
        endpoint, _ = found
        req = endpoint.active_request
        if req is None or not req.collect:
            log.info("dtmf %r on %s with no active request dropped", digit, endpoint.id)
            return []
        req.collecting = True
        req.collected += digit
        req.generation += 1
        if req.digit_map is None:
            return self._finish(endpoint, req, f"D/{digit}")
        result = digitmap_match(req.digit_map, req.collected)
        if result.kind is MatchKind.FULL:
            return self._finish(endpoint, req, f"D/{result.matched}")
        if result.kind is MatchKind.NONE:
            return self._finish(endpoint, req, "D/nomatch")
        self._schedule_at(now + self.config.inter_digit_timer, "digit_timer", endpoint, req)
        return []

    def _finish(self, endpoint: MsEndpoint, req: ActiveRequest, observed: str) -> list[Outgoing]:
        endpoint.active_request = None
        out = self._ntfy(endpoint, req, observed)
        return [out] if out else []

    def tick(self, now: float) -> list[Outgoing]:
        """Fire every scheduled event due at ``now``, in schedule order."""
        out: list[Outgoing] = []
        while self._schedule and self._schedule[0][0] <= now:
            when, _, kind, endpoint_id, request_id, generation = heapq.heappop(self._schedule)
            endpoint = self.endpoints.get(endpoint_id)
            req = endpoint.active_request if endpoint else None
            if req is None or req.request_id != request_id or req.generation != generation:
                continue  # stale
            if kind == "signal_done":
                if req.collect:
                    if not req.collecting:
                        req.collecting = True
                        self._schedule_at(when + self.config.first_digit_timer, "digit_timer", endpoint, req)
                elif req.notify_signal_done:
                    out.extend(self._finish(endpoint, req, "A/oc"))
                else:
                    endpoint.active_request = None
            elif kind == "digit_timer":
                result = None
                if req.digit_map is not None and req.collected:
                    result = digitmap_match(req.digit_map, req.collected, timer_expired=True)
                if result is not None and result.kind is MatchKind.FULL:
                    out.extend(self._finish(endpoint, req, f"D/{result.matched}"))
                else:
                    out.extend(self._finish(endpoint, req, "D/timeout"))
        return out


class MediaServerNode:
    """A :class:`MediaServer` attached to a reactor and an MGCP endpoint."""

    def __init__(self, reactor: Reactor, config: MsConfig | None = None, *, mgcp: MgcpEndpoint | None = None):
        self.reactor = reactor
        self.server = MediaServer(config)
        self.config = self.server.config
        self.mgcp = mgcp or MgcpEndpoint(reactor, name="ms")
        self.mgcp.on_command = self._on_command
        self._busy_until = 0.0
        self._tick_timer = None
        self.on_ntfy_result: Callable[[str, MgcpResponse | None], None] | None = None

    @property
    def address(self) -> Address:
        return (self.config.host, self.config.port)

    def _on_command(self, cmd: MgcpCommand, src: Address) -> MgcpResponse | None:
        delay = self.config.service_delay
        if delay <= 0:
            return self._apply(cmd, src)
        now = self.reactor.now()
        self._busy_until = max(self._busy_until, now) + delay
        self.reactor.call_at(self._busy_until, lambda: self.mgcp.respond(src, self._apply(cmd, src)))
        return None

    def _apply(self, cmd: MgcpCommand, src: Address) -> MgcpResponse:
        response, outgoing = self.server.handle_command(cmd, self.reactor.now(), src)
        # the response must precede any NTFY it triggers
        self.reactor.call_soon(lambda: self._dispatch(outgoing))
        return response

    def _dispatch(self, outgoing: list[Outgoing]) -> None:
        for cmd, dst in outgoing:
            self.mgcp.send_command(cmd, dst, self.on_ntfy_result)
        self._rearm()

    def _rearm(self) -> None:
        due = self.server.next_due()
        if self._tick_timer is not None:
            if due is not None and self._tick_timer.when == due:
                return
            self._tick_timer.cancel()
            self._tick_timer = None
        if due is not None:
            self._tick_timer = self.reactor.call_at(due, self._on_tick)

    def _on_tick(self) -> None:
        self._tick_timer = None
        self._dispatch(self.server.tick(self.reactor.now()))

    def inject_dtmf(self, port: int, digit: str) -> None:
        self._dispatch(self.server.inject_dtmf(port, digit, self.reactor.now()))
