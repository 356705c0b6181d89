"""JCC call model over SIP and MGCP.

A :class:`JccProvider` owns one SIP endpoint and one MGCP endpoint and
exposes the application API: ``create_call``, ``create_connection``,
``route_connection``, ``select_route``, ``attach_media``, ``release`` and
``route_call``. Results come back as :class:`JccEvent` objects delivered to
registered listeners. Listeners never see SIP or MGCP messages.

Connections come in two flavors chosen by the target scheme: a ``sip:``
target gives a :class:`SipConnection` (one dialog leg of the B2BUA), an
``mgcp:host:port`` target gives an :class:`MgcpConnection` driven by the
connection handler FSM in :mod:`.handler`.

The provider also counts, per call, the application interactions (API calls
plus delivered events) and the SIP+MGCP messages its stack handled, both
over the whole call and up to the moment both SIP legs are connected.
"""

from __future__ import annotations

import collections
import dataclasses
import itertools
import logging
from types import MappingProxyType
from typing import Callable, Mapping

from ..clock import Reactor, Timer
from ..mgcp.endpoint import MgcpEndpoint
from ..mgcp.message import MgcpCommand, MgcpResponse
from ..sdp import MalformedSdp, SdpSession, parse_sdp, serialize_sdp
from ..sip.endpoint import SipEndpoint
from ..sip.message import SipError, SipMessage, build_request, build_response, uri_address, uri_user
from . import handler as h

log = logging.getLogger(__name__)

Address = tuple[str, int]

# JCC connection states
IDLE = "IDLE"
CALL_DELIVERY = "CALL_DELIVERY"
ALERTING = "ALERTING"
CONNECTED = "CONNECTED"
DISCONNECTED = "DISCONNECTED"
FAILED = "FAILED"
TERMINAL = frozenset({DISCONNECTED, FAILED})

ALLOWED_TRANSITIONS = frozenset(
    {
        (IDLE, CALL_DELIVERY),
        (IDLE, FAILED),
        (CALL_DELIVERY, ALERTING),
        (CALL_DELIVERY, CONNECTED),
        (CALL_DELIVERY, FAILED),
        (ALERTING, CONNECTED),
        (ALERTING, FAILED),
        (ALERTING, DISCONNECTED),
        (CONNECTED, DISCONNECTED),
        (CONNECTED, FAILED),
    }
)

EVENT_KINDS = (
    "CONNECTION_CREATED",
    "CONNECTION_CALL_DELIVERY",
    "CONNECTION_ALERTING",
    "CONNECTION_CONNECTED",
    "CONNECTION_DISCONNECTED",
    "CONNECTION_FAILED",
    "CONNECTION_MID_CALL",
)

_STATE_EVENT = {
    CALL_DELIVERY: "CONNECTION_CALL_DELIVERY",
    ALERTING: "CONNECTION_ALERTING",
    CONNECTED: "CONNECTION_CONNECTED",
    DISCONNECTED: "CONNECTION_DISCONNECTED",
    FAILED: "CONNECTION_FAILED",
}


class JccError(Exception):
    pass


class ProviderShutDown(JccError):
    pass


class NoSuchPeerConnection(JccError):
    pass


class PeerSdpMissing(JccError):
    pass


class InvalidTargetScheme(JccError):
    pass


class TerminalConnection(JccError):
    pass


class IllegalArgument(JccError):
    pass


class InviteRejected(JccError):
    def __init__(self, status: int):
        super().__init__(f"INVITE rejected with {status}")
        self.status = status


class FsmViolation(AssertionError):
    pass


IllegalState = h.IllegalState
HandlerBusy = h.HandlerBusy
UnknownParameter = h.UnknownParameter
MalformedParam = h.MalformedParam
EmptyLedger = h.EmptyLedger


@dataclasses.dataclass(frozen=True)
class JccAddress:
    scheme: str
    literal: str

    @classmethod
    def parse(cls, literal: str) -> "JccAddress":
        scheme, colon, rest = literal.partition(":")
        if not colon or scheme not in ("sip", "mgcp") or not rest:
            raise InvalidTargetScheme(literal)
        if scheme == "mgcp":
            host, _, port = rest.rpartition(":")
            if not host or not port.isdigit():
                raise InvalidTargetScheme(f"mgcp address needs host:port: {literal!r}")
        return cls(scheme, literal)

    @property
    def host_port(self) -> Address:
        if self.scheme == "mgcp":
            host, _, port = self.literal[5:].rpartition(":")
            return host, int(port)
        return uri_address(self.literal)

    def __str__(self) -> str:
        return self.literal


@dataclasses.dataclass(frozen=True)
class JccEvent:
    kind: str
    connection: "JccConnection"
    cause: str | None = None
    payload: Mapping | None = None

    @property
    def call(self) -> "JccCall":
        return self.connection.call


Listener = Callable[[JccEvent], None]
EventFilter = Callable[[JccEvent], bool]


class JccCall:
    def __init__(self, provider: "JccProvider", call_id: str):
        self.provider = provider
        self.id = call_id
        self.connections: list[JccConnection] = []
        self.data: dict = {}  # free slot for the application
        self.interactions: list[str] = []
        self.setup_interactions: int | None = None
        self.wire_messages = 0
        self.setup_wire_messages: int | None = None

    @property
    def state(self) -> str:
        if not self.connections:
            return "IDLE"
        if all(c.jcc_state in TERMINAL for c in self.connections):
            return "INVALID"
        return "ACTIVE"

    def sip_legs(self) -> list["SipConnection"]:
        return [c for c in self.connections if isinstance(c, SipConnection)]

    def __repr__(self) -> str:
        return f"JccCall({self.id}, {self.state})"


class JccConnection:
    flavor = "?"

    def __init__(self, provider: "JccProvider", call: JccCall, address: JccAddress):
        self.provider = provider
        self.call = call
        self.address = address
        self.id = f"{call.id}/{len(call.connections) + 1}"
        self.jcc_state = IDLE
        self.peer_sdp: SdpSession | None = None
        self.local_sdp: SdpSession | None = None
        self.history: list[str] = [IDLE]

    @property
    def terminal(self) -> bool:
        return self.jcc_state in TERMINAL

    def _set_state(self, new: str, cause: str | None = None, *, fire: bool = True) -> None:
        old = self.jcc_state
        if old == new:
            return
        if (old, new) not in ALLOWED_TRANSITIONS:
            self.provider.violations.append((self.id, old, new))
            raise FsmViolation(f"{self.id}: illegal JCC transition {old} -> {new}")
        self.jcc_state = new
        self.history.append(new)
        if fire:
            self.provider._fire(JccEvent(_STATE_EVENT[new], self, cause))
        if new in TERMINAL:
            self.provider._connection_ended(self)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.id}, {self.address}, {self.jcc_state})"


class SipConnection(JccConnection):
    """One SIP dialog leg; ``incoming`` legs are the caller side."""

    flavor = "SIP"

    def __init__(self, provider, call, address, *, incoming: bool):
        super().__init__(provider, call, address)
        self.incoming = incoming
        self.sip_call_id: str = ""
        self.peer_addr: Address | None = None
        self.invite: SipMessage | None = None
        self.local_tag: str | None = None
        self.remote_tag: str | None = None
        self.local_header = ""  # our From (outgoing) or To (incoming) identity, untagged
        self.remote_header = ""
        self.remote_target = ""
        self.local_cseq = 0
        self.final_sent = False
        self.ok_response: SipMessage | None = None
        self.ok_timer: Timer | None = None
        self.ack: SipMessage | None = None
        self.partner: SipConnection | None = None
        self.release_on_answer = False
        self.bye_sent = False

    @property
    def has_pending_offer(self) -> bool:
        return self.incoming and not self.final_sent and self.peer_sdp is not None


class MgcpConnection(JccConnection):
    flavor = "MGCP"

    def __init__(self, provider, call, address, peer: SipConnection):
        super().__init__(provider, call, address)
        self.peer = peer
        host, port = address.host_port
        self.ledger = h.ParameterLedger(
            committed=MappingProxyType(
                {"endpointAddress": f"{host}:{port}", "endpointType": "IVR", "mode": "sendrecv"}
            )
        )
        self.handler = h.HandlerState(call_id=call.id, peer_sdp=peer.peer_sdp)
        self.release_pending = False
        self.route_flag: bool | None = None
        self.actions_log: list = []

    def _feed(self, event, *, strict: bool) -> None:
        try:
            self.handler, actions = h.handler_step(self.handler, event)
        except h.IllegalEventForState as exc:
            if strict:
                raise
            log.info("%s: ignored %s", self.id, exc)
            return
        self.actions_log.extend(actions)
        self.provider._run_handler_actions(self, actions)
        if self.release_pending and self.handler.phase in (h.CONNECTED, h.ERROR):
            self.release_pending = False
            self._feed(h.CmdRelease(), strict=False)


class JccProvider:
    def __init__(
        self,
        reactor: Reactor,
        sip: SipEndpoint,
        mgcp: MgcpEndpoint,
        *,
        relay_ringing: bool = False,
    ):
        self.reactor = reactor
        self.sip = sip
        self.mgcp = mgcp
        self.relay_ringing = relay_ringing
        self.calls: dict[str, JccCall] = {}
        self.finished: list[JccCall] = []
        self.violations: list[tuple[str, str, str]] = []
        self.shut_down = False
        self._ids = itertools.count(1)
        self._listeners: list[tuple[Listener, EventFilter | None]] = []
        self._queue: collections.deque[JccEvent] = collections.deque()
        self._delivering = False
        self._legs: dict[str, SipConnection] = {}
        self._ms_endpoints: dict[str, MgcpConnection] = {}
        self._mgcp_out: dict[int, JccCall] = {}
        self._mgcp_in: dict[tuple[Address, int], JccCall] = {}
        sip.on_request = self._sip_request
        sip.on_stray_response = self._sip_stray_response
        sip.taps.append(self._sip_tap)
        mgcp.on_command = self._mgcp_command
        mgcp.taps.append(self._mgcp_tap)

    # -- listeners and events -------------------------------------------------

    def add_listener(self, listener: Listener, event_filter: EventFilter | None = None) -> None:
        self._listeners.append((listener, event_filter))

    def _fire(self, event: JccEvent) -> None:
        self._queue.append(event)
        if self._delivering:
            return
        self._delivering = True
        try:
            while self._queue:
                ev = self._queue.popleft()
                for listener, flt in list(self._listeners):
                    if flt is not None and not flt(ev):
                        continue
                    ev.call.interactions.append(ev.kind)
                    if ev.kind == "CONNECTION_CONNECTED":
                        self._maybe_mark_setup(ev.call)
                    try:
                        listener(ev)
                    except Exception:
                        log.exception("listener failed on %s", ev.kind)
        finally:
            self._delivering = False

    def _maybe_mark_setup(self, call: JccCall) -> None:
        legs = call.sip_legs()
        if call.setup_interactions is None and len(legs) >= 2 and all(l.jcc_state == CONNECTED for l in legs):
            call.setup_interactions = len(call.interactions)
            call.setup_wire_messages = call.wire_messages

    def _api(self, call: JccCall, name: str) -> None:
        if self.shut_down:
            raise ProviderShutDown()
        call.interactions.append(name)

    def shutdown(self) -> None:
        self.shut_down = True

    # -- calls ----------------------------------------------------------------

    def _new_call(self) -> JccCall:
        if self.shut_down:
            raise ProviderShutDown()
        call = JccCall(self, f"jcc{next(self._ids)}")
        self.calls[call.id] = call
        return call

    def create_call(self) -> JccCall:
        call = self._new_call()
        call.interactions.append("createCall")
        return call

    def _connection_ended(self, conn: JccConnection) -> None:
        if isinstance(conn, SipConnection) and conn.ok_timer is not None:
            conn.ok_timer.cancel()
            conn.ok_timer = None
        call = conn.call
        if call.state == "INVALID" and call.id in self.calls:
            del self.calls[call.id]
            self.finished.append(call)
            for leg in call.sip_legs():
                # keep the mapping briefly so late retransmissions are still answered
                self.reactor.call_later(32.0, lambda k=leg.sip_call_id: self._legs.pop(k, None))

    # -- API ------------------------------------------------------------------

    def create_connection(self, call: JccCall, target: str, peer: "str | SipConnection | None" = None) -> JccConnection:
        self._api(call, "createConnection")
        return self._create_connection(call, target, peer)

    def _create_connection(self, call, target, peer=None) -> JccConnection:
        if call.state == "INVALID":
            raise IllegalState(f"{call.id} is invalid")
        address = JccAddress.parse(target)
        if address.scheme == "mgcp":
            peer_conn = self._find_peer(call, peer)
            if peer_conn.peer_sdp is None:
                raise PeerSdpMissing(f"{peer_conn.id} has no SDP yet")
            conn: JccConnection = MgcpConnection(self, call, address, peer_conn)
        else:
            conn = SipConnection(self, call, address, incoming=False)
        call.connections.append(conn)
        self._fire(JccEvent("CONNECTION_CREATED", conn))
        return conn

    def _find_peer(self, call: JccCall, peer) -> SipConnection:
        if isinstance(peer, SipConnection) and peer in call.connections:
            return peer
        for conn in call.connections:
            if isinstance(conn, SipConnection) and isinstance(peer, str) and str(conn.address) == peer:
                return conn
        raise NoSuchPeerConnection(f"no SIP connection {peer!r} on {call.id}")

    def route_connection(self, conn: MgcpConnection, flag: bool = False) -> None:
        self._api(conn.call, "routeConnection")
        if not isinstance(conn, MgcpConnection):
            raise IllegalArgument("routeConnection applies to MGCP connections")
        if flag:
            raise IllegalArgument("routeConnection(true) has no defined behavior")
        if conn.terminal:
            raise TerminalConnection(conn.id)
        if conn.handler.phase not in (h.IDLE, h.ERROR) or (
            conn.handler.phase == h.IDLE and conn.jcc_state != IDLE and not conn.handler.first_connect_done
        ):
            raise IllegalState(f"{conn.id}: handler {conn.handler.phase}, JCC {conn.jcc_state}")
        conn.route_flag = flag
        conn.ledger = conn.ledger.commit_connection_values()
        step = h.crcx_step(conn.ledger.committed, conn.peer.peer_sdp)
        conn._feed(h.CmdRouteConnection(step), strict=True)

    def select_route(self, conn: MgcpConnection, param: str) -> None:
        self._api(conn.call, "selectRoute")
        if conn.terminal:
            raise TerminalConnection(conn.id)
        if not isinstance(conn, MgcpConnection):
            raise IllegalArgument("selectRoute applies to MGCP connections")
        name, value = h.parse_select_route(param)
        conn.ledger = conn.ledger.with_pending(name, value)

    def attach_media(self, conn: MgcpConnection) -> None:
        self._api(conn.call, "attachMedia")
        if not isinstance(conn, MgcpConnection):
            raise IllegalArgument("attachMedia applies to MGCP connections")
        if conn.jcc_state != CONNECTED:
            raise IllegalState(f"{conn.id} is {conn.jcc_state}")
        plan, ledger = h.flush_ledger(conn.ledger, conn.handler)
        conn._feed(h.CmdFlush(plan), strict=True)
        conn.ledger = ledger

    def release(self, conn: JccConnection, cause: int | None = None) -> None:
        self._api(conn.call, "release")
        if conn.terminal:
            raise TerminalConnection(conn.id)
        if isinstance(conn, MgcpConnection):
            self._release_mgcp(conn)
        else:
            self._release_sip(conn, cause)

    def route_call(self, call: JccCall, callee: str, caller: SipConnection) -> SipConnection:
        self._api(call, "routeCall")
        if not isinstance(caller, SipConnection) or caller not in call.connections:
            raise NoSuchPeerConnection("caller must be a SIP connection of this call")
        if caller.peer_sdp is None or caller.terminal:
            raise IllegalState(f"{caller.id} holds no SDP offer")
        address = JccAddress.parse(callee)
        if address.scheme != "sip":
            raise InvalidTargetScheme(callee)
        leg = self._create_connection(call, callee)
        leg.partner, caller.partner = caller, leg
        self._invite(leg, caller)
        return leg

    # -- MGCP side ------------------------------------------------------------

    def _release_mgcp(self, conn: MgcpConnection) -> None:
        phase = conn.handler.phase
        if phase in (h.CONNECTED, h.ERROR):
            conn._feed(h.CmdRelease(), strict=True)
        elif phase in (h.IN_CONNECTION, h.RECONNECTION):
            conn.release_pending = True
        elif phase == h.IDLE:
            conn._set_state(FAILED, "RELEASED")
        # InDisconnection: already on its way out

    def _run_handler_actions(self, conn: MgcpConnection, actions: list) -> None:
        # the endpoint map follows the handler's current endpoint, before any
        # event can make the application send more commands
        for key in [k for k, v in self._ms_endpoints.items() if v is conn and k != conn.handler.ms_endpoint]:
            del self._ms_endpoints[key]
        if conn.handler.ms_endpoint and conn.handler.phase != h.DISCONNECTED:
            self._ms_endpoints[conn.handler.ms_endpoint] = conn
        for action in actions:
            if isinstance(action, h.EmitCommand):
                verb = action.command.verb
                host, _, port = action.address.rpartition(":")
                self.mgcp.send_command(
                    action.command, (host, int(port)), lambda o, r, c=conn, v=verb: self._mgcp_result(c, v, o, r)
                )
            elif isinstance(action, h.SetJccState):
                conn._set_state(action.state, fire=False)
            elif isinstance(action, h.FireEvent):
                payload = MappingProxyType(dict(action.payload)) if action.payload is not None else None
                self._fire(JccEvent(action.kind, conn, action.cause, payload))
            elif isinstance(action, h.AnswerSipLeg):
                conn.local_sdp = action.sdp
                peer = conn.peer
                if action.sdp is not None and peer.has_pending_offer and not peer.terminal:
                    self._respond_invite(peer, 183, action.sdp)

    def _mgcp_result(self, conn: MgcpConnection, verb: str, outcome: str, resp: MgcpResponse | None) -> None:
        if outcome == "tx_timeout":
            event = h.TxTimeout(verb)
        elif outcome == "success":
            if verb == "CRCX":
                event = h.RxCrcxOk(resp.param("I") or "", resp.sdp, resp.param("Z"))
            else:
                event = {"MDCX": h.RxMdcxOk, "DLCX": h.RxDlcxOk, "RQNT": h.RxRqntOk}[verb]()
        else:
            fail = {"CRCX": h.RxCrcxFail, "MDCX": h.RxMdcxFail, "DLCX": h.RxDlcxFail, "RQNT": h.RxRqntFail}[verb]
            event = fail(resp.code)
        conn._feed(event, strict=False)

    def _mgcp_command(self, cmd: MgcpCommand, src: Address) -> MgcpResponse:
        if cmd.verb != "NTFY":
            return MgcpResponse(510, cmd.transaction_id, "call agent accepts NTFY only")
        conn = self._ms_endpoints.get(cmd.endpoint_id)
        if conn is not None:
            self.reactor.call_soon(lambda: conn._feed(h.RxNtfy(cmd.param("X"), cmd.param("O")), strict=False))
        else:
            log.info("NTFY for unknown endpoint %s acknowledged and dropped", cmd.endpoint_id)
        return MgcpResponse(200, cmd.transaction_id, "OK")

    def _mgcp_tap(self, direction: str, msg, peer: Address) -> None:
        call = None
        if isinstance(msg, MgcpCommand):
            if direction == "out":
                call = self.calls.get(msg.param("C") or "")
                if call is None:
                    conn = self._ms_endpoints.get(msg.endpoint_id)
                    call = conn.call if conn else None
                if call is not None:
                    self._mgcp_out[msg.transaction_id] = call
            else:
                conn = self._ms_endpoints.get(msg.endpoint_id)
                if conn is not None:
                    call = conn.call
                    self._mgcp_in[(peer, msg.transaction_id)] = call
        elif direction == "in":
            call = self._mgcp_out.get(msg.transaction_id)
        else:
            call = self._mgcp_in.get((peer, msg.transaction_id))
        if call is not None:
            call.wire_messages += 1

    # -- SIP side -------------------------------------------------------------

    def _sip_tap(self, direction: str, msg: SipMessage, peer: Address) -> None:
        leg = self._legs.get(msg.call_id)
        if leg is not None:
            leg.call.wire_messages += 1

    def _sip_request(self, msg: SipMessage, src: Address) -> None:
        leg = self._legs.get(msg.call_id)
        if msg.method == "INVITE":
            if leg is None:
                self._incoming_invite(msg, src)
            elif msg.to_tag:
                self.sip.respond(msg, build_response(msg, 488, reason="Re-INVITE not supported"))
            return
        if leg is None:
            if msg.method == "BYE":
                self.sip.respond(msg, build_response(msg, 481))
            return
        if msg.method == "ACK":
            if leg.ok_timer is not None:
                leg.ok_timer.cancel()
                leg.ok_timer = None
            if leg.final_sent and leg.ok_response is not None and leg.jcc_state in (CALL_DELIVERY, ALERTING):
                leg._set_state(CONNECTED)
        elif msg.method == "BYE":
            self.sip.respond(msg, build_response(msg, 200))
            if leg.jcc_state in (CONNECTED, ALERTING):
                leg._set_state(DISCONNECTED)

    def _incoming_invite(self, msg: SipMessage, src: Address) -> None:
        try:
            offer = parse_sdp(msg.body) if msg.body else None
        except MalformedSdp:
            self.sip.respond(msg, build_response(msg, 400, reason="Bad SDP"))
            return
        if self.shut_down:
            self.sip.respond(msg, build_response(msg, 480))
            return
        from_value = msg.header("From") or ""
        user_uri = from_value[from_value.index("<") + 1 : from_value.index(">")] if "<" in from_value else from_value.split(";")[0]
        call = self._new_call()
        leg = SipConnection(self, call, JccAddress("sip", user_uri.strip()), incoming=True)
        leg.sip_call_id = msg.call_id
        leg.peer_addr = src
        leg.invite = msg
        leg.peer_sdp = offer
        leg.local_tag = self.sip.new_tag()
        leg.remote_tag = msg.from_tag
        leg.local_header = msg.header("To") or ""
        leg.remote_header = from_value
        contact = msg.header("Contact")
        leg.remote_target = (contact.strip("<>") if contact else "") or f"sip:{src[0]}:{src[1]}"
        self._legs[msg.call_id] = leg
        call.wire_messages += 2  # the INVITE and its 100, tapped before the leg existed
        call.connections.append(leg)
        self._fire(JccEvent("CONNECTION_CREATED", leg))
        leg._set_state(CALL_DELIVERY)

    def _respond_invite(self, leg: SipConnection, status: int, sdp: SdpSession | None = None) -> None:
        body = serialize_sdp(sdp).encode() if sdp is not None else b""
        resp = build_response(leg.invite, status, to_tag=leg.local_tag, contact=self.sip.contact, body=body)
        if status >= 200:
            leg.final_sent = True
        self.sip.respond(leg.invite, resp)
        if 200 <= status < 300:
            leg.ok_response = resp
            leg.local_sdp = sdp
            self._arm_ok_retransmit(leg, 0.5)

    def _arm_ok_retransmit(self, leg: SipConnection, delay: float) -> None:
        def again() -> None:
            leg.ok_timer = None
            if leg.jcc_state in TERMINAL or delay > self.sip.timers.max_delay:
                return
            self.sip.send_stateless(leg.ok_response, leg.peer_addr)
            self._arm_ok_retransmit(leg, min(delay * 2, 4.0) if delay < 4.0 else delay + 4.0)

        leg.ok_timer = self.reactor.call_later(delay, again)

    def _invite(self, leg: SipConnection, caller: SipConnection) -> None:
        leg.sip_call_id = self.sip.new_call_id()
        leg.local_tag = self.sip.new_tag()
        user = uri_user(caller.address.literal) or "pcs"
        leg.local_header = f"<sip:{user}@{self.sip.host}>"
        leg.remote_header = f"<{leg.address.literal}>"
        leg.remote_target = leg.address.literal
        leg.peer_addr = leg.address.host_port
        leg.local_cseq = 1
        body = serialize_sdp(caller.peer_sdp).encode()
        invite = build_request(
            "INVITE",
            leg.address.literal,
            via=self.sip.via(),
            from_=f"{leg.local_header};tag={leg.local_tag}",
            to=leg.remote_header,
            call_id=leg.sip_call_id,
            cseq=1,
            contact=self.sip.contact,
            body=body,
        )
        leg.invite = invite
        self._legs[leg.sip_call_id] = leg
        leg._set_state(CALL_DELIVERY, fire=False)
        self.sip.send_request(invite, leg.peer_addr, lambda o, m, l=leg: self._invite_result(l, o, m))

    def _invite_result(self, leg: SipConnection, outcome: str, msg: SipMessage | None) -> None:
        if leg.terminal:
            if outcome == "final" and msg is not None and 200 <= msg.status < 300:
                self._ack_and_bye(leg, msg)
            return
        if outcome == "timeout":
            leg._set_state(FAILED, "408")
            return
        status = msg.status
        if outcome == "provisional":
            if status == 180 and leg.jcc_state == CALL_DELIVERY:
                leg._set_state(ALERTING)
                partner = leg.partner
                if self.relay_ringing and partner is not None and partner.has_pending_offer:
                    self._respond_invite(partner, 180)
            return
        if status >= 300:
            leg._set_state(FAILED, str(status))
            return
        leg.remote_tag = msg.to_tag
        leg.remote_header = msg.header("To") or leg.remote_header
        contact = msg.header("Contact")
        if contact:
            leg.remote_target = contact.strip("<>")
        try:
            leg.peer_sdp = parse_sdp(msg.body) if msg.body else None
        except MalformedSdp:
            leg.peer_sdp = None
        leg.ack = self._build_ack(leg, msg)
        self.sip.send_request(leg.ack, leg.peer_addr)
        if leg.release_on_answer:
            leg._set_state(CONNECTED, fire=False)
            self._send_bye(leg)
            return
        leg._set_state(CONNECTED)
        partner = leg.partner
        if partner is not None and partner.has_pending_offer and not partner.terminal:
            self._respond_invite(partner, 200, leg.peer_sdp)

    def _build_ack(self, leg: SipConnection, ok: SipMessage) -> SipMessage:
        return build_request(
            "ACK",
            leg.remote_target,
            via=self.sip.via(),
            from_=f"{leg.local_header};tag={leg.local_tag}",
            to=ok.header("To") or leg.remote_header,
            call_id=leg.sip_call_id,
            cseq=leg.invite.cseq[0],
        )

    def _ack_and_bye(self, leg: SipConnection, ok: SipMessage) -> None:
        leg.remote_header = ok.header("To") or leg.remote_header
        leg.ack = self._build_ack(leg, ok)
        self.sip.send_request(leg.ack, leg.peer_addr)
        self._send_bye(leg)

    def _sip_stray_response(self, msg: SipMessage, src: Address) -> None:
        leg = self._legs.get(msg.call_id)
        try:
            method = msg.cseq[1]
        except SipError:
            return
        if leg is not None and method == "INVITE" and 200 <= msg.status < 300 and leg.ack is not None:
            self.sip.send_stateless(leg.ack, src)

    def _release_sip(self, leg: SipConnection, cause: int | None) -> None:
        if leg.jcc_state in (CONNECTED,) or (leg.incoming and leg.ok_response is not None):
            self._send_bye(leg)
        elif leg.incoming:
            self._respond_invite(leg, cause or 480)
            leg._set_state(FAILED, str(cause or 480))
        elif leg.jcc_state == IDLE:
            leg._set_state(FAILED, "RELEASED")
        else:
            # no CANCEL support: hang up as soon as an answer shows up
            leg.release_on_answer = True
            leg._set_state(FAILED, "RELEASED")

    def _send_bye(self, leg: SipConnection) -> None:
        if leg.bye_sent:
            return
        leg.bye_sent = True
        leg.local_cseq += 1
        bye = build_request(
            "BYE",
            leg.remote_target,
            via=self.sip.via(),
            from_=f"{leg.local_header};tag={leg.local_tag}",
            to=leg.remote_header,
            call_id=leg.sip_call_id,
            cseq=leg.local_cseq,
        )
        self.sip.send_request(bye, leg.peer_addr, lambda o, m, l=leg: self._bye_result(l, o, m))

    def _bye_result(self, leg: SipConnection, outcome: str, msg: SipMessage | None) -> None:
        if outcome == "provisional":
            return
        cause = None if outcome == "final" else "408"
        if leg.jcc_state in (CONNECTED, ALERTING):
            leg._set_state(DISCONNECTED, cause)
        elif not leg.terminal:
            leg._set_state(FAILED, cause or "RELEASED")
