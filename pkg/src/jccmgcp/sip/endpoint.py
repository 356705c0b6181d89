"""SIP transport user: runs transactions over a datagram transport.

One ``SipEndpoint`` per bound address. It parses datagrams, matches them to
client/server transactions, executes the actions of the pure transaction
FSM (emit, arm timer, notify) and hands new requests to its owner.
"""

from __future__ import annotations

import itertools
import logging
from typing import Callable

from ..clock import Reactor, Timer
from .message import SUPPORTED_METHODS, SipError, SipMessage, build_response, parse_sip, serialize_sip
from .transaction import (
    CLIENT,
    SERVER,
    TERMINATED,
    ArmTimer,
    Emit,
    IllegalEventForState,
    Notify,
    Rx,
    Send,
    SipTimers,
    SipTxState,
    TimerRetransmit,
    TimerTimeout,
    sip_transaction_step,
)

log = logging.getLogger(__name__)

Address = tuple[str, int]
TxCallback = Callable[[str, SipMessage | None], None]


class _Tx:
    __slots__ = ("key", "state", "peer", "callback", "timers")

    def __init__(self, key, state: SipTxState, peer: Address, callback: TxCallback | None):
        self.key = key
        self.state = state
        self.peer = peer
        self.callback = callback
        self.timers: dict[str, Timer] = {}


class SipEndpoint:
    def __init__(self, reactor: Reactor, host: str, port: int = 5060, *, timers: SipTimers = SipTimers(), prefix: str = "ua"):
        self.reactor = reactor
        self.host = host
        self.port = port
        self.timers = timers
        self.prefix = prefix
        self.transport = None
        self.on_request: Callable[[SipMessage, Address], None] | None = None
        self.on_stray_response: Callable[[SipMessage, Address], None] | None = None
        self.taps: list[Callable[[str, SipMessage, Address], None]] = []
        self._client: dict[tuple[str, str], _Tx] = {}
        self._server: dict[tuple[str, str], _Tx] = {}
        self._ids = itertools.count(1)

    # -- identifiers --------------------------------------------------------

    def new_branch(self) -> str:
        return f"z9hG4bK-{self.prefix}-{next(self._ids)}"

    def new_tag(self) -> str:
        return f"{self.prefix}t{next(self._ids)}"

    def new_call_id(self) -> str:
        return f"{self.prefix}-{next(self._ids)}@{self.host}"

    def via(self, branch: str | None = None) -> str:
        return f"SIP/2.0/UDP {self.host}:{self.port};branch={branch or self.new_branch()}"

    @property
    def contact(self) -> str:
        return f"<sip:{self.prefix}@{self.host}:{self.port}>"

    # -- wire ---------------------------------------------------------------

    def _wire_out(self, msg: SipMessage, peer: Address) -> None:
        for tap in self.taps:
            tap("out", msg, peer)
        self.transport.send(peer, serialize_sip(msg))

    def datagram_received(self, data: bytes, src: Address) -> None:
        try:
            msg = parse_sip(data)
        except SipError as exc:
            log.warning("%s: dropping unparsable datagram from %s: %s", self.prefix, src, exc)
            return
        for tap in self.taps:
            tap("in", msg, src)
        if msg.is_request:
            self._request_in(msg, src)
        else:
            self._response_in(msg, src)

    def _request_in(self, msg: SipMessage, src: Address) -> None:
        if msg.method not in SUPPORTED_METHODS:
            self._wire_out(build_response(msg, 405), src)
            return
        branch = msg.branch or ""
        lookup = "INVITE" if msg.method == "ACK" else msg.method
        tx = self._server.get((branch, lookup))
        if tx is not None:
            self._step(tx, Rx(msg))
            return
        if msg.method == "ACK":
            # ACK for a 2xx is its own request, outside any transaction
            if self.on_request:
                self.on_request(msg, src)
            return
        tx = _Tx((branch, msg.method), SipTxState(SERVER, timers=self.timers), src, None)
        self._server[tx.key] = tx
        self._step(tx, Rx(msg))

    def _response_in(self, msg: SipMessage, src: Address) -> None:
        try:
            key = (msg.branch or "", msg.cseq[1])
        except SipError:
            return
        tx = self._client.get(key)
        if tx is None:
            if self.on_stray_response:
                self.on_stray_response(msg, src)
            return
        self._step(tx, Rx(msg))

    # -- API ----------------------------------------------------------------

    def send_request(self, msg: SipMessage, dst: Address, callback: TxCallback | None = None) -> None:
        if msg.method == "ACK":
            self._wire_out(msg, dst)
            return
        key = (msg.branch or "", msg.method)
        tx = _Tx(key, SipTxState(CLIENT, timers=self.timers), dst, callback)
        self._client[key] = tx
        self._step(tx, Send(msg))

    def respond(self, request: SipMessage, response: SipMessage) -> None:
        tx = self._server.get((request.branch or "", request.method))
        if tx is None:
            raise IllegalEventForState(f"no server transaction for {request.summary()}")
        self._step(tx, Send(response))

    def send_stateless(self, msg: SipMessage, dst: Address) -> None:
        """Send outside any transaction (2xx retransmission, repeated ACK)."""
        self._wire_out(msg, dst)

    def active_transactions(self) -> int:
        return len(self._client) + len(self._server)

    # -- driver -------------------------------------------------------------

    def _step(self, tx: _Tx, event) -> None:
        try:
            tx.state, actions = sip_transaction_step(tx.state, event)
        except IllegalEventForState as exc:
            log.warning("%s: %s", self.prefix, exc)
            return
        for action in actions:
            if isinstance(action, Emit):
                self._wire_out(action.msg, tx.peer)
            elif isinstance(action, ArmTimer):
                old = tx.timers.pop(action.kind, None)
                if old is not None:
                    old.cancel()
                ev = TimerRetransmit() if action.kind == "retransmit" else TimerTimeout()
                tx.timers[action.kind] = self.reactor.call_later(action.delay, lambda tx=tx, ev=ev: self._step(tx, ev))
            elif isinstance(action, Notify):
                if action.outcome == "request":
                    if self.on_request:
                        self.on_request(action.msg, tx.peer)
                elif tx.callback is not None:
                    tx.callback(action.outcome, action.msg)
        if tx.state.phase == TERMINATED:
            for timer in tx.timers.values():
                timer.cancel()
            tx.timers.clear()
            table = self._client if tx.state.role == CLIENT else self._server
            if tx.state.role == SERVER and tx.state.is_invite:
                # keep a terminated INVITE server tx briefly to absorb retransmissions
                self.reactor.call_later(self.timers.completed_linger, lambda: table.pop(tx.key, None))
            else:
                table.pop(tx.key, None)
