"""MGCP protocol endpoint: outbound command transactions plus inbound
command handling with duplicate suppression.

Used both by the call agent and by the simulated media server.
"""

from __future__ import annotations

import collections
import dataclasses
import logging
from typing import Callable

from ..clock import Reactor, Timer
from .message import MAX_TXID, MgcpCommand, MgcpError, MgcpResponse, parse_mgcp, serialize_mgcp
from .transaction import (
    SENT,
    ArmTimer,
    Emit,
    MgcpTimers,
    MgcpTxState,
    Notify,
    RxResponse,
    SendCmd,
    TimerRetransmit,
    TimerTimeout,
    TxIdMismatch,
    mgcp_transaction_step,
)

log = logging.getLogger(__name__)

Address = tuple[str, int]
ResultCallback = Callable[[str, MgcpResponse | None], None]

_PENDING = object()


class _Tx:
    __slots__ = ("state", "peer", "callback", "timer")

    def __init__(self, state: MgcpTxState, peer: Address, callback: ResultCallback | None):
        self.state = state
        self.peer = peer
        self.callback = callback
        self.timer: Timer | None = None


class MgcpEndpoint:
    def __init__(self, reactor: Reactor, *, timers: MgcpTimers = MgcpTimers(), name: str = "mgcp", answered_cache: int = 50_000):
        self.reactor = reactor
        self.timers = timers
        self.name = name
        self.transport = None
        self.on_command: Callable[[MgcpCommand, Address], MgcpResponse | None] | None = None
        self.taps: list[Callable[[str, object, Address], None]] = []
        self._txid = 0
        self._tx: dict[int, _Tx] = {}
        self._answered: collections.OrderedDict = collections.OrderedDict()
        self._answered_cap = answered_cache

    def next_txid(self) -> int:
        self._txid = self._txid % MAX_TXID + 1
        return self._txid

    def _wire_out(self, msg, peer: Address) -> None:
        for tap in self.taps:
            tap("out", msg, peer)
        self.transport.send(peer, serialize_mgcp(msg))

    # -- outbound commands ---------------------------------------------------

    def send_command(self, cmd: MgcpCommand, dst: Address, callback: ResultCallback | None = None) -> MgcpCommand:
        """Send ``cmd``; a zero transaction id is replaced by a fresh one."""
        if cmd.transaction_id == 0:
            cmd = dataclasses.replace(cmd, transaction_id=self.next_txid())
        tx = _Tx(MgcpTxState(cmd, timers=self.timers), dst, callback)
        self._tx[cmd.transaction_id] = tx
        self._step(tx, SendCmd())
        return cmd

    def in_flight(self) -> int:
        return len(self._tx)

    def _step(self, tx: _Tx, event) -> None:
        try:
            tx.state, actions = mgcp_transaction_step(tx.state, event)
        except TxIdMismatch as exc:
            log.warning("%s: %s", self.name, exc)
            return
        for action in actions:
            if isinstance(action, Emit):
                self._wire_out(action.command, tx.peer)
            elif isinstance(action, ArmTimer):
                if tx.timer is not None:
                    tx.timer.cancel()
                ev = TimerRetransmit() if action.kind == "retransmit" else TimerTimeout()
                tx.timer = self.reactor.call_later(action.delay, lambda tx=tx, ev=ev: self._step(tx, ev))
            elif isinstance(action, Notify):
                if tx.state.phase != SENT:
                    self._finish(tx)
                if tx.callback is not None:
                    tx.callback(action.outcome, action.response)

    def _finish(self, tx: _Tx) -> None:
        if tx.timer is not None:
            tx.timer.cancel()
            tx.timer = None
        self._tx.pop(tx.state.command.transaction_id, None)

    # -- inbound ------------------------------------------------------------

    def datagram_received(self, data: bytes, src: Address) -> None:
        try:
            msg = parse_mgcp(data)
        except (MgcpError, UnicodeDecodeError) as exc:
            log.warning("%s: dropping bad datagram from %s: %s", self.name, src, exc)
            first = data.split(b"\r\n", 1)[0].split()
            if len(first) >= 2 and first[1].isdigit():
                self.transport.send(src, f"510 {int(first[1])} protocol error\r\n".encode())
            return
        for tap in self.taps:
            tap("in", msg, src)
        if isinstance(msg, MgcpResponse):
            tx = self._tx.get(msg.transaction_id)
            if tx is None:
                return  # late duplicate
            self._step(tx, RxResponse(msg))
            return

        key = (src, msg.transaction_id)
        cached = self._answered.get(key)
        if cached is _PENDING:
            return
        if cached is not None:
            self._wire_out(cached, src)
            return
        self._answered[key] = _PENDING
        while len(self._answered) > self._answered_cap:
            self._answered.popitem(last=False)
        response = self.on_command(msg, src) if self.on_command else MgcpResponse(500, msg.transaction_id, "no handler")
        if response is not None:
            self.respond(src, response)

    def respond(self, dst: Address, response: MgcpResponse) -> None:
        self._answered[(dst, response.transaction_id)] = response
        self._wire_out(response, dst)
