"""Pure MGCP command transaction FSM for the sending side."""

from __future__ import annotations

import dataclasses
import logging
from typing import Union

from .message import MgcpCommand, MgcpResponse

log = logging.getLogger(__name__)

SENT = "Sent"
COMPLETED = "Completed"
TIMED_OUT = "TimedOut"


class TxIdMismatch(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class MgcpTimers:
    base: float = 0.2
    max_retransmits: int = 4

    def delay(self, k: int) -> float:
        return self.base * (2**k)


@dataclasses.dataclass(frozen=True)
class MgcpTxState:
    command: MgcpCommand
    phase: str = SENT
    retransmit_count: int = 0
    timers: MgcpTimers = MgcpTimers()


@dataclasses.dataclass(frozen=True)
class SendCmd:
    pass


@dataclasses.dataclass(frozen=True)
class RxResponse:
    response: MgcpResponse


@dataclasses.dataclass(frozen=True)
class TimerRetransmit:
    pass


@dataclasses.dataclass(frozen=True)
class TimerTimeout:
    pass


MgcpTxEvent = Union[SendCmd, RxResponse, TimerRetransmit, TimerTimeout]


@dataclasses.dataclass(frozen=True)
class Emit:
    command: MgcpCommand


@dataclasses.dataclass(frozen=True)
class ArmTimer:
    kind: str
    delay: float


@dataclasses.dataclass(frozen=True)
class Notify:
    outcome: str  # "success" | "failure" | "tx_timeout"
    response: MgcpResponse | None = None


def mgcp_transaction_step(state: MgcpTxState, event: MgcpTxEvent) -> tuple[MgcpTxState, list]:
    """Advance one command transaction.

    A transaction completes exactly once: after ``Completed`` or ``TimedOut``
    every further event (duplicate responses, stale timers) is absorbed.
    """
    if state.phase != SENT:
        return state, []
    replace = dataclasses.replace
    timers = state.timers

    if isinstance(event, SendCmd):
        if state.retransmit_count:
            return state, []
        return state, [Emit(state.command), ArmTimer("retransmit", timers.delay(0))]

    if isinstance(event, RxResponse):
        r = event.response
        if r.transaction_id != state.command.transaction_id:
            raise TxIdMismatch(f"response {r.transaction_id} for command {state.command.transaction_id}")
        if 100 <= r.code < 200:
            return state, []  # provisional: keep waiting
        outcome = "success" if 200 <= r.code < 300 else "failure"
        return replace(state, phase=COMPLETED), [Notify(outcome, r)]

    if isinstance(event, TimerRetransmit):
        if state.retransmit_count >= timers.max_retransmits:
            return state, []
        count = state.retransmit_count + 1
        state = replace(state, retransmit_count=count)
        kind = "timeout" if count >= timers.max_retransmits else "retransmit"
        return state, [Emit(state.command), ArmTimer(kind, timers.delay(count))]

    if isinstance(event, TimerTimeout):
        return replace(state, phase=TIMED_OUT), [Notify("tx_timeout")]

    raise TypeError(f"unknown event {event!r}")
