"""Pure SIP transaction state machine (UDP, reduced RFC 3261 timer set).

``sip_transaction_step`` maps ``(state, event)`` to ``(state, actions)`` and
never touches a socket or a clock; the driver in :mod:`.endpoint` executes
the returned actions.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Union

from .message import SipMessage, build_ack_for_failure, build_response

log = logging.getLogger(__name__)

CALLING = "Calling"
PROCEEDING = "Proceeding"
COMPLETED = "Completed"
TERMINATED = "Terminated"

CLIENT = "client"
SERVER = "server"


class IllegalEventForState(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class SipTimers:
    base: float = 0.5
    max_retransmits: int = 6
    max_delay: float = 32.0  # INVITE retransmission cap
    non_invite_max_delay: float = 4.0
    completed_linger: float = 32.0


@dataclasses.dataclass(frozen=True)
class SipTxState:
    role: str
    phase: str = CALLING
    retransmit_count: int = 0
    last_message: SipMessage | None = None
    request: SipMessage | None = None
    timers: SipTimers = SipTimers()

    @property
    def is_invite(self) -> bool:
        return self.request is not None and self.request.method == "INVITE"

    def delay(self, k: int) -> float:
        cap = self.timers.max_delay if self.is_invite else self.timers.non_invite_max_delay
        return min(self.timers.base * (2**k), cap)


# events
@dataclasses.dataclass(frozen=True)
class Send:
    msg: SipMessage


@dataclasses.dataclass(frozen=True)
class Rx:
    msg: SipMessage


@dataclasses.dataclass(frozen=True)
class TimerRetransmit:
    pass


@dataclasses.dataclass(frozen=True)
class TimerTimeout:
    pass


SipTxEvent = Union[Send, Rx, TimerRetransmit, TimerTimeout]


# actions
@dataclasses.dataclass(frozen=True)
class Emit:
    msg: SipMessage


@dataclasses.dataclass(frozen=True)
class ArmTimer:
    kind: str  # "retransmit" | "timeout"
    delay: float


@dataclasses.dataclass(frozen=True)
class Notify:
    outcome: str  # "request" | "provisional" | "final" | "timeout"
    msg: SipMessage | None = None


def sip_transaction_step(state: SipTxState, event: SipTxEvent) -> tuple[SipTxState, list]:
    if state.phase == TERMINATED:
        return state, []
    if state.role == CLIENT:
        return _client_step(state, event)
    return _server_step(state, event)


def _illegal(state: SipTxState, event) -> IllegalEventForState:
    return IllegalEventForState(f"{state.role} transaction in {state.phase} cannot take {event!r}")


def _client_step(st: SipTxState, ev: SipTxEvent):
    replace = dataclasses.replace
    if isinstance(ev, Send):
        if st.phase != CALLING or st.request is not None or not ev.msg.is_request:
            raise _illegal(st, ev)
        st = replace(st, request=ev.msg, last_message=ev.msg)
        return st, [Emit(ev.msg), ArmTimer("retransmit", st.delay(0))]

    if isinstance(ev, TimerRetransmit):
        # INVITE stops retransmitting on a provisional; non-INVITE keeps going
        if st.phase != CALLING and not (st.phase == PROCEEDING and not st.is_invite):
            return st, []
        if st.retransmit_count >= st.timers.max_retransmits:
            return st, []
        count = st.retransmit_count + 1
        st = replace(st, retransmit_count=count)
        if count >= st.timers.max_retransmits:
            return st, [Emit(st.request), ArmTimer("timeout", st.delay(count))]
        return st, [Emit(st.request), ArmTimer("retransmit", st.delay(count))]

    if isinstance(ev, TimerTimeout):
        if st.phase == COMPLETED:
            return replace(st, phase=TERMINATED), []
        if st.phase in (CALLING, PROCEEDING):
            return replace(st, phase=TERMINATED), [Notify("timeout", st.request)]
        raise _illegal(st, ev)

    if isinstance(ev, Rx):
        msg = ev.msg
        if msg.is_request:
            raise _illegal(st, ev)
        status = msg.status or 0
        if status < 200:
            if st.phase not in (CALLING, PROCEEDING):
                return st, []
            return replace(st, phase=PROCEEDING), [Notify("provisional", msg)]
        if st.phase == COMPLETED:
            # retransmitted final response
            if st.is_invite and status >= 300:
                return st, [Emit(st.last_message)]
            return st, []
        if st.is_invite and status >= 300:
            ack = build_ack_for_failure(st.request, msg)
            st = replace(st, phase=COMPLETED, last_message=ack)
            return st, [Emit(ack), Notify("final", msg), ArmTimer("timeout", st.timers.completed_linger)]
        return replace(st, phase=TERMINATED), [Notify("final", msg)]

    raise _illegal(st, ev)


def _server_step(st: SipTxState, ev: SipTxEvent):
    replace = dataclasses.replace
    if isinstance(ev, Rx):
        msg = ev.msg
        if not msg.is_request:
            raise _illegal(st, ev)
        if st.phase == CALLING:
            st = replace(st, phase=PROCEEDING, request=msg)
            if msg.method == "INVITE":
                trying = build_response(msg, 100)
                st = replace(st, last_message=trying)
                return st, [Emit(trying), Notify("request", msg)]
            return st, [Notify("request", msg)]
        if msg.method == "ACK":
            if st.phase == COMPLETED and st.is_invite:
                return replace(st, phase=TERMINATED), []
            return st, []
        # retransmitted request: repeat the last response, if any
        if st.last_message is not None:
            return st, [Emit(st.last_message)]
        return st, []

    if isinstance(ev, Send):
        msg = ev.msg
        if msg.is_request or st.phase != PROCEEDING:
            raise _illegal(st, ev)
        status = msg.status or 0
        if status < 200:
            if not st.is_invite:
                raise _illegal(st, ev)
            return replace(st, last_message=msg), [Emit(msg)]
        if st.is_invite and status < 300:
            return replace(st, phase=TERMINATED, last_message=msg), [Emit(msg)]
        st = replace(st, phase=COMPLETED, last_message=msg)
        if st.is_invite:
            return st, [Emit(msg), ArmTimer("retransmit", st.delay(0))]
        return st, [Emit(msg), ArmTimer("timeout", st.timers.completed_linger)]

    if isinstance(ev, TimerRetransmit):
        if st.phase != COMPLETED or not st.is_invite:
            return st, []
        if st.retransmit_count >= st.timers.max_retransmits:
            return st, []
        count = st.retransmit_count + 1
        st = replace(st, retransmit_count=count)
        if count >= st.timers.max_retransmits:
            return st, [Emit(st.last_message), ArmTimer("timeout", st.delay(count))]
        return st, [Emit(st.last_message), ArmTimer("retransmit", st.delay(count))]

    if isinstance(ev, TimerTimeout):
        if st.phase != COMPLETED:
            raise _illegal(st, ev)
        outcome = [Notify("timeout", st.request)] if st.is_invite else []
        return replace(st, phase=TERMINATED), outcome

    raise _illegal(st, ev)
