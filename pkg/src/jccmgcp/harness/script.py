"""Scripted SIP user agents for load generation.

A :class:`ScenarioScript` is a straight list of steps run once per call by
:class:`UacSimulator`. Any unexpected final response or timeout aborts the
call. :class:`UasSimulator` answers every INVITE with 100, 180 and 200 (or a
configured rejection) after fixed delays.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Mapping, Union

from ..clock import Reactor, Timer
from ..sdp import MalformedSdp, make_sdp, parse_sdp, serialize_sdp
from ..sip.endpoint import SipEndpoint
from ..sip.message import SipMessage, build_request, build_response
from .metrics import CallRecord

log = logging.getLogger(__name__)

Address = tuple[str, int]
DtmfSink = Callable[[str, int, str], None]  # (media host, media port, digit)


@dataclasses.dataclass(frozen=True)
class SendInvite:
    pass


@dataclasses.dataclass(frozen=True)
class AwaitStatus:
    statuses: frozenset[int]


@dataclasses.dataclass(frozen=True)
class Pause:
    seconds: float


@dataclasses.dataclass(frozen=True)
class InjectDtmf:
    digits: str  # may hold {card}, {pin}, {callee} placeholders
    gap: float = 0.1


@dataclasses.dataclass(frozen=True)
class Hold:
    """Stay in the call; ends early if the far end hangs up."""

    seconds: float


@dataclasses.dataclass(frozen=True)
class SendBye:
    pass


Step = Union[SendInvite, AwaitStatus, Pause, InjectDtmf, Hold, SendBye]


@dataclasses.dataclass(frozen=True)
class ScenarioScript:
    steps: tuple[Step, ...]

    @classmethod
    def pcs(cls, call_length: float, *, compact: bool = False, prompt_wait: float = 2.5, gap: float = 0.1) -> "ScenarioScript":
        if compact:
            collect: tuple[Step, ...] = (Pause(0.5), InjectDtmf("{card}*{pin}*{callee}#", gap))
        else:
            collect = (
                Pause(prompt_wait),
                InjectDtmf("{card}#", gap),
                Pause(prompt_wait),
                InjectDtmf("{pin}#", gap),
                Pause(prompt_wait),
                InjectDtmf("{callee}#", gap),
            )
        return cls(
            (SendInvite(), AwaitStatus(frozenset({183})))
            + collect
            + (AwaitStatus(frozenset({200})), Hold(call_length), SendBye())
        )


class _UacCall:
    def __init__(self, sim: "UacSimulator", script: ScenarioScript, params: Mapping[str, str], index: int):
        self.sim = sim
        self.script = script
        self.params = params
        self.index = index
        self.pc = 0
        self.call_id = sim.sip.new_call_id()
        self.tag = sim.sip.new_tag()
        self.cseq = 1
        self.record = CallRecord(self.call_id, sim.reactor.now())
        self.invite: SipMessage | None = None
        self.remote_to: str | None = None
        self.remote_target: str | None = None
        self.ack: SipMessage | None = None
        self.media: tuple[str, int] | None = None
        self.seen: set[int] = set()
        self.waiting: frozenset[int] | None = None
        self.timer: Timer | None = None
        self.guard: Timer | None = None
        self.done = False

    # -- driver -------------------------------------------------------------

    def advance(self) -> None:
        while not self.done and self.pc < len(self.script.steps):
            step = self.script.steps[self.pc]
            self.pc += 1
            if isinstance(step, SendInvite):
                self._send_invite()
            elif isinstance(step, AwaitStatus):
                if not self.seen & step.statuses:
                    self.waiting = step.statuses
                    return
            elif isinstance(step, Pause):
                self.timer = self.sim.reactor.call_later(step.seconds, self._resume)
                return
            elif isinstance(step, InjectDtmf):
                self._inject(step)
                return
            elif isinstance(step, Hold):
                self.timer = self.sim.reactor.call_later(step.seconds, self._resume)
                return
            elif isinstance(step, SendBye):
                self._send_bye()
                return
        if not self.done and self.pc >= len(self.script.steps):
            self._finish("completed")

    def _resume(self) -> None:
        self.timer = None
        self.advance()

    def _finish(self, outcome: str, status: int | None = None) -> None:
        if self.done:
            return
        self.done = True
        self.record.outcome = outcome
        if status is not None:
            self.record.final_status = status
        if self.record.t_released is None:
            self.record.t_released = self.sim.reactor.now()
        for t in (self.timer, self.guard):
            if t is not None:
                t.cancel()
        self.sim._call_done(self)

    # -- steps --------------------------------------------------------------

    def _send_invite(self) -> None:
        sim = self.sim
        sdp = make_sdp("uac", sim.sip.host, 10_000 + 2 * (self.index % 25_000))
        self.invite = build_request(
            "INVITE",
            sim.target_uri,
            via=sim.sip.via(),
            from_=f"<sip:{self.params.get('from', 'caller')}@{sim.sip.host}>;tag={self.tag}",
            to=f"<{sim.target_uri}>",
            call_id=self.call_id,
            cseq=self.cseq,
            contact=sim.sip.contact,
            body=serialize_sdp(sdp).encode(),
        )
        self.record.t_invite = sim.reactor.now()
        sim.sip.send_request(self.invite, sim.target, self._invite_result)
        self.guard = sim.reactor.call_later(sim.setup_guard, self._guard_expired)

    def _guard_expired(self) -> None:
        self.guard = None
        if self.record.t_answered is None:
            self._finish("lost")

    def _inject(self, step: InjectDtmf) -> None:
        digits = step.digits.format(**self.params)
        if self.media is None:
            self._finish("lost")
            return
        host, port = self.media
        for i, digit in enumerate(digits):
            self.sim.reactor.call_later(step.gap * i, lambda d=digit: self.sim.dtmf(host, port, d))
        self.timer = self.sim.reactor.call_later(step.gap * len(digits), self._resume)

    def _send_bye(self) -> None:
        self.cseq += 1
        bye = build_request(
            "BYE",
            self.remote_target or self.sim.target_uri,
            via=self.sim.sip.via(),
            from_=self.invite.header("From"),
            to=self.remote_to,
            call_id=self.call_id,
            cseq=self.cseq,
        )
        self.record.released_by = "uac"
        self.sim.sip.send_request(bye, self.sim.target, self._bye_result)

    def _bye_result(self, outcome: str, msg: SipMessage | None) -> None:
        if outcome == "provisional":
            return
        self.record.t_released = self.sim.reactor.now()
        self._finish("completed" if outcome == "final" else "lost")

    # -- inbound ------------------------------------------------------------

    def _invite_result(self, outcome: str, msg: SipMessage | None) -> None:
        now = self.sim.reactor.now()
        if outcome == "timeout":
            self._finish("lost")
            return
        status = msg.status
        if outcome == "provisional":
            self.record.provisionals.append((now, status))
            if msg.body and self.media is None:
                try:
                    sdp = parse_sdp(msg.body)
                    self.media = (sdp.connection_address, sdp.audio_port)
                except MalformedSdp:
                    pass
            self._seen(status)
            return
        if status >= 300:
            outcome = "rejected" if status in self.sim.expected_rejections else "lost"
            self._finish(outcome, status)
            return
        self.record.final_status = status
        self.record.t_answered = now
        self.remote_to = msg.header("To")
        contact = msg.header("Contact")
        self.remote_target = contact.strip("<>") if contact else None
        self.ack = build_request(
            "ACK",
            self.remote_target or self.sim.target_uri,
            via=self.sim.sip.via(),
            from_=self.invite.header("From"),
            to=self.remote_to,
            call_id=self.call_id,
            cseq=self.invite.cseq[0],
        )
        self.sim.sip.send_request(self.ack, self.sim.target)
        if self.guard is not None:
            self.guard.cancel()
            self.guard = None
        self._seen(status)

    def _seen(self, status: int) -> None:
        self.seen.add(status)
        if self.waiting is not None and status in self.waiting:
            self.waiting = None
            self.advance()

    def bye_received(self) -> None:
        self.record.t_released = self.sim.reactor.now()
        self.record.released_by = "remote"
        self._finish("completed" if self.record.t_answered is not None else "lost")


class UacSimulator:
    def __init__(
        self,
        reactor: Reactor,
        sip: SipEndpoint,
        target: Address,
        dtmf: DtmfSink,
        *,
        setup_guard: float = 32.0,
        expected_rejections: frozenset[int] = frozenset({402, 403}),
    ):
        self.reactor = reactor
        self.sip = sip
        self.target = target
        self.target_uri = f"sip:pcs@{target[0]}:{target[1]}"
        self.dtmf = dtmf
        self.setup_guard = setup_guard
        self.expected_rejections = expected_rejections
        self.calls: dict[str, _UacCall] = {}
        self.records: list[CallRecord] = []
        self.active = 0
        self._index = 0
        self.on_call_done: Callable[[CallRecord], None] | None = None
        sip.on_request = self._request
        sip.on_stray_response = self._stray

    def start_call(self, script: ScenarioScript, params: Mapping[str, str]) -> CallRecord:
        call = _UacCall(self, script, params, self._index)
        self._index += 1
        self.calls[call.call_id] = call
        self.records.append(call.record)
        self.active += 1
        call.advance()
        return call.record

    def _call_done(self, call: _UacCall) -> None:
        self.active -= 1
        # late retransmissions are still matched for a while
        self.reactor.call_later(32.0, lambda: self.calls.pop(call.call_id, None))
        if self.on_call_done:
            self.on_call_done(call.record)

    def _request(self, msg: SipMessage, src: Address) -> None:
        call = self.calls.get(msg.call_id)
        if msg.method == "BYE":
            self.sip.respond(msg, build_response(msg, 200 if call else 481))
            if call is not None and not call.done:
                call.bye_received()
        elif msg.method == "INVITE":
            self.sip.respond(msg, build_response(msg, 486))

    def _stray(self, msg: SipMessage, src: Address) -> None:
        call = self.calls.get(msg.call_id)
        if call is not None and call.ack is not None and msg.status is not None and 200 <= msg.status < 300:
            self.sip.send_stateless(call.ack, src)


@dataclasses.dataclass
class UasBehavior:
    ring_delay: float = 0.1
    answer_delay: float = 1.0
    reject_status: int | None = None


class UasSimulator:
    def __init__(self, reactor: Reactor, sip: SipEndpoint, behavior: UasBehavior | None = None):
        self.reactor = reactor
        self.sip = sip
        self.behavior = behavior or UasBehavior()
        self.dialogs: dict[str, dict] = {}
        self.answered = 0
        self.byes = 0
        self._port = 20_000
        sip.on_request = self._request

    def _request(self, msg: SipMessage, src: Address) -> None:
        if msg.method == "INVITE":
            if msg.to_tag:
                self.sip.respond(msg, build_response(msg, 488))
                return
            tag = self.sip.new_tag()
            state = {"invite": msg, "src": src, "tag": tag, "ok": None, "timer": None}
            self.dialogs[msg.call_id] = state
            b = self.behavior
            self.reactor.call_later(b.ring_delay, lambda: self._ring(state))
            self.reactor.call_later(b.answer_delay, lambda: self._answer(state))
        elif msg.method == "ACK":
            state = self.dialogs.get(msg.call_id)
            if state and state["timer"] is not None:
                state["timer"].cancel()
                state["timer"] = None
        elif msg.method == "BYE":
            state = self.dialogs.pop(msg.call_id, None)
            self.sip.respond(msg, build_response(msg, 200 if state else 481))
            if state:
                self.byes += 1
                if state["timer"] is not None:
                    state["timer"].cancel()

    def _ring(self, state: dict) -> None:
        if state.get("final"):
            return
        self.sip.respond(state["invite"], build_response(state["invite"], 180, to_tag=state["tag"]))

    def _answer(self, state: dict) -> None:
        invite = state["invite"]
        state["final"] = True
        b = self.behavior
        if b.reject_status is not None:
            self.sip.respond(invite, build_response(invite, b.reject_status, to_tag=state["tag"]))
            self.dialogs.pop(invite.call_id, None)
            return
        self._port += 2
        sdp = make_sdp("uas", self.sip.host, self._port)
        ok = build_response(invite, 200, to_tag=state["tag"], contact=self.sip.contact, body=serialize_sdp(sdp).encode())
        state["ok"] = ok
        self.answered += 1
        self.sip.respond(invite, ok)
        self._arm_retransmit(state, 0.5)

    def _arm_retransmit(self, state: dict, delay: float) -> None:
        def again() -> None:
            state["timer"] = None
            if state["invite"].call_id not in self.dialogs or delay > 32.0:
                return
            self.sip.send_stateless(state["ok"], state["src"])
            self._arm_retransmit(state, min(delay * 2, 4.0) if delay < 4.0 else delay + 4.0)

        state["timer"] = self.reactor.call_later(delay, again)
