"""Per-connection bridge between a JCC MGCP connection and its MGCP leg.

The handler owns a small FSM (Idle, InConnection, Connected, Reconnection,
Error, InDisconnection, Disconnected) and a ledger of connection parameters
set through ``selectRoute("name=value")``. Parameters fall into three
classes, and the class decides what an ``attachMedia()`` turns into:

* Mandatory (endpoint address/type): delete the MGCP connection and create
  a new one, then report ``CONNECTION_CHANGED``.
* Modify (mode, local options, remote SDP): one MDCX, then report
  ``CONNECTION_CHANGED``.
* Request (signal, requested events, digit map, notified entity): consumed
  by exactly one RQNT; the NTFY result comes back as a MidCall event.

``handler_step`` and ``flush_ledger`` are pure; the connection object in
:mod:`.core` feeds them and executes the returned actions.
"""

from __future__ import annotations

import dataclasses
import logging
from types import MappingProxyType
from typing import Mapping, Union

from ..mgcp.message import MgcpCommand
from ..sdp import MalformedSdp, SdpSession, parse_sdp

log = logging.getLogger(__name__)

MANDATORY = "Mandatory"
MODIFY = "Modify"
REQUEST = "Request"

CATALOG: Mapping[str, str] = MappingProxyType(
    {
        "endpointAddress": MANDATORY,
        "endpointType": MANDATORY,
        "mode": MODIFY,
        "localOptions": MODIFY,
        "remoteSdp": MODIFY,
        "signal": REQUEST,
        "requestedEvents": REQUEST,
        "digitMap": REQUEST,
        "notifiedEntity": REQUEST,
    }
)

ENDPOINT_TYPES: Mapping[str, str] = MappingProxyType(
    {
        "Announcement": "ann",
        "IVR": "ivr",
        "PacketRelayAnnouncement": "pra",
        "PacketRelayIvr": "pri",
    }
)

MODES = frozenset({"sendrecv", "sendonly", "recvonly", "inactive", "confrnce"})

# phases
IDLE = "Idle"
IN_CONNECTION = "InConnection"
CONNECTED = "Connected"
RECONNECTION = "Reconnection"
ERROR = "Error"
IN_DISCONNECTION = "InDisconnection"
DISCONNECTED = "Disconnected"

PHASES = (IDLE, IN_CONNECTION, CONNECTED, RECONNECTION, ERROR, IN_DISCONNECTION, DISCONNECTED)


class HandlerError(Exception):
    pass


class UnknownParameter(HandlerError):
    pass


class MalformedParam(HandlerError):
    pass


class EmptyLedger(HandlerError):
    pass


class IllegalState(HandlerError):
    pass


class IllegalEventForState(HandlerError):
    pass


class HandlerBusy(IllegalEventForState):
    pass


def classify_parameter(name: str) -> str:
    try:
        return CATALOG[name]
    except KeyError:
        raise UnknownParameter(name) from None


def parse_select_route(param: str) -> tuple[str, str]:
    name, eq, value = param.partition("=")
    name = name.strip()
    if not eq or not name or not value.strip():
        raise MalformedParam(f"expected name=value, got {param!r}")
    classify_parameter(name)
    value = value.strip() if name != "remoteSdp" else value
    if name == "endpointType" and value not in ENDPOINT_TYPES:
        raise MalformedParam(f"unknown endpoint type {value!r}")
    if name == "mode" and value not in MODES:
        raise MalformedParam(f"unknown connection mode {value!r}")
    if name == "remoteSdp":
        try:
            parse_sdp(value)
        except MalformedSdp as exc:
            raise MalformedParam(f"bad remoteSdp: {exc}") from exc
    if name == "endpointAddress":
        value = value.removeprefix("mgcp:")
        host, _, port = value.rpartition(":")
        if not host or not port.isdigit():
            raise MalformedParam(f"endpointAddress needs host:port, got {value!r}")
    return name, value


@dataclasses.dataclass(frozen=True)
class ParameterLedger:
    committed: Mapping[str, str] = MappingProxyType({})
    pending: Mapping[str, str] = MappingProxyType({})
    catalog: Mapping[str, str] = CATALOG

    def with_pending(self, name: str, value: str) -> "ParameterLedger":
        if name not in self.catalog:
            raise UnknownParameter(name)
        return dataclasses.replace(self, pending=MappingProxyType({**self.pending, name: value}))

    def pending_classes(self) -> set[str]:
        return {self.catalog[n] for n in self.pending}

    def commit_connection_values(self) -> "ParameterLedger":
        """Move pending Mandatory/Modify values into ``committed``; keep Request ones pending."""
        keep = {n: v for n, v in self.pending.items() if self.catalog[n] == REQUEST}
        moved = {n: v for n, v in self.pending.items() if self.catalog[n] != REQUEST}
        return dataclasses.replace(
            self,
            committed=MappingProxyType({**self.committed, **moved}),
            pending=MappingProxyType(keep),
        )


@dataclasses.dataclass(frozen=True)
class PlanStep:
    verb: str
    params: tuple[tuple[str, str], ...] = ()
    sdp: SdpSession | None = None
    endpoint_address: str | None = None
    endpoint_type: str | None = None
    request_id: str | None = None


def crcx_step(values: Mapping[str, str], peer_sdp: SdpSession | None) -> PlanStep:
    params = []
    if "localOptions" in values:
        params.append(("L", values["localOptions"]))
    params.append(("M", values.get("mode", "sendrecv")))
    sdp = parse_sdp(values["remoteSdp"]) if "remoteSdp" in values else peer_sdp
    return PlanStep(
        "CRCX",
        tuple(params),
        sdp,
        endpoint_address=values["endpointAddress"],
        endpoint_type=values.get("endpointType", "IVR"),
    )


def _rqnt_step(request: Mapping[str, str], request_id: int) -> PlanStep:
    x = str(request_id)
    params = [("X", x)]
    if "notifiedEntity" in request:
        params.append(("N", request["notifiedEntity"]))
    signal = request.get("signal")
    if signal:
        params.append(("S", signal if "/" in signal else f"A/{signal}"))
    events = request.get("requestedEvents")
    if events is None and "digitMap" in request:
        events = "dtmf"
    if events:
        params.append(("R", events if "/" in events else f"D/{events}"))
    elif signal:
        params.append(("R", "A/oc"))
    if "digitMap" in request:
        params.append(("D", request["digitMap"]))
    return PlanStep("RQNT", tuple(params), request_id=x)


def flush_ledger(ledger: ParameterLedger, state: "HandlerState") -> tuple[tuple[PlanStep, ...], ParameterLedger]:
    """Compile pending parameters into an ordered MGCP command plan.

    Mandatory changes become one DLCX+CRCX pair, otherwise Modify changes
    become one MDCX; Request values always become a single trailing RQNT.
    """
    if state.phase != CONNECTED:
        raise IllegalState(f"flush needs Connected, handler is {state.phase}")
    if not ledger.pending:
        raise EmptyLedger("nothing pending")
    classes = ledger.pending_classes()
    request = {n: v for n, v in ledger.pending.items() if ledger.catalog[n] == REQUEST}
    new_ledger = ledger.commit_connection_values()
    new_ledger = dataclasses.replace(new_ledger, pending=MappingProxyType({}))

    plan: list[PlanStep] = []
    if MANDATORY in classes:
        plan.append(PlanStep("DLCX"))
        plan.append(crcx_step(new_ledger.committed, state.peer_sdp))
    elif MODIFY in classes:
        changed = {n: v for n, v in ledger.pending.items() if ledger.catalog[n] == MODIFY}
        params = []
        if "localOptions" in changed:
            params.append(("L", changed["localOptions"]))
        if "mode" in changed:
            params.append(("M", changed["mode"]))
        sdp = parse_sdp(changed["remoteSdp"]) if "remoteSdp" in changed else None
        plan.append(PlanStep("MDCX", tuple(params), sdp))
    if request:
        plan.append(_rqnt_step(request, state.next_request_id))
    return tuple(plan), new_ledger


# -- FSM --------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class HandlerState:
    call_id: str
    phase: str = IDLE
    ms_address: str | None = None
    endpoint_type: str | None = None
    ms_endpoint: str | None = None
    mgcp_connection_id: str | None = None
    first_connect_done: bool = False
    awaiting: str | None = None
    plan: tuple[PlanStep, ...] = ()
    outstanding_request: str | None = None
    next_request_id: int = 1
    peer_sdp: SdpSession | None = None


# events
@dataclasses.dataclass(frozen=True)
class CmdRouteConnection:
    crcx: PlanStep


@dataclasses.dataclass(frozen=True)
class RxCrcxOk:
    connection_id: str
    sdp: SdpSession | None
    endpoint: str | None = None


@dataclasses.dataclass(frozen=True)
class RxCrcxFail:
    code: int = 500


@dataclasses.dataclass(frozen=True)
class RxMdcxOk:
    pass


@dataclasses.dataclass(frozen=True)
class RxMdcxFail:
    code: int = 400


@dataclasses.dataclass(frozen=True)
class RxDlcxOk:
    pass


@dataclasses.dataclass(frozen=True)
class RxDlcxFail:
    code: int = 500


@dataclasses.dataclass(frozen=True)
class RxRqntOk:
    pass


@dataclasses.dataclass(frozen=True)
class RxRqntFail:
    code: int = 500


@dataclasses.dataclass(frozen=True)
class RxNtfy:
    request_id: str
    observed: str


@dataclasses.dataclass(frozen=True)
class TxTimeout:
    verb: str


@dataclasses.dataclass(frozen=True)
class CmdFlush:
    plan: tuple[PlanStep, ...]


@dataclasses.dataclass(frozen=True)
class CmdRelease:
    pass


HandlerEvent = Union[
    CmdRouteConnection, RxCrcxOk, RxCrcxFail, RxMdcxOk, RxMdcxFail, RxDlcxOk, RxDlcxFail,
    RxRqntOk, RxRqntFail, RxNtfy, TxTimeout, CmdFlush, CmdRelease,
]


# actions
@dataclasses.dataclass(frozen=True)
class EmitCommand:
    command: MgcpCommand
    address: str  # "host:port" of the media server


@dataclasses.dataclass(frozen=True)
class SetJccState:
    state: str


@dataclasses.dataclass(frozen=True)
class FireEvent:
    kind: str
    cause: str | None = None
    payload: Mapping | None = None


@dataclasses.dataclass(frozen=True)
class AnswerSipLeg:
    sdp: SdpSession | None


_FAILED_OBSERVED = ("D/timeout", "D/nomatch", "A/of")


def _ntfy_payload(request_id: str, observed: str) -> dict:
    success = not any(observed.startswith(f) for f in _FAILED_OBSERVED)
    digits = None
    for event in observed.split(","):
        event = event.strip()
        if event.startswith("D/") and success:
            digits = event[2:]
    return {"success": success, "request_id": request_id, "observed": observed, "digits": digits}


def _crcx_cmd(st: HandlerState, step: PlanStep) -> EmitCommand:
    prefix = ENDPOINT_TYPES[step.endpoint_type or "IVR"]
    cmd = MgcpCommand(
        "CRCX", 0, f"{prefix}/$@{step.endpoint_address}", (("C", st.call_id),) + step.params, step.sdp
    )
    return EmitCommand(cmd, step.endpoint_address)


def _dlcx_cmd(st: HandlerState) -> EmitCommand:
    cmd = MgcpCommand("DLCX", 0, st.ms_endpoint, (("C", st.call_id), ("I", st.mgcp_connection_id)))
    return EmitCommand(cmd, st.ms_address)


def _mdcx_cmd(st: HandlerState, step: PlanStep) -> EmitCommand:
    cmd = MgcpCommand(
        "MDCX", 0, st.ms_endpoint, (("C", st.call_id), ("I", st.mgcp_connection_id)) + step.params, step.sdp
    )
    return EmitCommand(cmd, st.ms_address)


def _rqnt_cmd(st: HandlerState, step: PlanStep) -> EmitCommand:
    return EmitCommand(MgcpCommand("RQNT", 0, st.ms_endpoint, step.params), st.ms_address)


def _midcall(cause: str | None = None, **payload) -> FireEvent:
    return FireEvent("CONNECTION_MID_CALL", cause, payload)


def _start_next(st: HandlerState) -> tuple[HandlerState, list]:
    """Issue the next queued plan step from Connected (MDCX or RQNT)."""
    replace = dataclasses.replace
    if not st.plan:
        return replace(st, awaiting=None), []
    step, rest = st.plan[0], st.plan[1:]
    if step.verb == "MDCX":
        return replace(st, awaiting="MDCX", plan=rest), [_mdcx_cmd(st, step)]
    if step.verb == "RQNT":
        st = replace(st, awaiting="RQNT", plan=rest, outstanding_request=step.request_id)
        return st, [_rqnt_cmd(st, step)]
    if step.verb == "DLCX":
        st = replace(st, phase=RECONNECTION, awaiting="DLCX", plan=rest)
        return st, [_dlcx_cmd(st)]
    raise IllegalState(f"unexpected plan step {step.verb} in Connected")


def _illegal(st: HandlerState, ev) -> IllegalEventForState:
    return IllegalEventForState(f"handler in {st.phase} (awaiting {st.awaiting}) cannot take {type(ev).__name__}")


def _is_done(ev, verb: str) -> bool:
    ok = {"CRCX": RxCrcxOk, "MDCX": RxMdcxOk, "DLCX": RxDlcxOk, "RQNT": RxRqntOk}[verb]
    fail = {"CRCX": RxCrcxFail, "MDCX": RxMdcxFail, "DLCX": RxDlcxFail, "RQNT": RxRqntFail}[verb]
    return isinstance(ev, (ok, fail)) or (isinstance(ev, TxTimeout) and ev.verb == verb)


def handler_step(st: HandlerState, ev: HandlerEvent) -> tuple[HandlerState, list]:
    replace = dataclasses.replace
    phase = st.phase

    if phase == DISCONNECTED:
        return st, []

    if phase in (IDLE, ERROR) and isinstance(ev, CmdRouteConnection):
        if st.awaiting is not None:
            raise HandlerBusy(f"{st.awaiting} still outstanding")
        step = ev.crcx
        new = replace(
            st,
            phase=IN_CONNECTION,
            awaiting="CRCX",
            ms_address=step.endpoint_address,
            endpoint_type=step.endpoint_type,
            ms_endpoint=None,
            mgcp_connection_id=None,
            plan=(),
            outstanding_request=None,
            peer_sdp=st.peer_sdp if st.peer_sdp is not None else step.sdp,
        )
        actions: list = [_crcx_cmd(new, step)]
        if not st.first_connect_done:
            actions.append(SetJccState("CALL_DELIVERY"))
        return new, actions

    if phase == IN_CONNECTION:
        if isinstance(ev, RxCrcxOk):
            new = replace(st, phase=CONNECTED, awaiting=None, mgcp_connection_id=ev.connection_id,
                          ms_endpoint=ev.endpoint or st.ms_endpoint, first_connect_done=True)
            if not st.first_connect_done:
                # answer the caller before the application hears about it
                return new, [SetJccState("CONNECTED"), AnswerSipLeg(ev.sdp), FireEvent("CONNECTION_CONNECTED")]
            return new, [_midcall("CONNECTION_CHANGED", success=True, sdp=ev.sdp)]
        if isinstance(ev, RxCrcxFail) or (isinstance(ev, TxTimeout) and ev.verb == "CRCX"):
            new = replace(st, phase=IDLE, awaiting=None, mgcp_connection_id=None, ms_endpoint=None)
            if not st.first_connect_done:
                cause = "TX_TIMEOUT" if isinstance(ev, TxTimeout) else f"MGCP_{ev.code}"
                return new, [SetJccState("FAILED"), FireEvent("CONNECTION_FAILED", cause)]
            return new, [_midcall("CONNECTION_LOST", success=False)]
        raise _illegal(st, ev)

    if phase == CONNECTED:
        if isinstance(ev, CmdFlush):
            if not ev.plan:
                raise EmptyLedger("empty plan")
            if st.awaiting is not None:
                raise HandlerBusy(f"{st.awaiting} still outstanding")
            if st.outstanding_request is not None and any(s.verb == "RQNT" for s in ev.plan):
                raise HandlerBusy(f"request {st.outstanding_request} still outstanding")
            rqnt = [s for s in ev.plan if s.verb == "RQNT"]
            if rqnt:
                st = replace(st, next_request_id=st.next_request_id + 1)
            return _start_next(replace(st, plan=ev.plan))
        if isinstance(ev, CmdRelease):
            new = replace(st, phase=IN_DISCONNECTION, awaiting="DLCX", plan=(), outstanding_request=None)
            return new, [_dlcx_cmd(new)]
        if isinstance(ev, RxNtfy):
            if ev.request_id != st.outstanding_request:
                log.info("dropping NTFY for unknown request %s", ev.request_id)
                return st, []
            new = replace(st, outstanding_request=None)
            if new.awaiting == "RQNT":
                new = replace(new, awaiting=None)
            return new, [_midcall(None, **_ntfy_payload(ev.request_id, ev.observed))]
        if st.awaiting == "MDCX" and _is_done(ev, "MDCX"):
            if isinstance(ev, RxMdcxOk):
                new, actions = _start_next(replace(st, awaiting=None))
                return new, [_midcall("CONNECTION_CHANGED", success=True)] + actions
            new = replace(st, phase=ERROR, awaiting="DLCX", plan=(), outstanding_request=None,
                          mgcp_connection_id=None)
            return new, [_dlcx_cmd(st), _midcall("CONNECTION_ERROR", success=False)]
        if st.awaiting == "RQNT" and _is_done(ev, "RQNT"):
            if isinstance(ev, RxRqntOk):
                return replace(st, awaiting=None), []
            rid = st.outstanding_request
            new = replace(st, awaiting=None, outstanding_request=None)
            return new, [_midcall(None, success=False, request_id=rid, observed=None, digits=None)]
        raise _illegal(st, ev)

    if phase == RECONNECTION:
        if st.awaiting == "DLCX" and _is_done(ev, "DLCX"):
            step, rest = st.plan[0], st.plan[1:]
            new = replace(st, awaiting="CRCX", plan=rest, ms_address=step.endpoint_address,
                          endpoint_type=step.endpoint_type)
            return new, [_crcx_cmd(new, step)]
        if st.awaiting == "CRCX" and isinstance(ev, RxCrcxOk):
            new = replace(st, phase=CONNECTED, awaiting=None, mgcp_connection_id=ev.connection_id,
                          ms_endpoint=ev.endpoint or st.ms_endpoint)
            new, actions = _start_next(new)
            return new, [_midcall("CONNECTION_CHANGED", success=True, sdp=ev.sdp)] + actions
        if st.awaiting == "CRCX" and _is_done(ev, "CRCX"):
            new = replace(st, phase=ERROR, awaiting=None, plan=(), mgcp_connection_id=None, ms_endpoint=None)
            return new, [_midcall("CONNECTION_ERROR", success=False)]
        raise _illegal(st, ev)

    if phase == ERROR:
        if st.awaiting == "DLCX" and _is_done(ev, "DLCX"):
            return replace(st, awaiting=None, mgcp_connection_id=None, ms_endpoint=None), []
        if isinstance(ev, CmdRelease):
            new = replace(st, phase=DISCONNECTED, awaiting=None, mgcp_connection_id=None)
            return new, [SetJccState("DISCONNECTED"), FireEvent("CONNECTION_DISCONNECTED")]
        raise _illegal(st, ev)

    if phase == IN_DISCONNECTION:
        if _is_done(ev, "DLCX"):
            new = replace(st, phase=DISCONNECTED, awaiting=None, mgcp_connection_id=None)
            return new, [SetJccState("DISCONNECTED"), FireEvent("CONNECTION_DISCONNECTED")]
        raise _illegal(st, ev)

    raise _illegal(st, ev)
