"""Prepaid card service: a B2BUA written only against the JCC API.

:func:`pcs_step` is the per-call state machine. It takes a
:class:`PcsCallContext` and one event and returns the new context plus a
list of :class:`ApiCall` / :class:`ArmTimer` actions, naming connections by
role (``caller``, ``callee``, ``ms``). :class:`PcsService` subscribes to the
provider, turns JCC events into :class:`PcsEvent`, and executes the actions.

Two collection styles are supported. ``full`` plays a prompt and collects
card, PIN and callee in three separate requests. ``compact`` collects all
three in a single request with the map ``(x.*x.*x.#)`` and no prompt.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
from pathlib import Path
from typing import Mapping, Union

from ..jcc.core import JccError, JccEvent, JccProvider, MgcpConnection, SipConnection
from ..jcc.handler import HandlerError
from ..sip.message import uri_user
from .store import AuthDenied, StoreUnavailable, SubscriberStore, authenticate

log = logging.getLogger(__name__)

GREETING = "Greeting"
COLLECT_CARD = "CollectCard"
COLLECT_PIN = "CollectPin"
COLLECT_CALLEE = "CollectCallee"
VALIDATING = "Validating"
BRIDGING = "Bridging"
IN_CALL = "InCall"
ENDING = "Ending"

FIELDS = {COLLECT_CARD: "card", COLLECT_PIN: "pin", COLLECT_CALLEE: "callee"}
NEXT_FIELD = {COLLECT_CARD: COLLECT_PIN, COLLECT_PIN: COLLECT_CALLEE, COLLECT_CALLEE: VALIDATING}
DIGIT_MAPS = {COLLECT_CARD: "(x.#)", COLLECT_PIN: "(xxxx#)", COLLECT_CALLEE: "(x.#)"}
COMPACT_MAP = "(x.*x.*x.#)"


@dataclasses.dataclass(frozen=True)
class PcsConfig:
    ms_addresses: tuple[str, ...] = ("10.0.0.2:2427",)
    callee_domain: str = "10.0.0.3:5060"
    billing_period: float = 10.0
    max_attempts: int = 3
    collection: str = "full"  # or "compact"
    prompts: Mapping[str, str] = dataclasses.field(
        default_factory=lambda: {"card": "card", "pin": "pin", "callee": "callee", "failure": "failure"}
    )

    @classmethod
    def from_json(cls, path: str | Path) -> "PcsConfig":
        data = json.loads(Path(path).read_text())
        if "ms_addresses" in data:
            data["ms_addresses"] = tuple(data["ms_addresses"])
        return cls(**data)


@dataclasses.dataclass(frozen=True)
class PcsCallContext:
    call_id: str
    ms_address: str
    phase: str = GREETING
    caller_user: str | None = None
    collected: Mapping[str, str] = dataclasses.field(default_factory=dict)
    attempts: int = 0
    live: frozenset[str] = frozenset()
    card: str | None = None
    rate: float = 1.0
    initial_credit: float = 0.0
    remaining_credit: float = 0.0
    bridged_at: float | None = None
    next_billing_tick: float | None = None
    reject_status: int | None = None
    ended_by: str | None = None


@dataclasses.dataclass(frozen=True)
class PcsEvent:
    kind: str  # a JCC event kind, or "TIMER"
    role: str | None = None
    cause: str | None = None
    payload: Mapping | None = None


@dataclasses.dataclass(frozen=True)
class ApiCall:
    op: str
    role: str
    args: tuple = ()


@dataclasses.dataclass(frozen=True)
class ArmTimer:
    kind: str
    delay: float


Action = Union[ApiCall, ArmTimer]


def _prompt_round(ctx: PcsCallContext, phase: str, config: PcsConfig) -> list[Action]:
    if config.collection == "compact":
        return [ApiCall("select_route", "ms", (f"digitMap={COMPACT_MAP}",)), ApiCall("attach_media", "ms")]
    prompt = config.prompts[FIELDS[phase]]
    return [
        ApiCall("select_route", "ms", (f"signal=ann({prompt})",)),
        ApiCall("select_route", "ms", (f"digitMap={DIGIT_MAPS[phase]}",)),
        ApiCall("attach_media", "ms"),
    ]


def _reject(ctx: PcsCallContext, status: int, config: PcsConfig) -> tuple[PcsCallContext, list[Action]]:
    """Play the failure prompt when the MS leg is up, then release everything."""
    ctx = dataclasses.replace(ctx, phase=ENDING, reject_status=status, ended_by=ctx.ended_by or "rejected")
    if "ms" in ctx.live:
        prompt = config.prompts["failure"]
        return ctx, [ApiCall("select_route", "ms", (f"signal=ann({prompt})",)), ApiCall("attach_media", "ms")]
    return ctx, [ApiCall("release", "caller", (status,))] if "caller" in ctx.live else []


def _billed(ctx: PcsCallContext, now: float) -> float:
    elapsed = max(0.0, now - ctx.bridged_at)
    return math.ceil(round(elapsed, 6)) * ctx.rate


def billing_tick(
    ctx: PcsCallContext, store: SubscriberStore, now: float, *, period: float = 10.0, final: bool = False
) -> tuple[PcsCallContext, list[Action]]:
    """Charge the time since bridging, persist it, and tear down at zero credit."""
    remaining = ctx.initial_credit - _billed(ctx, now)
    ctx = dataclasses.replace(ctx, remaining_credit=max(0.0, remaining))
    try:
        store.update_credit(ctx.card, max(0.0, remaining))
    except StoreUnavailable:
        log.warning("%s: store unavailable, billing retried next tick", ctx.call_id)
    if final:
        return ctx, []
    if remaining <= 0:
        ctx = dataclasses.replace(ctx, phase=ENDING, ended_by="credit", next_billing_tick=None)
        return ctx, [ApiCall("release", role) for role in ("caller", "callee") if role in ctx.live]
    delay = min(period, remaining / ctx.rate)
    return dataclasses.replace(ctx, next_billing_tick=now + delay), [ArmTimer("billing", delay)]


def pcs_step(
    ctx: PcsCallContext, event: PcsEvent, *, store: SubscriberStore, config: PcsConfig, now: float
) -> tuple[PcsCallContext, list[Action]]:
    replace = dataclasses.replace
    kind, role = event.kind, event.role

    if kind in ("CONNECTION_DISCONNECTED", "CONNECTION_FAILED"):
        ctx = replace(ctx, live=ctx.live - {role})

    if kind == "CONNECTION_CALL_DELIVERY":
        ctx = replace(ctx, live=ctx.live | {"caller"}, caller_user=(event.payload or {}).get("from_user"))
        try:
            profile = store.get(ctx.caller_user) if ctx.caller_user else None
        except StoreUnavailable:
            profile = None
        if profile is not None and profile.credit_seconds <= 0:
            ctx = replace(ctx, phase=ENDING, reject_status=402, ended_by="rejected")
            return ctx, [ApiCall("release", "caller", (402,))]
        actions: list[Action] = [ApiCall("create_connection", "ms", (f"mgcp:{ctx.ms_address}", "caller"))]
        if config.collection == "full":
            actions.append(ApiCall("select_route", "ms", ("endpointType=IVR",)))
        actions.append(ApiCall("route_connection", "ms", (False,)))
        return replace(ctx, phase=GREETING, live=ctx.live | {"ms"}), actions

    if ctx.phase == ENDING:
        if kind == "CONNECTION_MID_CALL" and role == "ms" and ctx.reject_status is not None:
            return ctx, [ApiCall("release", "ms")]
        if kind in ("CONNECTION_DISCONNECTED", "CONNECTION_FAILED") and role == "ms" and "caller" in ctx.live:
            return ctx, [ApiCall("release", "caller", (ctx.reject_status,) if ctx.reject_status else ())]
        if kind in ("CONNECTION_DISCONNECTED", "CONNECTION_FAILED") and ctx.ended_by != "credit":
            return ctx, [ApiCall("release", r) for r in ("callee", "caller", "ms") if r in ctx.live]
        return ctx, []

    if kind in ("CONNECTION_DISCONNECTED", "CONNECTION_FAILED") and role == "caller":
        # caller gone before or during the call
        if ctx.phase == IN_CALL:
            ctx, _ = billing_tick(ctx, store, now, final=True)
        ctx = replace(ctx, phase=ENDING, ended_by=ctx.ended_by or "caller")
        return ctx, [ApiCall("release", r) for r in ("callee", "ms") if r in ctx.live]

    if ctx.phase == GREETING:
        if kind == "CONNECTION_CONNECTED" and role == "ms":
            return replace(ctx, phase=COLLECT_CARD, attempts=0), _prompt_round(ctx, COLLECT_CARD, config)
        if kind == "CONNECTION_FAILED" and role == "ms":
            return _reject(ctx, 480, config)
        return ctx, []

    if ctx.phase in FIELDS:
        if not (kind == "CONNECTION_MID_CALL" and role == "ms"):
            if kind in ("CONNECTION_DISCONNECTED", "CONNECTION_FAILED") and role == "ms":
                return _reject(ctx, 480, config)
            return ctx, []
        if event.cause in ("CONNECTION_ERROR", "CONNECTION_LOST"):
            return _reject(ctx, 480, config)
        if event.cause == "CONNECTION_CHANGED":
            return ctx, []
        payload = event.payload or {}
        digits = payload.get("digits") if payload.get("success") else None
        if not digits:
            attempts = ctx.attempts + 1
            if attempts >= config.max_attempts:
                return _reject(replace(ctx, attempts=attempts), 403, config)
            return replace(ctx, attempts=attempts), _prompt_round(ctx, ctx.phase, config)
        digits = digits.rstrip("#")
        if config.collection == "compact":
            parts = digits.split("*")
            if len(parts) != 3 or not all(parts):
                attempts = ctx.attempts + 1
                if attempts >= config.max_attempts:
                    return _reject(replace(ctx, attempts=attempts), 403, config)
                return replace(ctx, attempts=attempts), _prompt_round(ctx, ctx.phase, config)
            collected = dict(zip(("card", "pin", "callee"), parts))
            nxt = VALIDATING
        else:
            collected = {**ctx.collected, FIELDS[ctx.phase]: digits}
            nxt = NEXT_FIELD[ctx.phase]
        ctx = replace(ctx, collected=collected, attempts=0, phase=nxt)
        if nxt != VALIDATING:
            return ctx, _prompt_round(ctx, nxt, config)
        try:
            profile = authenticate(store, collected["card"], collected["pin"])
        except AuthDenied as denial:
            log.info("%s: admission denied (%s)", ctx.call_id, type(denial).__name__)
            return _reject(ctx, denial.status, config)
        except StoreUnavailable:
            return _reject(ctx, 480, config)
        ctx = replace(
            ctx,
            phase=BRIDGING,
            card=profile.card_number,
            rate=profile.rate,
            initial_credit=profile.credit_seconds,
            remaining_credit=profile.credit_seconds,
        )
        return ctx, [ApiCall("release", "ms")]

    if ctx.phase == BRIDGING:
        if kind == "CONNECTION_DISCONNECTED" and role == "ms":
            callee = f"sip:{ctx.collected['callee']}@{config.callee_domain}"
            return replace(ctx, live=ctx.live | {"callee"}), [ApiCall("route_call", "callee", (callee, "caller"))]
        if kind == "CONNECTION_FAILED" and role == "callee":
            status = int(event.cause) if (event.cause or "").isdigit() else 480
            ctx = replace(ctx, phase=ENDING, ended_by="callee_rejected", reject_status=status)
            return ctx, [ApiCall("release", "caller", (status,))]
        if kind == "CONNECTION_CONNECTED" and role == "caller":
            delay = min(config.billing_period, ctx.initial_credit / ctx.rate)
            ctx = replace(ctx, phase=IN_CALL, bridged_at=now, next_billing_tick=now + delay)
            return ctx, [ArmTimer("billing", delay)]
        return ctx, []

    if ctx.phase == IN_CALL:
        if kind == "TIMER":
            return billing_tick(ctx, store, now, period=config.billing_period)
        if kind == "CONNECTION_DISCONNECTED" and role == "callee":
            ctx, _ = billing_tick(ctx, store, now, final=True)
            ctx = replace(ctx, phase=ENDING, ended_by="callee")
            return ctx, [ApiCall("release", "caller")] if "caller" in ctx.live else []
        return ctx, []

    return ctx, []


def pcs_event_filter(event: JccEvent) -> bool:
    """The events the service reacts to; everything else stays inside the provider."""
    conn = event.connection
    if isinstance(conn, MgcpConnection):
        return event.kind in ("CONNECTION_CONNECTED", "CONNECTION_DISCONNECTED", "CONNECTION_FAILED", "CONNECTION_MID_CALL")
    if event.kind == "CONNECTION_CALL_DELIVERY":
        return isinstance(conn, SipConnection) and conn.incoming
    return event.kind in ("CONNECTION_CONNECTED", "CONNECTION_DISCONNECTED", "CONNECTION_FAILED")


@dataclasses.dataclass
class CallOutcome:
    call_id: str
    ended_by: str | None
    reject_status: int | None
    card: str | None
    remaining_credit: float
    bridged_at: float | None


class PcsService:
    def __init__(self, provider: JccProvider, store: SubscriberStore, config: PcsConfig = PcsConfig()):
        self.provider = provider
        self.reactor = provider.reactor
        self.store = store
        self.config = config
        self.contexts: dict[str, PcsCallContext] = {}
        self.legs: dict[str, dict[str, object]] = {}
        self.outcomes: dict[str, CallOutcome] = {}
        self.decisions: list[dict] = []
        self._timers: dict[str, object] = {}
        self._ms_cycle = itertools.cycle(config.ms_addresses)
        provider.add_listener(self.on_event, pcs_event_filter)

    def on_event(self, event: JccEvent) -> None:
        call = event.call
        conn = event.connection
        if event.kind == "CONNECTION_CALL_DELIVERY":
            self.contexts[call.id] = PcsCallContext(call.id, next(self._ms_cycle))
            self.legs[call.id] = {"caller": conn}
            payload = {"from_user": uri_user(conn.address.literal)}
            self._step(call.id, PcsEvent(event.kind, "caller", payload=payload))
            return
        legs = self.legs.get(call.id)
        if legs is None:
            return
        role = next((r for r, c in legs.items() if c is conn), None)
        if role is None:
            return
        self._step(call.id, PcsEvent(event.kind, role, event.cause, event.payload))

    def _on_timer(self, call_id: str, kind: str) -> None:
        self._timers.pop(call_id, None)
        if call_id in self.contexts:
            self._step(call_id, PcsEvent("TIMER", cause=kind))

    def _step(self, call_id: str, event: PcsEvent) -> None:
        ctx = self.contexts[call_id]
        before = ctx.phase
        ctx, actions = pcs_step(ctx, event, store=self.store, config=self.config, now=self.reactor.now())
        self.contexts[call_id] = ctx
        if ctx.phase != before:
            self.decisions.append({"t": round(self.reactor.now(), 6), "call": call_id, "from": before, "to": ctx.phase})
        for action in actions:
            self._execute(call_id, action)
        self._maybe_finish(call_id)

    def _execute(self, call_id: str, action: Action) -> None:
        legs = self.legs[call_id]
        if isinstance(action, ArmTimer):
            old = self._timers.pop(call_id, None)
            if old is not None:
                old.cancel()
            self._timers[call_id] = self.reactor.call_later(action.delay, lambda: self._on_timer(call_id, action.kind))
            return
        p = self.provider
        try:
            if action.op == "create_connection":
                target, peer_role = action.args
                legs[action.role] = p.create_connection(legs["caller"].call, target, legs[peer_role])
            elif action.op == "route_call":
                callee, caller_role = action.args
                caller = legs[caller_role]
                legs[action.role] = p.route_call(caller.call, callee, caller)
            elif action.op == "select_route":
                p.select_route(legs[action.role], *action.args)
            elif action.op == "route_connection":
                p.route_connection(legs[action.role], *action.args)
            elif action.op == "attach_media":
                p.attach_media(legs[action.role])
            elif action.op == "release":
                conn = legs.get(action.role)
                if conn is not None and not conn.terminal:
                    p.release(conn, *action.args)
            else:
                raise ValueError(action.op)
        except (JccError, HandlerError) as exc:
            log.warning("%s: %s(%s) failed: %s", call_id, action.op, action.role, exc)

    def _maybe_finish(self, call_id: str) -> None:
        legs = self.legs.get(call_id)
        ctx = self.contexts.get(call_id)
        if not legs or ctx is None or ctx.phase != ENDING:
            return
        if any(not getattr(c, "terminal", True) for c in legs.values()):
            return
        timer = self._timers.pop(call_id, None)
        if timer is not None:
            timer.cancel()
        self.outcomes[call_id] = CallOutcome(
            call_id, ctx.ended_by, ctx.reject_status, ctx.card, ctx.remaining_credit, ctx.bridged_at
        )
        del self.contexts[call_id]
        del self.legs[call_id]
