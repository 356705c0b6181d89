"""All-in-one topology: UAC, PCS application server, media server(s), UAS.

``run_load`` launches calls at exact ``1/rate`` spacing (or a single call),
runs the reactor until every call has ended, and aggregates the records.
Under the in-process transport with the virtual clock a run is a pure
function of its configuration, so traces and reports are reproducible.
"""

from __future__ import annotations

import dataclasses
import logging
import random
import re
from pathlib import Path

from ..clock import Reactor
from ..jcc.core import JccProvider
from ..media.server import MediaServerNode, MsConfig
from ..mgcp.endpoint import MgcpEndpoint
from ..mgcp.message import DEFAULT_CA_PORT, DEFAULT_MS_PORT
from ..pcs.service import PcsConfig, PcsService
from ..pcs.store import SubscriberProfile, SubscriberStore
from ..sip.endpoint import SipEndpoint
from ..transport import DropRule, InprocNetwork, UdpTransport
from .metrics import CallRecord, MetricsReport, summarize
from .script import ScenarioScript, UacSimulator, UasBehavior, UasSimulator

log = logging.getLogger(__name__)

DEMO_SUBSCRIBER = SubscriberProfile("1234567890", "4321", 30, 1)
DEMO_CALLEE = "5551234"


class ConfigInvalid(ValueError):
    pass


class TopologyUnreachable(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class Faults:
    drops: tuple[tuple[str, int], ...] = ()
    ms_delay: float = 0.0
    mdcx_fail: int = 0
    crcx_fail: int = 0


_FAULT = re.compile(r"^(drop|ms-delay|mdcx-fail|crcx-fail)(?::(.+))?$")


def parse_faults(spec: str | None) -> Faults:
    """Parse e.g. ``drop:200(CRCX),drop:200(NTFY)x2,ms-delay:0.05,mdcx-fail``.

    ``drop:LABEL`` drops the first datagram whose trace label is LABEL
    (spaces ignored); an ``xN`` suffix drops the first N.
    """
    if not spec:
        return Faults()
    drops: list[tuple[str, int]] = []
    values = {"ms_delay": 0.0, "mdcx_fail": 0, "crcx_fail": 0}
    for item in re.split(r",(?![^()]*\))", spec):
        item = item.strip()
        if not item:
            continue
        m = _FAULT.match(item)
        if m is None:
            raise ConfigInvalid(f"unknown fault {item!r}")
        kind, arg = m.groups()
        try:
            if kind == "drop":
                if not arg:
                    raise ConfigInvalid("drop needs a label")
                label, count = arg, 1
                mm = re.match(r"^(.*\S)x(\d+)$", arg)
                if mm:
                    label, count = mm.group(1), int(mm.group(2))
                drops.append((label, count))
            elif kind == "ms-delay":
                values["ms_delay"] = float(arg)
            else:
                values[kind.replace("-", "_")] = int(arg) if arg else 1
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"bad fault {item!r}: {exc}") from None
    return Faults(tuple(drops), **values)


@dataclasses.dataclass(frozen=True)
class BenchConfig:
    rate: float = 0.0
    duration: float = 60.0
    call_length: float = 180.0
    transport: str = "inproc"
    clock: str = "virtual"
    seed: int = 1
    faults: Faults = Faults()
    single_call: bool = False
    subscribers: str | None = None
    collection: str = "full"
    billing_period: float = 10.0
    media_servers: int = 1
    latency: float = 0.001
    announcement: float = 2.0
    uas: UasBehavior = UasBehavior()
    base_port: int = 15060
    record_trace: bool = True

    def validate(self) -> None:
        if self.transport not in ("inproc", "udp"):
            raise ConfigInvalid(f"transport must be inproc or udp, not {self.transport!r}")
        if self.clock not in ("virtual", "real"):
            raise ConfigInvalid(f"clock must be virtual or real, not {self.clock!r}")
        if self.transport == "udp" and self.clock != "real":
            raise ConfigInvalid("the udp transport needs the real clock")
        if self.transport == "udp" and self.faults.drops:
            raise ConfigInvalid("drop faults need the inproc transport")
        if not self.single_call and (self.rate <= 0 or self.duration <= 0):
            raise ConfigInvalid("a load run needs rate > 0 and duration > 0 (or --single-call)")
        if self.collection not in ("full", "compact"):
            raise ConfigInvalid("collection must be full or compact")
        if not 1 <= self.media_servers <= 8:
            raise ConfigInvalid("between 1 and 8 media servers")


class Topology:
    """Wires every node onto one reactor over the chosen transport."""

    def __init__(self, config: BenchConfig, store: SubscriberStore):
        config.validate()
        self.config = config
        self.reactor = Reactor(config.clock)
        udp = config.transport == "udp"
        self.network = None if udp else InprocNetwork(self.reactor, config.latency)
        if self.network is not None:
            self.network.record_trace = config.record_trace
            self.network.drop_rules = [DropRule(label, count) for label, count in config.faults.drops]

        if udp:
            base = config.base_port
            lo = "127.0.0.1"
            uac, as_sip, uas = (lo, base), (lo, base + 1), (lo, base + 2)
            as_mgcp = (lo, base + 3)
            ms_addrs = [(lo, base + 10 + i) for i in range(config.media_servers)]
        else:
            uac, as_sip, uas = ("10.0.0.1", 5060), ("10.0.0.10", 5060), ("10.0.0.3", 5060)
            as_mgcp = ("10.0.0.10", DEFAULT_CA_PORT)
            ms_addrs = [(f"10.0.0.{2 + i * 2}" if i else "10.0.0.2", DEFAULT_MS_PORT) for i in range(config.media_servers)]
        self.addresses = {"uac": uac, "as": as_sip, "uas": uas, "ca": as_mgcp}

        self.uac_sip = SipEndpoint(self.reactor, *uac, prefix="uac")
        self.as_sip = SipEndpoint(self.reactor, *as_sip, prefix="as")
        self.uas_sip = SipEndpoint(self.reactor, *uas, prefix="uas")
        self.as_mgcp = MgcpEndpoint(self.reactor, name="ca")
        self.media: list[MediaServerNode] = []
        for i, addr in enumerate(ms_addrs):
            ms_conf = MsConfig(host=addr[0], port=addr[1], default_announcement=config.announcement,
                               service_delay=config.faults.ms_delay)
            node = MediaServerNode(self.reactor, ms_conf, mgcp=MgcpEndpoint(self.reactor, name=f"ms{i + 1}"))
            node.server.faults.mdcx_fail = config.faults.mdcx_fail
            node.server.faults.crcx_fail = config.faults.crcx_fail
            self.media.append(node)

        names = [("uac", uac, self.uac_sip), ("as", as_sip, self.as_sip), ("uas", uas, self.uas_sip),
                 ("as", as_mgcp, self.as_mgcp)]
        names += [("ms" if i == 0 else f"ms{i + 1}", n.address, n.mgcp) for i, n in enumerate(self.media)]
        try:
            for name, addr, ep in names:
                if udp:
                    ep.transport = UdpTransport(self.reactor, addr, ep.datagram_received)
                else:
                    ep.transport = self.network.attach(addr, ep.datagram_received, name)
        except OSError as exc:
            raise TopologyUnreachable(f"cannot bind {exc}") from exc

        self.provider = JccProvider(self.reactor, self.as_sip, self.as_mgcp)
        pcs_conf = PcsConfig(
            ms_addresses=tuple(f"{h}:{p}" for h, p in ms_addrs),
            callee_domain=f"{uas[0]}:{uas[1]}",
            billing_period=config.billing_period,
            collection=config.collection,
        )
        self.store = store
        self.pcs = PcsService(self.provider, store, pcs_conf)
        self.uas = UasSimulator(self.reactor, self.uas_sip, config.uas)
        self.uac = UacSimulator(self.reactor, self.uac_sip, as_sip, self._dtmf)

    def _dtmf(self, host: str, port: int, digit: str) -> None:
        for node in self.media:
            if node.config.host == host:
                node.inject_dtmf(port, digit)
                return
        log.info("no media server at %s for dtmf", host)

    def close(self) -> None:
        for ep in (self.uac_sip, self.as_sip, self.uas_sip, self.as_mgcp, *[n.mgcp for n in self.media]):
            if ep.transport is not None:
                ep.transport.close()
        self.reactor.close()


def load_store(config: BenchConfig, n_calls: int) -> tuple[SubscriberStore, list[dict]]:
    """Subscribers plus one parameter set (card, pin, callee) per call."""
    rng = random.Random(config.seed)
    if config.subscribers:
        store = SubscriberStore.load(config.subscribers)
        pool = store.profiles()
        if not pool:
            raise ConfigInvalid("subscriber file is empty")
        params = [
            {"card": p.card_number, "pin": p.pin, "callee": f"{rng.randrange(10**6, 10**7)}"}
            for p in (pool[i % len(pool)] for i in range(n_calls))
        ]
        if config.single_call:
            params[0]["callee"] = DEMO_CALLEE
        return store, params
    if config.single_call:
        store = SubscriberStore([DEMO_SUBSCRIBER])
        return store, [{"card": DEMO_SUBSCRIBER.card_number, "pin": DEMO_SUBSCRIBER.pin, "callee": DEMO_CALLEE}]
    credit = int(config.call_length) + 60
    profiles = []
    params = []
    for i in range(n_calls):
        card = f"{7000000000 + i}"
        pin = f"{rng.randrange(10_000):04d}"
        profiles.append(SubscriberProfile(card, pin, credit, 1))
        params.append({"card": card, "pin": pin, "callee": f"{rng.randrange(10**6, 10**7)}"})
    return SubscriberStore(profiles), params


@dataclasses.dataclass
class RunResult:
    config: BenchConfig
    report: MetricsReport
    records: list[CallRecord]
    trace: list[str]
    topology: Topology

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)


def run_load(config: BenchConfig, *, store: SubscriberStore | None = None, keep_open: bool = False) -> RunResult:
    n_calls = 1 if config.single_call else int(round(config.rate * config.duration))
    default_store, params = load_store(config, n_calls)
    store = store or default_store
    topo = Topology(config, store)
    script = ScenarioScript.pcs(config.call_length, compact=config.collection == "compact")
    reactor = topo.reactor
    spacing = 0.0 if config.single_call else 1.0 / config.rate
    started = [0]

    def launch(i: int) -> None:
        topo.uac.start_call(script, params[i])
        started[0] += 1

    t0 = reactor.now()
    for i in range(n_calls):
        reactor.call_at(t0 + i * spacing, lambda i=i: launch(i))

    last_arrival = t0 + (n_calls - 1) * spacing
    # generous bound: setup + hold + teardown retransmissions
    deadline = last_arrival + config.call_length + 200.0

    def finished() -> bool:
        return started[0] == n_calls and topo.uac.active == 0

    reactor.run_until(deadline, until=finished)
    # let late responses and linger timers go through a little
    reactor.run_until(reactor.now() + 1.0 if config.clock == "real" else reactor.now() + 40.0)

    for rec in topo.uac.records:
        if rec.outcome is None:
            rec.outcome = "lost"
    counts = per_call_counts(topo)
    ms_peak = sum(n.server.peak_connections for n in topo.media)
    ms_final = sum(n.server.connection_count for n in topo.media)
    report = summarize(
        topo.uac.records,
        config.rate,
        per_call_counts=counts,
        ms_peak_connections=ms_peak,
        ms_final_connections=ms_final,
        duration=config.duration if not config.single_call else 0.0,
        call_length=config.call_length,
        seed=config.seed,
    )
    trace = capture_trace(topo)
    result = RunResult(config, report, topo.uac.records, trace, topo)
    if not keep_open:
        topo.close()
    return result


def per_call_counts(topo: Topology) -> list[tuple[int, int, int, int]]:
    """(app, wire, app_setup, wire_setup) for every call that was bridged."""
    out = []
    completed = {r.call_id for r in topo.uac.records if r.outcome == "completed"}
    for call in topo.provider.finished:
        legs = call.sip_legs()
        if not legs or legs[0].sip_call_id not in completed or call.setup_interactions is None:
            continue
        out.append((len(call.interactions), call.wire_messages, call.setup_interactions, call.setup_wire_messages))
    return out


def capture_trace(topo: Topology) -> list[str]:
    """Canonical wire log, followed by one count line per finished call."""
    if topo.network is None:
        return []
    lines = [entry.line() for entry in topo.network.trace]
    for call in topo.provider.finished:
        lines.append(
            f"# {call.id} app_interactions={len(call.interactions)} "
            f"app_setup={call.setup_interactions} wire_messages={call.wire_messages} "
            f"wire_setup={call.setup_wire_messages}"
        )
    return lines


def write_outputs(result: RunResult, *, trace: str | Path | None, report: str | None, report_file: str | Path | None = None) -> str:
    text = result.report.to_csv() if report == "csv" else result.report.to_json()
    if trace:
        Path(trace).write_text(result.trace_text())
    if report_file:
        Path(report_file).write_text(text)
    return text
