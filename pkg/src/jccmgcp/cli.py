"""Command line: ``jccmgcp {ms,pcs,uas,bench}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import socket
import sys

from .clock import Reactor
from .harness.bench import BenchConfig, ConfigInvalid, TopologyUnreachable, parse_faults, run_load, write_outputs
from .harness.metrics import LOSS_LIMIT
from .harness.script import UasBehavior, UasSimulator
from .jcc.core import JccProvider
from .media.server import MediaServerNode, MsConfig
from .mgcp.endpoint import MgcpEndpoint
from .mgcp.message import DEFAULT_CA_PORT, DEFAULT_MS_PORT
from .pcs.service import PcsConfig, PcsService
from .pcs.store import SubscriberStore
from .sip.endpoint import SipEndpoint
from .transport import UdpTransport


def _hostport(text: str, default_port: int) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        return text, default_port
    return host, int(port)


def _serve(reactor: Reactor, duration: float | None) -> None:
    try:
        reactor.run_until(None if duration is None else reactor.now() + duration)
    except KeyboardInterrupt:
        pass


class _ControlSocket:
    """UDP JSON side channel of a media server: ``{"port": 4000, "dtmf": "12#"}``
    or ``{"fault": "mdcx-fail", "count": 1}``."""

    def __init__(self, reactor: Reactor, node: MediaServerNode, addr: tuple[str, int]):
        self.node = node
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(addr)
        self.sock.setblocking(False)
        reactor.add_reader(self.sock, self._readable)

    def _readable(self) -> None:
        try:
            data, _ = self.sock.recvfrom(4096)
            msg = json.loads(data)
        except (BlockingIOError, ValueError):
            return
        if "dtmf" in msg:
            for digit in str(msg["dtmf"]):
                self.node.inject_dtmf(int(msg["port"]), digit)
        elif msg.get("fault") == "mdcx-fail":
            self.node.server.faults.mdcx_fail += int(msg.get("count", 1))
        elif msg.get("fault") == "crcx-fail":
            self.node.server.faults.crcx_fail += int(msg.get("count", 1))


def cmd_ms(args) -> int:
    config = MsConfig.from_json(args.config) if args.config else MsConfig()
    config.host, config.port = args.host, args.port
    reactor = Reactor("real")
    node = MediaServerNode(reactor, config)
    node.mgcp.transport = UdpTransport(reactor, node.address, node.mgcp.datagram_received)
    _ControlSocket(reactor, node, (args.host, args.control_port or args.port + 1))
    logging.info("media server on %s:%d", args.host, args.port)
    _serve(reactor, args.duration)
    return 0


def cmd_pcs(args) -> int:
    reactor = Reactor("real")
    sip_addr = _hostport(args.sip, 5060)
    sip = SipEndpoint(reactor, *sip_addr, prefix="as")
    sip.transport = UdpTransport(reactor, sip_addr, sip.datagram_received)
    mgcp = MgcpEndpoint(reactor, name="ca")
    mgcp.transport = UdpTransport(reactor, (sip_addr[0], args.mgcp_port), mgcp.datagram_received)
    provider = JccProvider(reactor, sip, mgcp)
    config = PcsConfig.from_json(args.config) if args.config else PcsConfig()
    overrides = {}
    if args.ms:
        overrides["ms_addresses"] = tuple(args.ms)
    if args.callee_domain:
        overrides["callee_domain"] = args.callee_domain
    if overrides:
        config = dataclasses.replace(config, **overrides)
    store = SubscriberStore.load(args.subscribers, write_through=True)
    PcsService(provider, store, config)
    logging.info("prepaid card service on %s:%d", *sip_addr)
    _serve(reactor, args.duration)
    store.flush()
    return 0


def cmd_uas(args) -> int:
    reactor = Reactor("real")
    sip = SipEndpoint(reactor, args.host, args.port, prefix="uas")
    sip.transport = UdpTransport(reactor, (args.host, args.port), sip.datagram_received)
    UasSimulator(reactor, sip, UasBehavior(args.ring_delay, args.answer_delay, args.reject))
    logging.info("uas on %s:%d", args.host, args.port)
    _serve(reactor, args.duration)
    return 0


def cmd_bench(args) -> int:
    try:
        config = BenchConfig(
            rate=args.rate,
            duration=args.duration,
            call_length=args.call_length,
            transport=args.transport,
            clock=args.clock,
            seed=args.seed,
            faults=parse_faults(args.faults),
            single_call=args.single_call,
            subscribers=args.subscribers,
            collection=args.collection,
            billing_period=args.billing_period,
            media_servers=args.media_servers,
            record_trace=args.trace is not None,
        )
        result = run_load(config)
    except (ConfigInvalid, TopologyUnreachable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = write_outputs(result, trace=args.trace, report=args.report, report_file=args.report_file)
    if not args.report_file:
        sys.stdout.write(text)
    return 1 if result.report.loss_fraction >= LOSS_LIMIT else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jccmgcp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ms", help="run a media server simulator over UDP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_MS_PORT)
    p.add_argument("--control-port", type=int, default=None, help="DTMF/fault JSON socket (default port+1)")
    p.add_argument("--config", help="JSON media server configuration")
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=cmd_ms)

    p = sub.add_parser("pcs", help="run the prepaid card service over UDP")
    p.add_argument("--sip", default="127.0.0.1:5060", help="SIP host:port")
    p.add_argument("--mgcp-port", type=int, default=DEFAULT_CA_PORT)
    p.add_argument("--ms", action="append", help="media server host:port (repeatable)")
    p.add_argument("--callee-domain", help="host:port that callee INVITEs are sent to")
    p.add_argument("--subscribers", required=True, help="subscriber JSON file")
    p.add_argument("--config", help="JSON service configuration")
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=cmd_pcs)

    p = sub.add_parser("uas", help="run a SIP responder over UDP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5062)
    p.add_argument("--ring-delay", type=float, default=0.1)
    p.add_argument("--answer-delay", type=float, default=1.0)
    p.add_argument("--reject", type=int, default=None, help="answer every INVITE with this status")
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=cmd_uas)

    p = sub.add_parser("bench", help="all-in-one run: UAC, service, media server and UAS")
    p.add_argument("--rate", type=float, default=0.0, help="calls per second")
    p.add_argument("--duration", type=float, default=60.0, help="seconds of arrivals")
    p.add_argument("--call-length", type=float, default=180.0)
    p.add_argument("--transport", choices=("inproc", "udp"), default="inproc")
    p.add_argument("--clock", choices=("virtual", "real"), default="virtual")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--single-call", action="store_true")
    p.add_argument("--subscribers")
    p.add_argument("--faults", help="e.g. drop:200(CRCX),drop:200(NTFY),ms-delay:0.05,mdcx-fail")
    p.add_argument("--trace", help="write the wire trace here (inproc only)")
    p.add_argument("--report", choices=("json", "csv"), default="json")
    p.add_argument("--report-file")
    p.add_argument("--collection", choices=("full", "compact"), default="full")
    p.add_argument("--billing-period", type=float, default=10.0)
    p.add_argument("--media-servers", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
