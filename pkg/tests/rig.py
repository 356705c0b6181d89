"""Small in-process topology for driving the provider from a test application."""

from __future__ import annotations

from jccmgcp.clock import Reactor
from jccmgcp.harness.script import AwaitStatus, Hold, ScenarioScript, SendBye, SendInvite, UacSimulator, UasBehavior, UasSimulator
from jccmgcp.jcc.core import JccProvider, MgcpConnection, SipConnection
from jccmgcp.media.server import MediaServerNode, MsConfig
from jccmgcp.mgcp.endpoint import MgcpEndpoint
from jccmgcp.sip.endpoint import SipEndpoint
from jccmgcp.transport import InprocNetwork

UAC = ("10.0.0.1", 5060)
AS = ("10.0.0.10", 5060)
CA = ("10.0.0.10", 2727)
UAS = ("10.0.0.3", 5060)
MS = "10.0.0.2:2427"
MS2 = "10.0.0.4:2427"


class Rig:
    def __init__(self, uas: UasBehavior | None = None, ms_config: MsConfig | None = None):
        self.reactor = Reactor("virtual")
        self.net = InprocNetwork(self.reactor)
        self.uac_sip = SipEndpoint(self.reactor, *UAC, prefix="uac")
        self.as_sip = SipEndpoint(self.reactor, *AS, prefix="as")
        self.uas_sip = SipEndpoint(self.reactor, *UAS, prefix="uas")
        self.ca = MgcpEndpoint(self.reactor, name="ca")
        self.ms = MediaServerNode(self.reactor, ms_config or MsConfig(), mgcp=MgcpEndpoint(self.reactor, name="ms"))
        self.ms2 = MediaServerNode(self.reactor, MsConfig(host="10.0.0.4"), mgcp=MgcpEndpoint(self.reactor, name="ms2"))
        for name, addr, ep in [
            ("uac", UAC, self.uac_sip), ("as", AS, self.as_sip), ("uas", UAS, self.uas_sip), ("as", CA, self.ca),
            ("ms", self.ms.address, self.ms.mgcp), ("ms2", self.ms2.address, self.ms2.mgcp),
        ]:
            ep.transport = self.net.attach(addr, ep.datagram_received, name)
        self.provider = JccProvider(self.reactor, self.as_sip, self.ca)
        self.uas = UasSimulator(self.reactor, self.uas_sip, uas or UasBehavior())
        self.uac = UacSimulator(self.reactor, self.uac_sip, AS, self._dtmf)
        self.events = []
        self.provider.add_listener(self.events.append)

    def _dtmf(self, host, port, digit):
        node = self.ms if host == self.ms.config.host else self.ms2
        node.inject_dtmf(port, digit)

    def call(self, hold: float = 60.0, await_status=183):
        script = ScenarioScript((SendInvite(), AwaitStatus(frozenset({await_status})), Hold(hold), SendBye()))
        return self.uac.start_call(script, {})

    def run(self, seconds: float) -> None:
        self.reactor.run_until(self.reactor.now() + seconds)

    def wire(self, protocol: str | None = None, since: int = 0) -> list[str]:
        return [e.summary for e in self.net.trace[since:] if protocol is None or e.protocol == protocol]

    def kinds(self, conn=None) -> list[str]:
        return [e.kind for e in self.events if conn is None or e.connection is conn]


def caller_of(call) -> SipConnection:
    return next(c for c in call.connections if isinstance(c, SipConnection) and c.incoming)


def mgcp_of(call) -> MgcpConnection:
    return next(c for c in call.connections if isinstance(c, MgcpConnection))
