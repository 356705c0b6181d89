import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jccmgcp.media.server import MediaServer, MsConfig
from jccmgcp.mgcp.message import MgcpCommand
from jccmgcp.sdp import parse_sdp

CA = ("10.0.0.10", 2727)
DOMAIN = "10.0.0.2:2427"
SDP = parse_sdp("v=0\r\no=- 1 1 IN IP4 10.0.0.1\r\ns=-\r\nc=IN IP4 10.0.0.1\r\nt=0 0\r\nm=audio 20000 RTP/AVP 0\r\n")


def cmd(verb, endpoint, *params, sdp=None, tid=1):
    return MgcpCommand(verb, tid, endpoint, tuple(params), sdp)


def crcx(ms, prefix="ivr", call="c1"):
    resp, out = ms.handle_command(cmd("CRCX", f"{prefix}/$@{DOMAIN}", ("C", call), ("M", "sendrecv"), sdp=SDP), 0.0, CA)
    assert out == []
    return resp


def test_crcx_allocates_lowest_free_endpoint():
    ms = MediaServer(MsConfig(endpoints={"ivr": 2, "ann": 1}))
    first, second = crcx(ms), crcx(ms, call="c2")
    assert (first.code, second.code) == (200, 200)
    assert first.param("Z") == f"ivr/1@{DOMAIN}" and second.param("Z") == f"ivr/2@{DOMAIN}"
    assert first.sdp.audio_port == 4000 and second.sdp.audio_port == 4002
    assert crcx(ms, call="c3").code == 403
    ms.handle_command(cmd("DLCX", first.param("Z"), ("I", first.param("I"))), 1.0, CA)
    assert crcx(ms, call="c4").param("Z") == f"ivr/1@{DOMAIN}"
    assert ms.peak_connections == 2 and ms.connection_count == 2


@pytest.mark.parametrize(
    "endpoint, code",
    [("ivr/$@10.9.9.9:2427", 500), ("bogus/$@" + DOMAIN, 500), ("ivr/7@" + DOMAIN, 500)],
)
def test_crcx_unknown_endpoint(endpoint, code):
    ms = MediaServer()
    resp, _ = ms.handle_command(cmd("CRCX", endpoint, ("C", "c1")), 0.0, CA)
    assert resp.code == code


def test_mdcx_and_dlcx():
    ms = MediaServer()
    r = crcx(ms)
    ep, conn = r.param("Z"), r.param("I")
    resp, _ = ms.handle_command(cmd("MDCX", ep, ("C", "c1"), ("I", conn), ("M", "recvonly")), 0.0, CA)
    assert resp.code == 200
    resp, _ = ms.handle_command(cmd("MDCX", ep, ("C", "c1"), ("I", "nope")), 0.0, CA)
    assert resp.code == 515
    ms.faults.mdcx_fail = 1
    resp, _ = ms.handle_command(cmd("MDCX", ep, ("C", "c1"), ("I", conn)), 0.0, CA)
    assert resp.code == 400
    resp, _ = ms.handle_command(cmd("DLCX", ep, ("C", "c1"), ("I", conn)), 0.0, CA)
    assert resp.code == 200 and ms.connection_count == 0
    assert ep not in ms.endpoints


def test_rqnt_announcement_then_collect():
    ms = MediaServer(MsConfig(default_announcement=2.0, first_digit_timer=16.0))
    r = crcx(ms)
    ep, port = r.param("Z"), r.sdp.audio_port
    resp, _ = ms.handle_command(
        cmd("RQNT", ep, ("X", "7"), ("S", "A/ann(card)"), ("R", "D/dtmf"), ("D", "(xxxx#)")), 0.0, CA
    )
    assert resp.code == 200
    assert ms.tick(1.0) == []
    assert ms.tick(2.0) == []  # announcement over, first-digit timer running
    out = []
    for i, d in enumerate("1234#"):
        out += ms.inject_dtmf(port, d, 3.0 + i * 0.1)
    ((ntfy, dst),) = out
    assert dst == CA
    assert ntfy.verb == "NTFY" and ntfy.param("X") == "7" and ntfy.param("O") == "D/1234#"
    assert ms.inject_dtmf(port, "1", 4.0) == []  # request consumed


def test_first_digit_timeout():
    ms = MediaServer(MsConfig(default_announcement=2.0, first_digit_timer=16.0))
    r = crcx(ms)
    ms.handle_command(cmd("RQNT", r.param("Z"), ("X", "1"), ("S", "A/ann(card)"), ("R", "D/dtmf"), ("D", "(x.#)")), 0.0, CA)
    ms.tick(2.0)
    assert ms.tick(17.9) == []
    ((ntfy, _),) = ms.tick(18.0)
    assert ntfy.param("O") == "D/timeout"


def test_inter_digit_timer_completes_open_map():
    ms = MediaServer(MsConfig(inter_digit_timer=4.0))
    r = crcx(ms)
    ms.handle_command(cmd("RQNT", r.param("Z"), ("X", "1"), ("R", "D/dtmf"), ("D", "(xxT|xxx)")), 0.0, CA)
    port = r.sdp.audio_port
    assert ms.inject_dtmf(port, "1", 1.0) == []
    assert ms.inject_dtmf(port, "2", 1.5) == []
    ((ntfy, _),) = ms.tick(5.5)
    assert ntfy.param("O") == "D/12"


def test_nomatch():
    ms = MediaServer()
    r = crcx(ms)
    ms.handle_command(cmd("RQNT", r.param("Z"), ("X", "1"), ("R", "D/dtmf"), ("D", "(xxxx#)")), 0.0, CA)
    port = r.sdp.audio_port
    ms.inject_dtmf(port, "1", 1.0)
    ((ntfy, _),) = ms.inject_dtmf(port, "#", 1.1)
    assert ntfy.param("O") == "D/nomatch"


def test_signal_done_notification():
    ms = MediaServer(MsConfig(announcements={"bye": 3.0}))
    r = crcx(ms)
    ms.handle_command(cmd("RQNT", r.param("Z"), ("X", "4"), ("S", "A/ann(bye)"), ("R", "A/oc")), 0.0, CA)
    assert ms.tick(2.9) == []
    ((ntfy, _),) = ms.tick(3.0)
    assert ntfy.param("O") == "A/oc"


def test_notified_entity_overrides_source():
    ms = MediaServer()
    r = crcx(ms)
    ms.handle_command(cmd("RQNT", r.param("Z"), ("X", "1"), ("N", "ca@10.0.0.99:2727"), ("R", "D/dtmf"), ("D", "x")), 0.0, CA)
    ((_, dst),) = ms.inject_dtmf(r.sdp.audio_port, "5", 1.0)
    assert dst == ("10.0.0.99", 2727)


def test_new_request_replaces_old():
    ms = MediaServer()
    r = crcx(ms)
    ep, port = r.param("Z"), r.sdp.audio_port
    ms.handle_command(cmd("RQNT", ep, ("X", "1"), ("S", "A/ann(a)"), ("R", "D/dtmf"), ("D", "(x.#)")), 0.0, CA)
    ms.handle_command(cmd("RQNT", ep, ("X", "2"), ("R", "D/dtmf"), ("D", "x")), 0.5, CA)
    assert ms.tick(2.0) == []  # stale signal_done of request 1
    ((ntfy, _),) = ms.inject_dtmf(port, "3", 2.5)
    assert ntfy.param("X") == "2"


@pytest.mark.parametrize(
    "params, code",
    [
        ((("X", "1"), ("R", "D/dtmf")), 510),  # announcement endpoint cannot collect
        ((("X", "1"), ("S", "A/beep")), 510),
        ((("X", "1"), ("S", "A/ann(x)")), 200),
    ],
)
def test_rqnt_on_announcement_endpoint(params, code):
    ms = MediaServer()
    r = crcx(ms, prefix="ann")
    resp, _ = ms.handle_command(cmd("RQNT", r.param("Z"), *params), 0.0, CA)
    assert resp.code == code


def test_bad_digit_map():
    ms = MediaServer()
    r = crcx(ms)
    resp, _ = ms.handle_command(cmd("RQNT", r.param("Z"), ("X", "1"), ("R", "D/dtmf"), ("D", "(x")), 0.0, CA)
    assert resp.code == 510


@settings(max_examples=50)
@given(st.lists(st.sampled_from(["crcx", "dlcx"]), max_size=40))
def test_connection_accounting(ops):
    ms = MediaServer(MsConfig(endpoints={"ivr": 5}))
    live = []
    peak = 0
    for op in ops:
        if op == "crcx":
            r = crcx(ms)
            if r.code == 200:
                live.append((r.param("Z"), r.param("I")))
            else:
                assert r.code == 403 and len(live) == 5
        elif live:
            ep, conn = live.pop(0)
            resp, _ = ms.handle_command(cmd("DLCX", ep, ("I", conn)), 0.0, CA)
            assert resp.code == 200
        peak = max(peak, len(live))
        assert ms.connection_count == len(live)
    assert ms.peak_connections == peak
