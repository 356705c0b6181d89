import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jccmgcp.sdp import MalformedSdp, MediaLine, SdpSession, make_sdp, parse_sdp, serialize_sdp
from jccmgcp.sip import (
    BodyLengthMismatch,
    InvariantViolation,
    MalformedStartLine,
    MissingMandatoryHeader,
    SipMessage,
    build_request,
    build_response,
    parse_sip,
    serialize_sip,
)
from jccmgcp.sip.transaction import (
    CALLING,
    CLIENT,
    COMPLETED,
    PROCEEDING,
    SERVER,
    TERMINATED,
    ArmTimer,
    Emit,
    IllegalEventForState,
    Notify,
    Rx,
    Send,
    SipTimers,
    SipTxState,
    TimerRetransmit,
    TimerTimeout,
    sip_transaction_step,
)

INVITE = (
    b"INVITE sip:pcs@as.example SIP/2.0\r\n"
    b"Via: SIP/2.0/UDP 10.0.0.1:5060;branch=z9hG4bK-1\r\n"
    b"Call-ID: c1\r\n"
    b"From: <sip:alice@uac.example>;tag=a1\r\n"
    b"To: <sip:pcs@as.example>\r\n"
    b"CSeq: 1 INVITE\r\n"
    b"Content-Length: 0\r\n\r\n"
)

SDP_TEXT = "v=0\r\no=ms 1 1 IN IP4 10.0.0.2\r\nc=IN IP4 10.0.0.2\r\nm=audio 4000 RTP/AVP 0\r\n"


def _invite(body: bytes = b"") -> SipMessage:
    return build_request(
        "INVITE",
        "sip:pcs@as.example",
        via="SIP/2.0/UDP 10.0.0.1:5060;branch=z9hG4bK-7",
        from_="<sip:alice@uac.example>;tag=a1",
        to="<sip:pcs@as.example>",
        call_id="c1",
        cseq=1,
        body=body,
    )


def test_parse_invite():
    msg = parse_sip(INVITE)
    assert msg.is_request
    assert msg.method == "INVITE"
    assert msg.uri == "sip:pcs@as.example"
    assert msg.body == b""
    assert msg.call_id == "c1"
    assert msg.cseq == (1, "INVITE")
    assert msg.branch == "z9hG4bK-1"


def test_captured_message_round_trips_bytes():
    assert serialize_sip(parse_sip(INVITE)) == INVITE


def test_unknown_headers_kept_in_order():
    raw = INVITE.replace(b"CSeq: 1 INVITE\r\n", b"X-B: 2\r\nCSeq: 1 INVITE\r\nX-A: 1\r\n")
    msg = parse_sip(raw)
    names = [n for n, _ in msg.headers]
    assert names.index("X-B") < names.index("CSeq") < names.index("X-A")
    assert serialize_sip(msg) == raw


def test_missing_call_id():
    raw = INVITE.replace(b"Call-ID: c1\r\n", b"")
    with pytest.raises(MissingMandatoryHeader) as err:
        parse_sip(raw)
    assert err.value.name == "Call-ID"


def test_bad_start_line():
    with pytest.raises(MalformedStartLine):
        parse_sip(b"HELLO\r\nCall-ID: x\r\n\r\n")


def test_body_length_mismatch():
    raw = INVITE.replace(b"Content-Length: 0", b"Content-Length: 10")
    with pytest.raises(BodyLengthMismatch):
        parse_sip(raw)


def test_serialize_183_with_sdp():
    body = b"x" * 120
    resp = build_response(_invite(), 183, to_tag="as1", body=body)
    out = serialize_sip(resp)
    assert out.startswith(b"SIP/2.0 183 Session Progress\r\n")
    assert b"Content-Length: 120\r\n" in out
    assert parse_sip(out) == resp


def test_serialize_recomputes_content_length():
    msg = _invite(b"abc")
    msg.set_header("Content-Length", "99")
    assert b"Content-Length: 3\r\n" in serialize_sip(msg)


def test_body_without_content_type_rejected():
    msg = _invite(b"v=0")
    msg.headers = [(n, v) for n, v in msg.headers if n != "Content-Type"]
    with pytest.raises(InvariantViolation):
        serialize_sip(msg)


def test_response_echoes_cseq_method():
    resp = build_response(_invite(), 200, to_tag="t")
    assert resp.cseq == (1, "INVITE")
    assert resp.method is None


def test_unsupported_method_parses():
    raw = INVITE.replace(b"INVITE sip", b"OPTIONS sip").replace(b"1 INVITE", b"1 OPTIONS")
    assert parse_sip(raw).method == "OPTIONS"


token = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-.", min_size=1, max_size=12)


@st.composite
def sip_messages(draw):
    method = draw(st.sampled_from(["INVITE", "ACK", "BYE"]))
    body = draw(st.binary(max_size=64))
    msg = build_request(
        method,
        f"sip:{draw(token)}@{draw(token)}",
        via=f"SIP/2.0/UDP {draw(token)};branch=z9hG4bK{draw(token)}",
        from_=f"<sip:{draw(token)}@x>;tag={draw(token)}",
        to=f"<sip:{draw(token)}@y>",
        call_id=draw(token),
        cseq=draw(st.integers(1, 2**31)),
        body=body,
    )
    for _ in range(draw(st.integers(0, 3))):
        msg.headers.insert(-1, (f"X-{draw(token)}", draw(token)))
    if draw(st.booleans()):
        status = draw(st.sampled_from([100, 180, 183, 200, 403, 486]))
        msg = build_response(msg, status, to_tag=draw(token), body=body)
    return msg


@settings(max_examples=200)
@given(sip_messages())
def test_sip_round_trip_property(msg):
    assert parse_sip(serialize_sip(msg)) == msg


# -- SDP -----------------------------------------------------------------


def test_parse_sdp_example():
    sdp = parse_sdp(SDP_TEXT)
    assert sdp.connection_address == "10.0.0.2"
    assert len(sdp.media) == 1
    assert sdp.media[0].media_type == "audio"
    assert sdp.media[0].port == 4000
    assert sdp.media[0].codecs == ("0",)


def test_sdp_without_media_line():
    with pytest.raises(MalformedSdp):
        parse_sdp("v=0\r\no=ms 1 1 IN IP4 10.0.0.2\r\nc=IN IP4 10.0.0.2\r\n")


def test_sdp_must_start_with_version():
    with pytest.raises(MalformedSdp):
        parse_sdp("o=ms 1 1 IN IP4 10.0.0.2\r\n")


def test_sdp_keeps_codec_order():
    sdp = make_sdp("alice", "10.0.0.1", 5000, codecs=("8", "0", "101"))
    assert parse_sdp(serialize_sdp(sdp)).media[0].codecs == ("8", "0", "101")


@st.composite
def sdp_sessions(draw):
    ip = ".".join(str(draw(st.integers(0, 255))) for _ in range(4))
    media = tuple(
        MediaLine(
            draw(st.sampled_from(["audio", "video"])),
            draw(st.integers(1, 65535)),
            tuple(draw(st.lists(st.sampled_from(["0", "8", "18", "101"]), min_size=1, max_size=4))),
        )
        for _ in range(draw(st.integers(1, 3)))
    )
    return SdpSession(f"{draw(token)} 1 1 IN IP4 {ip}", ip, media)


@given(sdp_sessions())
def test_sdp_round_trip_property(sdp):
    assert parse_sdp(serialize_sdp(sdp)) == sdp


# -- transactions ----------------------------------------------------------


def _client_after_send(msg=None):
    st0 = SipTxState(CLIENT)
    return sip_transaction_step(st0, Send(msg or _invite()))


def _resp(status, req=None):
    return build_response(req or _invite(), status, to_tag="t1")


def test_client_send_arms_base_timer():
    state, actions = _client_after_send()
    assert state.phase == CALLING
    assert isinstance(actions[0], Emit) and actions[0].msg.method == "INVITE"
    assert actions[1] == ArmTimer("retransmit", 0.5)


def test_calling_rx_183_goes_proceeding():
    state, _ = _client_after_send()
    r183 = _resp(183)
    state, actions = sip_transaction_step(state, Rx(r183))
    assert state.phase == PROCEEDING
    assert actions == [Notify("provisional", r183)]


def test_calling_retransmit_doubles():
    state, _ = _client_after_send()
    state, actions = sip_transaction_step(state, TimerRetransmit())
    assert state.retransmit_count == 1
    assert actions == [Emit(state.request), ArmTimer("retransmit", 1.0)]


def test_invite_delays_double_then_timeout():
    state, actions = _client_after_send()
    delays = [actions[1].delay]
    for _ in range(6):
        state, actions = sip_transaction_step(state, TimerRetransmit())
        delays.append(actions[-1].delay)
    assert delays[:6] == [0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
    assert actions[-1].kind == "timeout"
    assert state.retransmit_count == 6
    # no further retransmission once the max is reached
    assert sip_transaction_step(state, TimerRetransmit()) == (state, [])
    state, actions = sip_transaction_step(state, TimerTimeout())
    assert state.phase == TERMINATED
    assert actions == [Notify("timeout", state.request)]


def test_delay_cap_is_configurable():
    st0 = SipTxState(CLIENT, timers=SipTimers(base=0.5, max_delay=2.0))
    state, actions = sip_transaction_step(st0, Send(_invite()))
    delays = []
    for _ in range(5):
        state, actions = sip_transaction_step(state, TimerRetransmit())
        delays.append(actions[-1].delay)
    assert delays == [1.0, 2.0, 2.0, 2.0, 2.0]


def test_client_failure_final_emits_ack():
    state, _ = _client_after_send()
    state, actions = sip_transaction_step(state, Rx(_resp(486)))
    assert state.phase == COMPLETED
    assert actions[0].msg.method == "ACK"
    assert actions[0].msg.branch == state.request.branch
    assert actions[1].outcome == "final"


def test_client_2xx_terminates():
    state, _ = _client_after_send()
    state, actions = sip_transaction_step(state, Rx(_resp(200)))
    assert state.phase == TERMINATED
    assert [a.outcome for a in actions] == ["final"]


def test_terminated_absorbs_everything():
    state, _ = _client_after_send()
    state, _ = sip_transaction_step(state, Rx(_resp(200)))
    for ev in (Rx(_resp(200)), TimerRetransmit(), TimerTimeout(), Send(_invite())):
        assert sip_transaction_step(state, ev) == (state, [])


def test_server_invite_sends_100_immediately():
    state, actions = sip_transaction_step(SipTxState(SERVER), Rx(_invite()))
    assert state.phase == PROCEEDING
    assert actions[0].msg.status == 100
    assert actions[1].outcome == "request"
    # retransmitted INVITE repeats the last response
    _, again = sip_transaction_step(state, Rx(_invite()))
    assert again == [Emit(state.last_message)]


def test_server_failure_waits_for_ack():
    inv = _invite()
    state, _ = sip_transaction_step(SipTxState(SERVER), Rx(inv))
    state, actions = sip_transaction_step(state, Send(build_response(inv, 403, to_tag="x")))
    assert state.phase == COMPLETED
    ack = build_request("ACK", inv.uri, via=inv.header("Via"), from_=inv.header("From"),
                        to=inv.header("To"), call_id="c1", cseq=1)
    state, actions = sip_transaction_step(state, Rx(ack))
    assert state.phase == TERMINATED and actions == []


def test_illegal_event_raises():
    with pytest.raises(IllegalEventForState):
        sip_transaction_step(SipTxState(SERVER), Rx(_resp(200)))
    state, _ = _client_after_send()
    with pytest.raises(IllegalEventForState):
        sip_transaction_step(state, Rx(_invite()))


@given(st.lists(st.sampled_from(["r183", "r200", "r486", "rtx", "tmo"]), max_size=12))
def test_transaction_is_deterministic(events):
    def run():
        state, trace = _client_after_send()
        trace = list(trace)
        mapping = {"r183": Rx(_resp(183)), "r200": Rx(_resp(200)), "r486": Rx(_resp(486)),
                   "rtx": TimerRetransmit(), "tmo": TimerTimeout()}
        for name in events:
            try:
                state, actions = sip_transaction_step(state, mapping[name])
            except IllegalEventForState:
                actions = ["illegal"]
            trace.append(actions)
            if state.phase == TERMINATED:
                assert sip_transaction_step(state, mapping[name]) == (state, [])
        return state, trace

    assert run() == run()
