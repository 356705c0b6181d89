import pytest
from hypothesis import given
from hypothesis import strategies as st

from jccmgcp.mgcp import (
    InvariantViolation,
    MgcpCommand,
    MgcpResponse,
    UnknownVerb,
    parse_mgcp,
    serialize_mgcp,
)
from jccmgcp.mgcp.transaction import (
    COMPLETED,
    SENT,
    TIMED_OUT,
    ArmTimer,
    Emit,
    MgcpTxState,
    Notify,
    RxResponse,
    SendCmd,
    TimerRetransmit,
    TimerTimeout,
    mgcp_transaction_step,
)
from jccmgcp.sdp import make_sdp

SDP = "v=0\r\no=ms 1 1 IN IP4 10.0.0.2\r\nc=IN IP4 10.0.0.2\r\nm=audio 4000 RTP/AVP 0\r\n"


def test_parse_crcx_with_sdp():
    raw = ("CRCX 1000 ivr/1@ms1 MGCP 1.0\r\nC: call1\r\nM: sendrecv\r\n\r\n" + SDP).encode()
    cmd = parse_mgcp(raw)
    assert isinstance(cmd, MgcpCommand)
    assert (cmd.verb, cmd.transaction_id, cmd.endpoint_id) == ("CRCX", 1000, "ivr/1@ms1")
    assert cmd.param("C") == "call1" and cmd.param("M") == "sendrecv"
    assert cmd.sdp.media[0].port == 4000


def test_parse_crcx_response():
    resp = parse_mgcp(("200 1000 OK\r\nI: conn7\r\n\r\n" + SDP).encode())
    assert isinstance(resp, MgcpResponse)
    assert resp.code == 200 and resp.transaction_id == 1000
    assert resp.param("I") == "conn7"
    assert resp.sdp.connection_address == "10.0.0.2"


def test_unknown_verb():
    with pytest.raises(UnknownVerb):
        parse_mgcp(b"FOO 1 e@h MGCP 1.0\r\n\r\n")


def test_rqnt_params_in_listed_order():
    cmd = MgcpCommand(
        "RQNT", 5, "ivr/1@ms1",
        (("X", "req1"), ("S", "A/ann(welcome)"), ("R", "D/all"), ("D", "(xxxx#)")),
    )
    out = serialize_mgcp(cmd)
    assert out == (
        b"RQNT 5 ivr/1@ms1 MGCP 1.0\r\n"
        b"X: req1\r\nS: A/ann(welcome)\r\nR: D/all\r\nD: (xxxx#)\r\n"
    )
    assert parse_mgcp(out) == cmd


def test_ntfy_without_observed_events():
    with pytest.raises(InvariantViolation):
        serialize_mgcp(MgcpCommand("NTFY", 1, "ivr/1@ms1", (("X", "1"),)))


def test_crcx_needs_call_and_mode():
    with pytest.raises(InvariantViolation):
        serialize_mgcp(MgcpCommand("CRCX", 1, "ivr/$@ms1", (("C", "c"),)))


def test_transaction_id_range():
    with pytest.raises(InvariantViolation):
        serialize_mgcp(MgcpCommand("DLCX", 0, "ivr/1@ms1"))
    with pytest.raises(InvariantViolation):
        serialize_mgcp(MgcpCommand("DLCX", 1_000_000_000, "ivr/1@ms1"))


value = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789()/#x.|,", min_size=1, max_size=16)


@st.composite
def commands(draw):
    verb = draw(st.sampled_from(["CRCX", "MDCX", "DLCX", "RQNT", "NTFY"]))
    params = []
    for code in {"CRCX": "CM", "RQNT": "X", "NTFY": "XO"}.get(verb, ""):
        params.append((code, draw(value)))
    for code in draw(st.lists(st.sampled_from(list("ILSRDN")), max_size=3)):
        params.append((code, draw(value)))
    sdp = make_sdp("ms", "10.0.0.2", draw(st.integers(1, 65535))) if draw(st.booleans()) else None
    return MgcpCommand(verb, draw(st.integers(1, 999_999_999)), f"ivr/{draw(st.integers(1, 99))}@ms", tuple(params), sdp)


@st.composite
def responses(draw):
    params = tuple((c, draw(value)) for c in draw(st.lists(st.sampled_from(list("IZ")), max_size=2)))
    sdp = make_sdp("ms", "10.0.0.2", 4000) if draw(st.booleans()) else None
    return MgcpResponse(draw(st.sampled_from([200, 400, 500, 510])), draw(st.integers(1, 999_999_999)),
                        draw(st.sampled_from(["OK", "Transient error", ""])), params, sdp)


@given(st.one_of(commands(), responses()))
def test_mgcp_round_trip_property(msg):
    assert parse_mgcp(serialize_mgcp(msg)) == msg


# -- transactions ----------------------------------------------------------

CMD = MgcpCommand("CRCX", 1000, "ivr/$@ms1", (("C", "c1"), ("M", "sendrecv")))


def test_send_then_success():
    state = MgcpTxState(CMD)
    state, actions = mgcp_transaction_step(state, SendCmd())
    assert actions == [Emit(CMD), ArmTimer("retransmit", 0.2)]
    ok = MgcpResponse(200, 1000, "OK")
    state, actions = mgcp_transaction_step(state, RxResponse(ok))
    assert state.phase == COMPLETED
    assert actions == [Notify("success", ok)]
    # duplicate absorbed
    assert mgcp_transaction_step(state, RxResponse(ok)) == (state, [])


def test_failure_response():
    state, actions = mgcp_transaction_step(MgcpTxState(CMD), RxResponse(MgcpResponse(400, 1000)))
    assert state.phase == COMPLETED and actions[0].outcome == "failure"


def test_four_retransmits_then_timeout():
    state, _ = mgcp_transaction_step(MgcpTxState(CMD), SendCmd())
    delays = []
    for _ in range(4):
        state, actions = mgcp_transaction_step(state, TimerRetransmit())
        assert actions[0] == Emit(CMD)
        delays.append(actions[1].delay)
    assert delays == [0.4, 0.8, 1.6, 3.2]
    assert actions[1].kind == "timeout"
    assert state.retransmit_count == 4
    assert mgcp_transaction_step(state, TimerRetransmit()) == (state, [])
    state, actions = mgcp_transaction_step(state, TimerTimeout())
    assert state.phase == TIMED_OUT
    assert actions[-1] == Notify("tx_timeout")


@given(st.lists(st.sampled_from(["ok", "dup", "fail", "rtx", "tmo"]), max_size=15))
def test_exactly_once_completion(events):
    state, _ = mgcp_transaction_step(MgcpTxState(CMD), SendCmd())
    notifies = 0
    mapping = {
        "ok": RxResponse(MgcpResponse(200, 1000)),
        "dup": RxResponse(MgcpResponse(200, 1000)),
        "fail": RxResponse(MgcpResponse(500, 1000)),
        "rtx": TimerRetransmit(),
        "tmo": TimerTimeout(),
    }
    for name in events:
        state, actions = mgcp_transaction_step(state, mapping[name])
        notifies += sum(isinstance(a, Notify) for a in actions)
        assert state.retransmit_count <= 4
    assert notifies <= 1
    assert (notifies == 1) == (state.phase != SENT)
