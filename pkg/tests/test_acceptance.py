"""The ten acceptance criteria, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL`` line straight to the
terminal, whether or not output capture is on.
"""

import contextlib
import dataclasses
import random
import time
from pathlib import Path

import pytest

from jccmgcp import cli
from jccmgcp.harness.bench import DEMO_SUBSCRIBER, BenchConfig, parse_faults, run_load
from jccmgcp.harness.metrics import CallRecord, MetricsReport, compute_srd, find_mct, find_mct95
from jccmgcp.jcc import handler as h
from jccmgcp.media.digitmap import digitmap_match, parse_digitmap
from jccmgcp.pcs.store import SubscriberStore

from oracles import brute_force_digitmap
from test_digitmap import random_digits, random_map
from test_handler import EVENTS, LEGAL, STATES
from test_jcc_core import SDP2, _mid_call, _run_params
from rig import MS, MS2

GOLDEN = Path(__file__).parent / "golden" / "single_call.trace"
TICK = 0.001  # one step of the in-process network clock


@pytest.fixture
def criterion(pytestconfig):
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    @contextlib.contextmanager
    def run(n: int, title: str):
        ok = False
        try:
            yield
            ok = True
        finally:
            line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}"
            with capman.global_and_fixture_disabled() if capman else contextlib.nullcontext():
                print("\n" + line, flush=True)

    return run


def test_01_golden_trace(criterion, tmp_path):
    with criterion(1, "single-call golden trace matches, under 5 s"):
        out = tmp_path / "single.trace"
        t0 = time.perf_counter()
        rc = cli.main(["bench", "--rate", "0", "--single-call", "--clock", "virtual", "--transport", "inproc",
                       "--trace", str(out), "--report-file", str(tmp_path / "r.json")])
        elapsed = time.perf_counter() - t0
        assert rc == 0
        assert out.read_bytes() == GOLDEN.read_bytes()
        assert elapsed < 5.0


def test_02_handler_closure(criterion):
    with criterion(2, "handler FSM closure over every (state, event) pair"):
        for sname, state in STATES.items():
            for ename, event in EVENTS.items():
                if ename in LEGAL[sname]:
                    new, actions = h.handler_step(state, event)
                    assert new.phase in h.PHASES
                    if state.phase == h.DISCONNECTED:
                        assert new == state and actions == []
                else:
                    with pytest.raises(h.IllegalEventForState):
                        h.handler_step(state, event)
        assert {s.phase for s in STATES.values()} == set(h.PHASES)


def test_03_parameter_classes(criterion):
    with criterion(3, "Modify -> 1 MDCX, Mandatory -> DLCX+CRCX, Request -> 1 RQNT"):
        rig, ms, wire = _run_params([f"remoteSdp={SDP2}"])
        assert [w.split()[0] for w in wire] == ["MDCX", "200"]
        assert [e.cause for e in _mid_call(rig, ms)] == ["CONNECTION_CHANGED"]

        rig, ms, wire = _run_params([f"endpointAddress={MS2}"])
        assert [w.split()[0] for w in wire] == ["DLCX", "200", "CRCX", "200"]
        assert MS in wire[0] and MS2 in wire[2]
        assert [e.cause for e in _mid_call(rig, ms)] == ["CONNECTION_CHANGED"]

        rig, ms, wire = _run_params(["signal=ann(hello)", "digitMap=(x.#)", "requestedEvents=dtmf"])
        assert [w.split()[0] for w in wire] == ["RQNT", "200"]


def test_04_digitmap_oracle(criterion):
    with criterion(4, "digit map equals brute-force oracle on 1000 seeded pairs, under 10 s"):
        rng = random.Random(20240601)
        t0 = time.perf_counter()
        for _ in range(1000):
            text, digits, timer = random_map(rng), random_digits(rng), rng.random() < 0.3
            got = digitmap_match(parse_digitmap(text), digits, timer_expired=timer)
            assert (got.kind.value, got.matched) == brute_force_digitmap(text, digits, timer), (text, digits, timer)
        assert time.perf_counter() - t0 < 10.0


def test_05_retransmission_recovery(criterion):
    with criterion(5, "dropped 200(CRCX) and NTFY ack: call completes, MS peak 1, final 0"):
        result = run_load(BenchConfig(single_call=True, faults=parse_faults("drop:200(CRCX),drop:200(NTFY)")))
        dropped = [line for line in result.trace if line.endswith("[dropped]")]
        assert len(dropped) == 2
        assert "200 (CRCX)" in dropped[0] and "200 (NTFY)" in dropped[1]
        rep = result.report
        assert rep.completed == 1 and rep.loss_fraction == 0.0
        assert rep.ms_peak_connections == 1 and rep.ms_final_connections == 0


def test_06_srd_and_mct(criterion):
    with criterion(6, "SRD = 50 ms, MCT = 41, MCT-95 drops the slow rate"):
        rec = CallRecord("c", 10.0, provisionals=[(10.005, 100), (10.05, 183)])
        assert compute_srd(rec) == pytest.approx(50.0, abs=1e-9)

        def rep(loss, p95=100.0):
            return MetricsReport(offered_rate=0, loss_fraction=loss, srd_p95_ms=p95)

        assert find_mct([(30, rep(0.002)), (41, rep(0.008)), (45, rep(0.02))]) == 41
        assert find_mct95([(30, rep(0.002, 200.0)), (41, rep(0.008, 501.0)), (45, rep(0.02))]) == 30


def _bye_times(result):
    return [float(line.split()[0]) for line in result.trace if "SIP  BYE" in line]


def test_07_credit(criterion):
    with criterion(7, "30 s credit: 2 BYEs at 30 s +-1 tick, credit 0; 120 s of 300 leaves 180"):
        store = SubscriberStore([DEMO_SUBSCRIBER])
        result = run_load(BenchConfig(single_call=True), store=store, keep_open=True)
        outcome = next(iter(result.topology.pcs.outcomes.values()))
        byes = _bye_times(result)
        assert len(byes) == 2
        assert all(abs(t - (outcome.bridged_at + 30.0)) <= TICK + 1e-9 for t in byes)
        assert outcome.ended_by == "credit"
        assert store.get(DEMO_SUBSCRIBER.card_number).credit_seconds == 0

        store = SubscriberStore([dataclasses.replace(DEMO_SUBSCRIBER, credit_seconds=300)])
        result = run_load(BenchConfig(single_call=True, call_length=120), store=store)
        assert result.records[0].outcome == "completed"
        assert store.get(DEMO_SUBSCRIBER.card_number).credit_seconds == 180


def test_08_interaction_counts(criterion):
    with criterion(8, "app interactions < wire messages, <= 12 with one RQNT round"):
        for collection in ("full", "compact"):
            rep = run_load(BenchConfig(single_call=True, collection=collection)).report
            assert rep.app_interactions_per_call < rep.wire_messages_per_call
            assert rep.app_interactions_per_call < rep.wire_messages_setup_per_call
        result = run_load(BenchConfig(single_call=True, collection="compact"))
        assert sum(1 for line in result.trace if "MGCP RQNT" in line) == 1
        assert result.report.app_interactions_per_call <= 12


def test_09_real_clock_load(criterion):
    with criterion(9, "real clock inproc, 50 cps for 120 s: loss < 1 %, p95 SRD < 500 ms"):
        rep = run_load(BenchConfig(rate=50, duration=120, call_length=5, clock="real", record_trace=False)).report
        print(rep.to_json())
        assert rep.attempted == 6000
        assert rep.loss_fraction < 0.01
        assert rep.srd_p95_ms is not None and rep.srd_p95_ms < 500.0


def test_10_determinism(criterion):
    with criterion(10, "byte-identical traces and reports across runs"):
        for cfg in (BenchConfig(single_call=True), BenchConfig(rate=10, duration=5, call_length=4, seed=3),
                    BenchConfig(single_call=True, faults=parse_faults("drop:200(CRCX),drop:200(NTFY)"))):
            a, b = run_load(cfg), run_load(cfg)
            assert a.trace_text().encode() == b.trace_text().encode()
            assert a.report.to_json().encode() == b.report.to_json().encode()
