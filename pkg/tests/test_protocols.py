import numpy as np
import pytest
from hypothesis import given, strategies as st

from trmac import protocols as pr
from trmac.phy import DecodeOutcome

TIMING = pr.TimingPlan()
PARAMS = pr.MacParams(npt=2, backoff=pr.BackoffParams(initial_window=4))


def _pkt(src=0, dst=1, i=0):
    return pr.Packet(i, src, dst, 0)


def _state(fsm=pr.IDLE, queue=(), node=0, attempts=0):
    return pr.NodeState(node, fsm, tuple(queue), 0, attempts)


# --- timing and packets ---------------------------------------------------------------


def test_timing_from_default_bits():
    t = pr.TimingPlan.from_bits(80, 20, 20.0, 1.0)
    assert (t.preamble_cycles, t.ack_cycles, t.data_cycles) == (1, 1, 3)
    assert t.total == 5 and t.packet_cycles == 4


def test_timing_rounds_partial_cycles_up():
    t = pr.TimingPlan.from_bits(80, 20, 16.0, 1.0)
    assert (t.preamble_cycles, t.data_cycles) == (2, 4)
    assert pr.TimingPlan.from_bits(80, 20, 40.0, 2.0) == TIMING


@pytest.mark.parametrize("kwargs", [dict(preamble_bits=0), dict(preamble_bits=80), dict(datarate_gbps=0)])
def test_timing_rejects_bad_inputs(kwargs):
    with pytest.raises(ValueError):
        pr.TimingPlan.from_bits(**kwargs)


def test_packet_validation():
    with pytest.raises(ValueError, match="src == dst"):
        pr.Packet(0, 3, 3, 0)
    with pytest.raises(ValueError):
        pr.Packet(0, 1, 2, 0, size_bits=20, preamble_bits=20)


# --- backoff ----------------------------------------------------------------------------


def test_backoff_window_doubles_and_caps():
    p = pr.BackoffParams(initial_window=2, max_exponent=3)
    assert [p.window(k) for k in range(6)] == [2, 4, 8, 16, 16, 16]
    assert pr.BackoffParams(initial_window=2, cap=5).window(4) == 5


@pytest.mark.parametrize("attempt", [1, 2, 4])
def test_backoff_empirical_mean(attempt):
    p = pr.BackoffParams(initial_window=8)
    rng = np.random.default_rng(attempt)
    draws = np.array([pr.next_backoff(attempt, p, rng) for _ in range(100_000)])
    w = p.window(attempt - 1)
    assert draws.min() >= 0 and draws.max() < w
    assert draws.mean() == pytest.approx((w - 1) / 2, rel=0.02)


@given(st.integers(1, 64), st.integers(0, 12), st.integers(1, 30))
def test_backoff_draw_stays_inside_window(w0, emax, attempt):
    p = pr.BackoffParams(initial_window=w0, max_exponent=emax)
    r = pr.next_backoff(attempt, p, np.random.default_rng(attempt))
    assert 0 <= r < p.window(attempt - 1)
    assert p.window(attempt) >= p.window(attempt - 1)


def test_backoff_rejects_attempt_zero():
    with pytest.raises(ValueError):
        pr.next_backoff(0, pr.BackoffParams(), np.random.default_rng())


# --- TRMAC FSM --------------------------------------------------------------------------


def test_trmac_lone_exchange_takes_five_slots(rng):
    s = _state(queue=[_pkt()])
    trace = []
    inputs = pr.NO_INPUT
    for _ in range(5):
        s, act = pr.trmac_step(s, inputs, TIMING, rng, PARAMS)
        trace.append((pr.describe_state(s.fsm), act.describe()))
        inputs = pr.SlotInputs(ack_seen=type(s.fsm) is pr.AwaitAck)
    assert trace == [
        ("PreambleSent(1,0)", "preamble:1"),
        ("AwaitAck(1)", "none"),
        ("TxData(1,2)", "data:1+tone"),
        ("TxData(1,1)", "data:1+tone"),
        ("Idle", "data:1+tone+deliver"),
    ]


def test_trmac_missing_ack_enters_backoff(scripted_rng):
    rng = scripted_rng([3])
    s = _state(pr.AwaitAck(1), [_pkt()])
    s, act = pr.trmac_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
    assert s.fsm == pr.Backoff(3, 1) and s.attempt_count == 1 and act == pr.NO_ACTION


def test_trmac_backoff_counts_down_then_sends(rng):
    s = _state(pr.Backoff(1, 1), [_pkt()], attempts=1)
    s, act = pr.trmac_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
    assert s.fsm == pr.Backoff(0, 1) and not act.uses_medium
    s, act = pr.trmac_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
    assert act.send_preamble == 1


def test_trmac_receiver_acks_and_locks(rng):
    s = _state(node=1)
    s, act = pr.trmac_step(s, pr.SlotInputs(preamble_outcome=DecodeOutcome.decoded(0)), TIMING, rng, PARAMS)
    assert act.send_ack == 0 and s.fsm == pr.RxLocked(0, 3, None)
    for _ in range(3):
        s, act = pr.trmac_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
        assert not act.uses_medium
    assert s.fsm == pr.RxLocked(0, 0, None)
    s, _ = pr.trmac_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
    assert s.fsm == pr.IDLE


def test_trmac_backoff_resumes_after_serving_as_receiver(rng):
    s = _state(pr.Backoff(4, 2), [_pkt(1, 2)], node=1, attempts=2)
    s, act = pr.trmac_step(s, pr.SlotInputs(preamble_outcome=DecodeOutcome.garbled(3)), TIMING, rng, PARAMS)
    assert act.send_ack == 3 and s.fsm == pr.RxLocked(3, 3, pr.Backoff(4, 2))
    for _ in range(3):
        s, _ = pr.trmac_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
    assert s.fsm == pr.RxLocked(3, 0, pr.Backoff(4, 2))
    # the slot the lock ends already counts down the resumed backoff
    s, _ = pr.trmac_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
    assert s.fsm == pr.Backoff(3, 2)


def test_trmac_defers_to_tone_count(rng):
    s = _state(queue=[_pkt()])
    s2, act = pr.trmac_step(s, pr.SlotInputs(tone_active=True, tone_count=2), TIMING, rng, PARAMS)
    assert s2.fsm == pr.IDLE and not act.uses_medium
    _, act = pr.trmac_step(s, pr.SlotInputs(tone_active=True, tone_count=1), TIMING, rng, PARAMS)
    assert act.send_preamble == 1


def test_trmac_data_failure_backs_off(scripted_rng):
    s = _state(pr.IDLE, [_pkt()])
    s, _ = pr.trmac_step(s, pr.SlotInputs(data_failed=True), TIMING, scripted_rng([0]), PARAMS)
    assert s.fsm == pr.Backoff(0, 1)


@pytest.mark.parametrize(
    "fsm, inputs",
    [
        (pr.PreambleSent(1), pr.SlotInputs(preamble_outcome=DecodeOutcome.decoded(2))),
        (pr.TxData(1, 2), pr.SlotInputs(ack_seen=True)),
        (pr.RxLocked(1, 2), pr.SlotInputs(preamble_outcome=DecodeOutcome.decoded(2))),
        (pr.TxData(1, 2), pr.SlotInputs(data_failed=True)),
    ],
)
def test_trmac_rejects_impossible_inputs(fsm, inputs, rng):
    with pytest.raises(pr.ProtocolError):
        pr.trmac_step(_state(fsm, [_pkt()]), inputs, TIMING, rng, PARAMS)


def test_step_functions_do_not_mutate_state(rng):
    s = _state(queue=[_pkt()])
    before = tuple(s)
    pr.trmac_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
    assert tuple(s) == before


# --- BRS ----------------------------------------------------------------------------------


def test_brs_sends_preamble_then_data(rng):
    s = _state(queue=[_pkt()])
    acts = []
    for _ in range(4):
        s, a = pr.brs_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
        acts.append(a.describe())
    assert acts == ["preamble:1", "data:1", "data:1", "data:1+deliver"]


def test_brs_carrier_sense_and_nack(scripted_rng):
    s = _state(queue=[_pkt()])
    s2, a = pr.brs_step(s, pr.SlotInputs(carrier_busy=True), TIMING, scripted_rng([]), PARAMS)
    assert not a.uses_medium
    s, _ = pr.brs_step(s, pr.NO_INPUT, TIMING, scripted_rng([]), PARAMS)
    s, a = pr.brs_step(s, pr.SlotInputs(nack=True), TIMING, scripted_rng([2]), PARAMS)
    assert s.fsm == pr.Backoff(2, 1) and not a.uses_medium
    with pytest.raises(pr.ProtocolError):
        pr.brs_step(_state(queue=[_pkt()]), pr.SlotInputs(nack=True), TIMING, scripted_rng([]), PARAMS)


# --- token --------------------------------------------------------------------------------


def test_token_holder_sends_and_passes(rng):
    s = _state(pr.TOKEN_WAITING, [_pkt()])
    s, a = pr.token_step(s, pr.NO_INPUT, TIMING, rng, PARAMS)
    assert a == pr.NO_ACTION
    s, a = pr.token_step(s, pr.SlotInputs(token_here=True), TIMING, rng, PARAMS)
    assert a.send_preamble == 1 and s.fsm == pr.TokenHolding(1, 3)
    for _ in range(2):
        s, a = pr.token_step(s, pr.SlotInputs(token_here=True), TIMING, rng, PARAMS)
        assert a.send_data == 1 and not a.pass_token
    s, a = pr.token_step(s, pr.SlotInputs(token_here=True), TIMING, rng, PARAMS)
    assert a.pass_token and a.deliver and s.fsm == pr.TOKEN_WAITING


def test_token_empty_queue_passes_immediately(rng):
    s, a = pr.token_step(_state(pr.TOKEN_WAITING), pr.SlotInputs(token_here=True), TIMING, rng, PARAMS)
    assert a == pr.SlotActions(pass_token=True)


# --- sectors ----------------------------------------------------------------------------------


@given(st.integers(1, 300), st.data())
def test_sectors_partition_nodes(n, data):
    f = data.draw(st.integers(1, n))
    chans = [pr.channel_of(i, n, f) for i in range(n)]
    assert chans == sorted(chans)
    assert set(chans) <= set(range(f))
    assert max(chans.count(c) for c in set(chans)) <= pr.sector_size(n, f)


def test_initial_fsm():
    assert pr.initial_fsm("token") == pr.TOKEN_WAITING
    assert pr.initial_fsm("trmac") == pr.IDLE
    with pytest.raises(ValueError):
        pr.initial_fsm("aloha")
