"""Per-node MAC state machines behind one step contract.

A step function receives the node's state at the start of a slot and what
the engine observed during the previous slot. It returns the node's state at
the end of the slot and what it puts on the medium during the slot. Steps
never mutate anything: the queue is read-only here and the engine pops the
head packet when a step reports ``deliver``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .phy import DecodeOutcome

PROTOCOLS = ("trmac", "brs", "token")


class ProtocolError(RuntimeError):
    """Raised when a step receives a state/input combination the engine must never produce."""


class _PacketBase(NamedTuple):
    id: int
    src: int
    dst: int
    created_cycle: int
    size_bits: int = 80
    preamble_bits: int = 20


class Packet(_PacketBase):
    __slots__ = ()

    def __new__(cls, id, src, dst, created_cycle, size_bits=80, preamble_bits=20):
        if src == dst:
            raise ValueError(f"packet {id}: src == dst == {src}")
        if not 0 < preamble_bits < size_bits:
            raise ValueError(f"packet {id}: preamble_bits must be in (0, size_bits)")
        return super().__new__(cls, id, src, dst, created_cycle, size_bits, preamble_bits)


@dataclass(frozen=True)
class TimingPlan:
    preamble_cycles: int = 1
    ack_cycles: int = 1
    data_cycles: int = 3

    def __post_init__(self):
        for name in ("preamble_cycles", "ack_cycles", "data_cycles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_bits(
        cls,
        packet_bits: int = 80,
        preamble_bits: int = 20,
        datarate_gbps: float = 20.0,
        clock_ghz: float = 1.0,
    ) -> "TimingPlan":
        if not 0 < preamble_bits < packet_bits:
            raise ValueError("preamble_bits must be in (0, packet_bits)")
        if datarate_gbps <= 0 or clock_ghz <= 0:
            raise ValueError("datarate and clock must be positive")
        # exact rational arithmetic so 20/1 bits per cycle never rounds up by accident
        per_cycle = Fraction(str(datarate_gbps)) / Fraction(str(clock_ghz))
        return cls(
            preamble_cycles=math.ceil(preamble_bits / per_cycle),
            ack_cycles=1,
            data_cycles=math.ceil((packet_bits - preamble_bits) / per_cycle),
        )

    @property
    def total(self) -> int:
        """Cycles of one contention-free TRMAC exchange (N + 2 for 1-cycle preambles)."""
        return self.preamble_cycles + self.ack_cycles + self.data_cycles

    @property
    def packet_cycles(self) -> int:
        """Cycles a preamble+data transmission occupies without a handshake (BRS, token)."""
        return self.preamble_cycles + self.data_cycles


@dataclass(frozen=True)
class BackoffParams:
    initial_window: int = 2
    max_exponent: int = 10
    cap: Optional[int] = None

    def __post_init__(self):
        if self.initial_window < 1:
            raise ValueError("initial_window must be >= 1")
        if self.max_exponent < 0:
            raise ValueError("max_exponent must be >= 0")
        if self.cap is not None and self.cap < 1:
            raise ValueError("cap must be >= 1")

    def window(self, k: int) -> int:
        w = self.initial_window * (1 << min(max(k, 0), self.max_exponent))
        return w if self.cap is None else min(w, self.cap)


def next_backoff(attempt_count: int, params: BackoffParams, rng: np.random.Generator) -> int:
    """Uniform slot count in [0, window(attempt_count - 1))."""
    if attempt_count < 1:
        raise ValueError("attempt_count must be >= 1")
    return int(rng.integers(params.window(attempt_count - 1)))


@dataclass(frozen=True)
class MacParams:
    npt: int = 1
    backoff: BackoffParams = BackoffParams()

    def __post_init__(self):
        if self.npt < 1:
            raise ValueError("npt must be >= 1")


# --- FSM states -----------------------------------------------------------------


class Idle(NamedTuple):
    pass


class PreambleSent(NamedTuple):
    dst: int
    remaining: int = 0  # preamble slots still to send after this one


class AwaitAck(NamedTuple):
    dst: int


class TxData(NamedTuple):
    dst: int
    remaining: int  # data slots still to send after this one


class RxLocked(NamedTuple):
    src: int
    remaining: int  # data slots still to absorb after this one
    resume: Optional["Backoff"] = None


class Backoff(NamedTuple):
    remaining: int
    attempt: int


class TokenWaiting(NamedTuple):
    pass


class TokenHolding(NamedTuple):
    dst: int
    remaining: int


IDLE = Idle()
TOKEN_WAITING = TokenWaiting()


class NodeState(NamedTuple):
    node: int
    fsm: tuple = IDLE
    queue: Sequence[Packet] = ()
    channel_id: int = 0
    attempt_count: int = 0


class SlotInputs(NamedTuple):
    tone_active: bool = False
    tone_count: int = 0
    preamble_outcome: Optional[DecodeOutcome] = None
    ack_seen: bool = False
    token_here: bool = False
    carrier_busy: bool = False
    nack: bool = False
    data_failed: bool = False


class SlotActions(NamedTuple):
    send_preamble: Optional[int] = None
    send_ack: Optional[int] = None
    send_data: Optional[int] = None
    assert_tone: bool = False
    pass_token: bool = False
    deliver: bool = False  # the head packet completes at the end of this slot

    @property
    def uses_medium(self) -> bool:
        return self.send_preamble is not None or self.send_ack is not None or self.send_data is not None

    def describe(self) -> str:
        parts = []
        if self.send_preamble is not None:
            parts.append(f"preamble:{self.send_preamble}")
        if self.send_ack is not None:
            parts.append(f"ack:{self.send_ack}")
        if self.send_data is not None:
            parts.append(f"data:{self.send_data}")
        if self.assert_tone:
            parts.append("tone")
        if self.pass_token:
            parts.append("pass_token")
        if self.deliver:
            parts.append("deliver")
        return "+".join(parts) or "none"


NO_INPUT = SlotInputs()
NO_ACTION = SlotActions()


def describe_state(fsm) -> str:
    name = type(fsm).__name__
    if not fsm:
        return name
    fields = ",".join(str(v) if not isinstance(v, tuple) else describe_state(v) for v in fsm)
    return f"{name}({fields})"


def _require(cond: bool, state: NodeState, inputs: SlotInputs, what: str) -> None:
    if not cond:
        raise ProtocolError(f"node {state.node} in {describe_state(state.fsm)}: {what} (inputs={inputs})")


def _enter_backoff(state: NodeState, params: MacParams, rng) -> NodeState:
    attempt = state.attempt_count + 1
    return state._replace(fsm=Backoff(next_backoff(attempt, params.backoff, rng), attempt), attempt_count=attempt)


def _start_data(state: NodeState, dst: int, timing: TimingPlan, tone: bool) -> Tuple[NodeState, SlotActions]:
    rem = timing.data_cycles - 1
    if rem == 0:
        return state._replace(fsm=IDLE), SlotActions(send_data=dst, assert_tone=tone, deliver=True)
    return state._replace(fsm=TxData(dst, rem)), SlotActions(send_data=dst, assert_tone=tone)


def _continue_data(state: NodeState, fsm: TxData, tone: bool) -> Tuple[NodeState, SlotActions]:
    rem = fsm.remaining - 1
    if rem == 0:
        return state._replace(fsm=IDLE), SlotActions(send_data=fsm.dst, assert_tone=tone, deliver=True)
    return state._replace(fsm=TxData(fsm.dst, rem)), SlotActions(send_data=fsm.dst, assert_tone=tone)


def _send_preamble(state: NodeState, timing: TimingPlan) -> Tuple[NodeState, SlotActions]:
    dst = state.queue[0].dst
    return state._replace(fsm=PreambleSent(dst, timing.preamble_cycles - 1)), SlotActions(send_preamble=dst)


# --- TRMAC ------------------------------------------------------------------------


def trmac_step(
    state: NodeState, inputs: SlotInputs, timing: TimingPlan, rng: np.random.Generator, params: MacParams
) -> Tuple[NodeState, SlotActions]:
    """Three-phase TRMAC: preamble, one-slot ACK wait, tone-protected data."""
    fsm = state.fsm
    kind = type(fsm)
    outcome = inputs.preamble_outcome
    if kind is not Idle and kind is not Backoff and kind is not RxLocked:
        _require(outcome is None, state, inputs, "a transmitting node cannot decode preambles")
    _require(not inputs.ack_seen or kind is AwaitAck, state, inputs, "ack_seen outside the ACK wait")
    _require(not inputs.data_failed or kind is Idle, state, inputs, "data_failed while not finishing data")

    if kind is PreambleSent:
        if fsm.remaining > 0:
            return state._replace(fsm=PreambleSent(fsm.dst, fsm.remaining - 1)), SlotActions(send_preamble=fsm.dst)
        return state._replace(fsm=AwaitAck(fsm.dst)), NO_ACTION

    if kind is AwaitAck:
        if inputs.ack_seen:
            return _start_data(state._replace(attempt_count=0), fsm.dst, timing, tone=True)
        return _enter_backoff(state, params, rng), NO_ACTION

    if kind is TxData:
        return _continue_data(state, fsm, tone=True)

    if kind is RxLocked:
        if fsm.remaining > 0:
            _require(outcome is None, state, inputs, "a locked receiver cannot decode preambles")
            return state._replace(fsm=RxLocked(fsm.src, fsm.remaining - 1, fsm.resume)), NO_ACTION
        _require(outcome is None, state, inputs, "a locked receiver cannot decode preambles")
        state = state._replace(fsm=fsm.resume if fsm.resume is not None else IDLE)
        fsm = state.fsm
        kind = type(fsm)

    if inputs.data_failed:
        return _enter_backoff(state, params, rng), NO_ACTION

    # listening: a decoded or garbled preamble is answered before anything else
    if outcome is not None and outcome.kind != "silence":
        resume = fsm if kind is Backoff and fsm.remaining > 0 else None
        return (
            state._replace(fsm=RxLocked(outcome.address, timing.data_cycles, resume)),
            SlotActions(send_ack=outcome.address),
        )

    if kind is Backoff and fsm.remaining > 0:
        return state._replace(fsm=Backoff(fsm.remaining - 1, fsm.attempt)), NO_ACTION

    if not state.queue:
        return state._replace(fsm=IDLE), NO_ACTION
    if inputs.tone_count >= params.npt:
        return state._replace(fsm=IDLE), NO_ACTION
    return _send_preamble(state, timing)


# --- BRS --------------------------------------------------------------------------


def brs_step(
    state: NodeState, inputs: SlotInputs, timing: TimingPlan, rng: np.random.Generator, params: MacParams
) -> Tuple[NodeState, SlotActions]:
    """Carrier-sense preamble+data with NACK on same-slot collisions."""
    fsm = state.fsm
    kind = type(fsm)
    _require(not inputs.nack or kind is PreambleSent, state, inputs, "NACK for a node that sent no preamble")

    if kind is PreambleSent:
        if inputs.nack:
            return _enter_backoff(state, params, rng), NO_ACTION
        if fsm.remaining > 0:
            return state._replace(fsm=PreambleSent(fsm.dst, fsm.remaining - 1)), SlotActions(send_preamble=fsm.dst)
        return _start_data(state._replace(attempt_count=0), fsm.dst, timing, tone=False)

    if kind is TxData:
        return _continue_data(state, fsm, tone=False)

    if kind is Backoff and fsm.remaining > 0:
        return state._replace(fsm=Backoff(fsm.remaining - 1, fsm.attempt)), NO_ACTION

    if not state.queue or inputs.carrier_busy:
        return state._replace(fsm=IDLE), NO_ACTION
    return _send_preamble(state, timing)


# --- token passing ------------------------------------------------------------------


def token_step(
    state: NodeState, inputs: SlotInputs, timing: TimingPlan, rng: np.random.Generator, params: MacParams
) -> Tuple[NodeState, SlotActions]:
    """Virtual-ring token passing; only the holder may use the medium."""
    fsm = state.fsm
    kind = type(fsm)
    if kind is TokenHolding:
        _require(inputs.token_here, state, inputs, "holding without the token")
        rem = fsm.remaining - 1
        if rem == 0:
            return state._replace(fsm=TOKEN_WAITING), SlotActions(send_data=fsm.dst, pass_token=True, deliver=True)
        return state._replace(fsm=TokenHolding(fsm.dst, rem)), SlotActions(send_data=fsm.dst)

    _require(kind is TokenWaiting, state, inputs, "unexpected token-protocol state")
    if not inputs.token_here:
        return state, NO_ACTION
    if not state.queue:
        return state, SlotActions(pass_token=True)
    dst = state.queue[0].dst
    rem = timing.packet_cycles - 1
    if rem == 0:
        return state, SlotActions(send_preamble=dst, pass_token=True, deliver=True)
    return state._replace(fsm=TokenHolding(dst, rem)), SlotActions(send_preamble=dst)


STEP_FUNCTIONS = {"trmac": trmac_step, "brs": brs_step, "token": token_step}


def initial_fsm(protocol: str):
    if protocol not in STEP_FUNCTIONS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    return TOKEN_WAITING if protocol == "token" else IDLE


def sector_size(n_nodes: int, n_channels: int) -> int:
    if not 1 <= n_channels <= n_nodes:
        raise ValueError("n_channels must be in [1, n_nodes]")
    return math.ceil(n_nodes / n_channels)


def channel_of(node: int, n_nodes: int, n_channels: int) -> int:
    """Frequency sector of ``node``: consecutive ids share a channel."""
    return node // sector_size(n_nodes, n_channels)
