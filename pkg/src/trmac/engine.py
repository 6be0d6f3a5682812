"""Slotted simulation core.

One slot is one clock cycle. Within a slot every node first proposes its
actions from the inputs observed in the previous slot, then the medium is
resolved per frequency channel, then the new states are committed. Tone
assertions made in slot t are visible to everyone in slot t+1.
"""

from __future__ import annotations

import collections
import dataclasses
import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, TextIO, Tuple

import numpy as np

from . import channel as ch
from . import phy
from .protocols import (
    IDLE,
    PROTOCOLS,
    AwaitAck,
    Backoff,
    BackoffParams,
    Idle,
    MacParams,
    NodeState,
    PreambleSent,
    ProtocolError,
    RxLocked,
    SlotActions,
    SlotInputs,
    TimingPlan,
    TokenHolding,
    TxData,
    brs_step,
    describe_state,
    initial_fsm,
    sector_size,
    token_step,
    trmac_step,
)
from .traffic import TrafficConfig, TrafficGenerator

PHY_MODES = ("capacity", "energy")
COLLISION_CATEGORIES = (
    "preamble_collision",
    "deafness",
    "false_positive_ack",
    "cci",
    "data_failure",
)
SWEEP_AXES = ("injection_rate", "sigma", "hurst", "n_nodes", "npt", "f_n")


class SimulationInvariantError(RuntimeError):
    """A medium or conservation invariant broke; carries the tail of the slot trace."""

    def __init__(self, message: str, trace_tail: Sequence[str] = ()):
        tail = "\n".join(trace_tail)
        super().__init__(f"{message}\nrecent trace:\n{tail}" if tail else message)
        self.trace_tail = list(trace_tail)


# --- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class TimingConfig:
    packet_bits: int = 80
    preamble_bits: int = 20
    datarate_gbps: float = 20.0
    clock_ghz: float = 1.0

    def plan(self) -> TimingPlan:
        return TimingPlan.from_bits(self.packet_bits, self.preamble_bits, self.datarate_gbps, self.clock_ghz)


@dataclass(frozen=True)
class RadioConfig:
    data_center_ghz: float = 140.0
    data_bandwidth_ghz: float = 20.0
    tone_center_ghz: float = 170.0
    tone_bandwidth_ghz: float = 1.0
    tone_power_mw: float = 2.0

    def __post_init__(self):
        if self.data_bandwidth_ghz <= 0 or self.tone_bandwidth_ghz <= 0:
            raise ValueError("bandwidths must be positive")
        if self.tone_power_mw < 0:
            raise ValueError("tone_power_mw must be >= 0")
        d_lo = self.data_center_ghz - self.data_bandwidth_ghz / 2
        d_hi = self.data_center_ghz + self.data_bandwidth_ghz / 2
        t_lo = self.tone_center_ghz - self.tone_bandwidth_ghz / 2
        t_hi = self.tone_center_ghz + self.tone_bandwidth_ghz / 2
        if not (d_hi <= t_lo or t_hi <= d_lo):
            raise ValueError("data and tone bands overlap")


@dataclass(frozen=True)
class ChannelConfig:
    file: Optional[str] = None
    seed: int = 0
    mean_tap_count: float = ch.CirParams.mean_tap_count
    decay_constant: float = ch.CirParams.decay_constant
    los_excess_gain: float = ch.CirParams.los_excess_gain
    rician_k: float = ch.CirParams.rician_k
    sample_period: float = 1.0
    chiplet_mm: float = 5.0
    detection: str = "peak"
    max_taps: Optional[int] = None
    amplitude_bits: Optional[int] = None

    def params(self) -> ch.CirParams:
        return ch.CirParams(self.mean_tap_count, self.decay_constant, self.los_excess_gain, self.rician_k)


@dataclass(frozen=True)
class PhyConfig:
    mode: str = "capacity"
    ber_limit: float = phy.DEFAULT_BER_LIMIT
    noise_energy: float = phy.DEFAULT_NOISE_ENERGY
    variance_scale: float = phy.DEFAULT_VARIANCE_SCALE
    p_garble: float = 1.0
    npt_mode: Optional[str] = None
    n_samples: int = 2000
    percentile: float = 99.0

    def __post_init__(self):
        if self.mode not in PHY_MODES:
            raise ValueError(f"phy mode must be one of {PHY_MODES}")


@dataclass(frozen=True)
class SimConfig:
    n_nodes: int = 64
    protocol: str = "trmac"
    n_freq_channels: int = 1
    npt: Optional[int] = 3  # None derives it from the channel
    timing: TimingConfig = TimingConfig()
    radio: RadioConfig = RadioConfig()
    traffic: TrafficConfig = TrafficConfig()
    channel: ChannelConfig = ChannelConfig()
    phy: PhyConfig = PhyConfig()
    backoff: BackoffParams = BackoffParams()
    max_cycles: int = 10_000
    warmup_cycles: int = 1_000
    seed: int = 0
    drain: bool = False
    drain_limit: int = 1_000_000

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be >= 2")
        if not 1 <= self.n_freq_channels <= self.n_nodes:
            raise ValueError("n_freq_channels must be in [1, n_nodes]")
        if self.npt is not None and not 1 <= self.npt <= max(1, self.n_nodes // 2):
            raise ValueError(f"npt must be in [1, {self.n_nodes // 2}]")
        if not 0 <= self.warmup_cycles < self.max_cycles:
            raise ValueError("need 0 <= warmup_cycles < max_cycles")
        if self.traffic.n_nodes != self.n_nodes:
            object.__setattr__(self, "traffic", dataclasses.replace(self.traffic, n_nodes=self.n_nodes))

    @property
    def sector_size(self) -> int:
        return sector_size(self.n_nodes, self.n_freq_channels)

    def channel_of(self, node: int) -> int:
        return node // self.sector_size

    def with_value(self, axis: str, value) -> "SimConfig":
        """Copy with one sweep axis set."""
        if axis in ("injection_rate", "sigma", "hurst"):
            return dataclasses.replace(self, traffic=dataclasses.replace(self.traffic, **{axis: value}))
        if axis == "n_nodes":
            return dataclasses.replace(self, n_nodes=int(value))
        if axis == "npt":
            return dataclasses.replace(self, npt=int(value))
        if axis == "f_n":
            return dataclasses.replace(self, n_freq_channels=int(value))
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


# --- results ----------------------------------------------------------------------


class DeliveryRecord(NamedTuple):
    packet_id: int
    src: int
    dst: int
    created_cycle: int
    delivered_cycle: int
    retries: int


@dataclass
class SimResult:
    config: SimConfig
    npt: int
    delivered: List[DeliveryRecord]
    occupancy: np.ndarray  # (cycles, channels) data senders per slot
    collisions: Dict[str, int]
    injected: int
    injected_after_warmup: int
    final_queue_depths: np.ndarray
    in_flight: int
    cycles: int

    @property
    def delivered_count(self) -> int:
        return len(self.delivered)

    def delivery_arrays(self) -> Dict[str, np.ndarray]:
        if not self.delivered:
            return {f: np.zeros(0, dtype=np.int64) for f in DeliveryRecord._fields}
        arr = np.array(self.delivered, dtype=np.int64)
        return {f: arr[:, i] for i, f in enumerate(DeliveryRecord._fields)}


@dataclass(frozen=True)
class SlotRecord:
    """What one slot looked like; handed to an optional observer."""

    cycle: int
    start: Tuple[tuple, ...]
    end: Tuple[tuple, ...]
    actions: Dict[int, SlotActions]
    inputs: Dict[int, SlotInputs]
    tone_counts: Tuple[int, ...]
    token_holders: Tuple[int, ...]


# --- channel and phy (cached: static for a given config) ----------------------------------


@functools.lru_cache(maxsize=8)
def build_channel(n_nodes: int, cfg: ChannelConfig) -> ch.TrFilterBank:
    if cfg.file is not None:
        with open(cfg.file, "rb") as fh:
            cirs = ch.load_cir_matrix(fh)
        if cirs.n_nodes != n_nodes:
            raise ValueError(f"CIR file has {cirs.n_nodes} nodes but the simulation has {n_nodes}")
    else:
        geometry = ch.grid_geometry(n_nodes, chiplet_mm=cfg.chiplet_mm)
        cirs = ch.synthesize_cir(geometry, cfg.params(), seed=cfg.seed, sample_period=cfg.sample_period)
    return ch.build_tr_filter_bank(cirs, cfg.max_taps, cfg.amplitude_bits, detection=cfg.detection)


@functools.lru_cache(maxsize=8)
def build_profile(n_nodes: int, channel_cfg: ChannelConfig, phy_cfg: PhyConfig) -> phy.PhyProfile:
    bank = build_channel(n_nodes, channel_cfg)
    return phy.derive_profile(
        bank,
        phy.NoiseModel(phy_cfg.noise_energy),
        phy_cfg.ber_limit,
        variance_scale=phy_cfg.variance_scale,
        p_garble=phy_cfg.p_garble,
        npt_mode=phy_cfg.npt_mode,
        n_samples=phy_cfg.n_samples,
        percentile=phy_cfg.percentile,
        seed=channel_cfg.seed,
    )


def _profile_for(cfg: SimConfig):
    """(bank or None, profile, npt) for a run."""
    needs_channel = cfg.protocol == "trmac" and (cfg.phy.mode == "energy" or cfg.npt is None)
    if not needs_channel:
        npt = cfg.npt if cfg.npt is not None else 1
        return None, None, npt
    bank = build_channel(cfg.n_nodes, cfg.channel)
    profile = build_profile(cfg.n_nodes, cfg.channel, cfg.phy)
    npt = cfg.npt if cfg.npt is not None else profile.npt
    if npt != profile.npt:
        profile = dataclasses.replace(profile, npt=npt)
    return bank, profile, npt


def _ideal_profile(cfg: SimConfig, npt: int) -> phy.PhyProfile:
    n = cfg.n_nodes
    thr = phy.Thresholds(
        np.where(np.eye(n, dtype=bool), np.nan, 0.5),
        ~np.eye(n, dtype=bool),
        np.ones((n, n)),
        np.zeros(n),
        0.0,
    )
    return phy.PhyProfile(thr, cfg.phy.ber_limit, npt, phy.NoiseModel(0.0), cfg.phy.variance_scale, cfg.phy.p_garble)


# --- the simulation -----------------------------------------------------------------


class _Tracer:
    """Keeps the last few slot lines for diagnostics and optionally streams every line."""

    def __init__(self, stream: Optional[TextIO], keep: int = 64):
        self.stream = stream
        self._tail = collections.deque(maxlen=keep)

    def line(self, cycle: int, node: int, fsm, action: SlotActions) -> None:
        self._tail.append((cycle, node, fsm, action))
        if self.stream is not None:
            self.stream.write(format_trace_line(cycle, node, fsm, action) + "\n")

    @property
    def tail(self) -> List[str]:
        return [format_trace_line(*row) for row in self._tail]


def format_trace_line(cycle: int, node: int, fsm, action: SlotActions) -> str:
    return f"{cycle} {node} {describe_state(fsm)} {action.describe()}"


def _seeds(cfg: SimConfig):
    # traffic and MAC draws come from independent streams of the run seed
    return np.random.SeedSequence(cfg.seed).spawn(2)


def default_arrivals(cfg: SimConfig) -> TrafficGenerator:
    """The traffic generator a run of ``cfg`` uses when no arrivals are given."""
    seed = int(_seeds(cfg)[0].generate_state(1)[0])
    return TrafficGenerator(dataclasses.replace(cfg.traffic, n_nodes=cfg.n_nodes, seed=seed))


class Simulation:
    """One run; use :func:`run_simulation` unless you need to drive it slot by slot."""

    def __init__(
        self,
        cfg: SimConfig,
        arrivals=None,
        trace: Optional[TextIO] = None,
        observer: Optional[Callable[[SlotRecord], None]] = None,
        bank: Optional[ch.TrFilterBank] = None,
        profile: Optional[phy.PhyProfile] = None,
        mac_rng=None,
    ):
        self.cfg = cfg
        if bank is not None or profile is not None:
            if profile is None:
                profile = phy.derive_profile(
                    bank, phy.NoiseModel(cfg.phy.noise_energy), cfg.phy.ber_limit,
                    npt=cfg.npt, variance_scale=cfg.phy.variance_scale, p_garble=cfg.phy.p_garble,
                )
            self.bank, self.profile, self.npt = bank, profile, cfg.npt if cfg.npt is not None else profile.npt
        else:
            self.bank, self.profile, self.npt = _profile_for(cfg)
        if self.profile is None:
            self.profile = _ideal_profile(cfg, self.npt)
        if cfg.phy.mode == "energy" and cfg.protocol == "trmac" and self.bank is None:
            raise ValueError("energy phy mode needs a channel")
        self.energy = cfg.phy.mode == "energy" and cfg.protocol == "trmac"
        self.timing = cfg.timing.plan()
        self.mac = MacParams(self.npt, cfg.backoff)
        if arrivals is None:
            arrivals = default_arrivals(cfg)
        self.source = arrivals
        self.rng = mac_rng if mac_rng is not None else np.random.default_rng(_seeds(cfg)[1])
        self.tracer = _Tracer(trace)
        self.observer = observer

        n = cfg.n_nodes
        self.n_channels = cfg.n_freq_channels
        self.chan = [cfg.channel_of(i) for i in range(n)]
        self.members = [[i for i in range(n) if self.chan[i] == c] for c in range(self.n_channels)]
        self.queues = [collections.deque() for _ in range(n)]
        fsm0 = initial_fsm(cfg.protocol)
        self.states = [NodeState(i, fsm0, self.queues[i], self.chan[i], 0) for i in range(n)]
        self.retries = [0] * n
        self.delivered: List[DeliveryRecord] = []
        self.collisions = {k: 0 for k in COLLISION_CATEGORIES}
        self.injected = 0
        self.injected_after_warmup = 0
        self.occupancy = []
        self.cycle = 0
        # inputs carried from the previous slot
        self.outcomes: Dict[int, phy.DecodeOutcome] = {}
        self.acks_seen = set()
        self.failed = set()
        self.nacks = set()
        self.nack_channels = set()
        self.tone = [0] * self.n_channels
        self.corrupted = set()
        # token rings
        size = cfg.sector_size
        self.rings = [list(range(c * size, min(n, (c + 1) * size))) for c in range(self.n_channels)]
        self.rings = [r for r in self.rings if r]
        self.token_pos = [0] * len(self.rings)

    # -- helpers --------------------------------------------------------------------

    def _fail(self, message: str):
        raise SimulationInvariantError(f"cycle {self.cycle}: {message}", list(self.tracer.tail))

    def _inject(self, injecting: bool) -> None:
        if not injecting:
            return
        for p in self.source.arrivals(self.cycle):
            if not (0 <= p.src < self.cfg.n_nodes and 0 <= p.dst < self.cfg.n_nodes):
                self._fail(f"packet {p.id} has endpoints outside the network")
            self.queues[p.src].append(p)
            self.injected += 1
            if p.created_cycle >= self.cfg.warmup_cycles:
                self.injected_after_warmup += 1

    def _deliver(self, node: int) -> None:
        p = self.queues[node].popleft()
        self.delivered.append(DeliveryRecord(p.id, p.src, p.dst, p.created_cycle, self.cycle + 1, self.retries[node]))
        self.retries[node] = 0

    def _note_backoff(self, old: NodeState, new: NodeState) -> None:
        if new.attempt_count > old.attempt_count:
            self.retries[old.node] += 1

    # -- per-protocol slots ----------------------------------------------------------------

    def _slot_trmac(self, record: bool):
        states, queues, rng, timing, mac = self.states, self.queues, self.rng, self.timing, self.mac
        n = self.cfg.n_nodes
        outcomes, acks_seen, failed = self.outcomes, self.acks_seen, self.failed
        tone = self.tone
        actions: Dict[int, SlotActions] = {}
        inputs_log: Dict[int, SlotInputs] = {}
        waiters = [[] for _ in range(self.n_channels)]
        start = tuple(s.fsm for s in states) if record else ()
        for i in range(n):
            st = states[i]
            if st.fsm is IDLE and not queues[i] and i not in outcomes and i not in failed:
                continue
            tc = tone[self.chan[i]]
            inp = SlotInputs(tc > 0, tc, outcomes.get(i), i in acks_seen, False, False, False, i in failed)
            new, act = trmac_step(st, inp, timing, rng, mac)
            self._note_backoff(st, new)
            states[i] = new
            if record:
                inputs_log[i] = inp
            if type(new.fsm) is AwaitAck:
                waiters[self.chan[i]].append(i)
            if act.send_data is not None and type(st.fsm) is AwaitAck:
                self.corrupted.discard(i)
            if act.uses_medium or act.deliver or act.assert_tone:
                actions[i] = act
            if act.uses_medium or new.fsm is not IDLE or act.deliver:
                self.tracer.line(self.cycle, i, new.fsm, act)

        # medium resolution per channel
        pre = [[] for _ in range(self.n_channels)]
        ack = [[] for _ in range(self.n_channels)]
        data = [[] for _ in range(self.n_channels)]
        tones = [0] * self.n_channels
        transmitting = set()
        for i, a in actions.items():
            c = self.chan[i]
            if a.send_preamble is not None:
                pre[c].append((i, a.send_preamble))
                transmitting.add(i)
            if a.send_ack is not None:
                ack[self.chan[a.send_ack]].append((i, a.send_ack))
                transmitting.add(i)
            if a.send_data is not None:
                data[c].append((i, a.send_data))
                transmitting.add(i)
            if a.assert_tone:
                tones[c] += 1

        new_outcomes: Dict[int, phy.DecodeOutcome] = {}
        new_acks = set()
        new_failed = set()
        profile = self.profile
        bank = self.bank if self.energy else None
        for c in range(self.n_channels):
            if self.energy is False and len(data[c]) > self.npt:
                self._fail(f"channel {c}: {len(data[c])} concurrent data links exceed npt={self.npt}")
            background = ack[c] + data[c]
            by_dst: Dict[int, List[Tuple[int, int]]] = {}
            for s, d in pre[c]:
                by_dst.setdefault(d, []).append((s, d))
            contending = []
            for d in sorted(by_dst):
                if d not in transmitting and type(states[d].fsm) in (Idle, Backoff):
                    contending.append(d)
                else:
                    self.collisions["deafness"] += len(by_dst[d])
            admitted = self._admit(contending, len(background))
            for d in contending:
                arriving = by_dst[d]
                out = phy.resolve_preamble(
                    d, pre[c], bank, profile, rng, background, d not in admitted, n, self.members[c]
                )
                if len(arriving) >= 2:
                    self.collisions["preamble_collision"] += 1
                elif out.is_silence:
                    self.collisions["cci"] += 1
                if not out.is_silence:
                    new_outcomes[d] = out
            if bank is not None and pre[c]:
                self._leak_garbles(c, pre[c], background, by_dst, transmitting, new_outcomes)
            # ACK detection for waiters on this channel
            for i in waiters[c]:
                f = states[i].fsm
                seen = phy.ack_detected(i, ack[c], bank, profile, awaiting=f.dst)
                if seen:
                    new_acks.add(i)
                    if (f.dst, i) not in ack[c]:
                        self.collisions["false_positive_ack"] += 1
            # data integrity
            links = pre[c] + ack[c] + data[c]
            for s, d in data[c]:
                f = states[d].fsm
                ok = type(f) is RxLocked and f.src == s
                if ok and bank is not None:
                    others = [l for l in links if l != (s, d) and l[0] != d]
                    ber = phy.ber_from_energies(
                        bank.focused(s, d), phy.interference_at(bank, d, others),
                        profile.noise.noise_energy, profile.thresholds[(s, d)], profile.variance_scale,
                    )
                    ok = ber <= profile.ber_limit
                if not ok:
                    self.corrupted.add(s)

        for i, a in actions.items():
            if a.deliver:
                if i in self.corrupted:
                    self.corrupted.discard(i)
                    new_failed.add(i)
                    self.collisions["data_failure"] += 1
                else:
                    self._deliver(i)
        self.outcomes, self.acks_seen, self.failed = new_outcomes, new_acks, new_failed
        self.tone = tones
        self.occupancy.append([len(d) for d in data])
        if record:
            self._observe(start, actions, inputs_log, tuple(tones), ())

    def _admit(self, receivers: List[int], committed: int) -> set:
        """Receivers whose incoming preambles fit in the spare spatial capacity.

        Links already in the ACK or data phase keep their share.  When more
        receivers are contended for than the capacity left over, a random
        subset survives (capture) and the rest see only interference.
        """
        free = max(self.npt - committed, 0)
        if self.energy or len(receivers) <= free:
            return set(receivers)
        if free == 0:
            return set()
        picked = self.rng.choice(len(receivers), size=free, replace=False)
        return {receivers[int(k)] for k in picked}

    def _leak_garbles(self, c, pre, background, by_dst, transmitting, new_outcomes):
        """Listening nodes that nobody targets but whose observed preamble leakage clears a threshold."""
        links = pre
        e = self.bank.energy_matrix
        tx = np.array([l[0] for l in links])
        rx = np.array([l[1] for l in links])
        observed = e[tx, rx, :].sum(axis=0)
        observed[tx] -= e[tx, rx, tx]
        floor = np.nanmin(np.where(self.profile.thresholds.usable, self.profile.thresholds.values, np.inf), axis=0)
        for m in np.flatnonzero(observed >= floor):
            m = int(m)
            if m in by_dst or m in transmitting or self.chan[m] != c:
                continue
            if type(self.states[m].fsm) not in (Idle, Backoff):
                continue
            out = phy.resolve_preamble(m, pre, self.bank, self.profile, self.rng, background, False, pool=self.members[c])
            if not out.is_silence:
                new_outcomes[m] = out

    def _slot_brs(self, record: bool):
        states, queues, rng, timing, mac = self.states, self.queues, self.rng, self.timing, self.mac
        n = self.cfg.n_nodes
        busy = [c in self.nack_channels for c in range(self.n_channels)]
        for st in states:
            k = type(st.fsm)
            if k is PreambleSent or k is TxData:
                busy[st.channel_id] = True
        start = tuple(s.fsm for s in states) if record else ()
        actions: Dict[int, SlotActions] = {}
        inputs_log: Dict[int, SlotInputs] = {}
        nacks = self.nacks
        for i in range(n):
            st = states[i]
            if st.fsm is IDLE and not queues[i]:
                continue
            inp = SlotInputs(carrier_busy=busy[st.channel_id], nack=i in nacks)
            new, act = brs_step(st, inp, timing, rng, mac)
            self._note_backoff(st, new)
            states[i] = new
            if record:
                inputs_log[i] = inp
            if act.uses_medium or act.deliver:
                actions[i] = act
            if act.uses_medium or new.fsm is not IDLE or act.deliver:
                self.tracer.line(self.cycle, i, new.fsm, act)
        pre = [[] for _ in range(self.n_channels)]
        data = [0] * self.n_channels
        for i, a in actions.items():
            if a.send_preamble is not None:
                pre[self.chan[i]].append(i)
            if a.send_data is not None:
                data[self.chan[i]] += 1
        new_nacks, nack_channels = set(), set()
        for c in range(self.n_channels):
            if data[c] > 1 or (data[c] and pre[c]):
                self._fail(f"channel {c}: transmission started over an ongoing one")
            if len(pre[c]) >= 2:
                self.collisions["preamble_collision"] += 1
                new_nacks.update(pre[c])
                nack_channels.add(c)
        for i, a in actions.items():
            if a.deliver:
                self._deliver(i)
        self.nacks, self.nack_channels = new_nacks, nack_channels
        self.occupancy.append(data)
        if record:
            self._observe(start, actions, inputs_log, (0,) * self.n_channels, ())

    def _slot_token(self, record: bool):
        states, rng, timing, mac = self.states, self.rng, self.timing, self.mac
        start = tuple(s.fsm for s in states) if record else ()
        actions: Dict[int, SlotActions] = {}
        inputs_log: Dict[int, SlotInputs] = {}
        holders = []
        occ = [0] * self.n_channels
        for r, ring in enumerate(self.rings):
            holder = ring[self.token_pos[r]]
            holders.append(holder)
            st = states[holder]
            inp = SlotInputs(token_here=True)
            new, act = token_step(st, inp, timing, rng, mac)
            states[holder] = new
            if record:
                inputs_log[holder] = inp
            if act.uses_medium or act.deliver or act.pass_token:
                actions[holder] = act
            if act.uses_medium or type(new.fsm) is TokenHolding or act.deliver:
                self.tracer.line(self.cycle, holder, new.fsm, act)
            if act.uses_medium:
                occ[self.chan[holder]] += 1
            if act.deliver:
                self._deliver(holder)
            if act.pass_token:
                self.token_pos[r] = (self.token_pos[r] + 1) % len(ring)
        self.occupancy.append(occ)
        if record:
            self._observe(start, actions, inputs_log, (0,) * self.n_channels, tuple(holders))

    def _observe(self, start, actions, inputs_log, tones, holders):
        self.observer(
            SlotRecord(self.cycle, start, tuple(s.fsm for s in self.states), actions, inputs_log, tones, holders)
        )

    # -- driver ---------------------------------------------------------------------------

    def _quiet(self) -> bool:
        if any(self.queues):
            return False
        if self.cfg.protocol == "token":
            return True
        return all(type(s.fsm) is Idle for s in self.states) and not (self.outcomes or self.failed or self.nacks)

    def step(self, injecting: bool = True) -> None:
        self._inject(injecting)
        record = self.observer is not None
        proto = self.cfg.protocol
        if proto == "trmac":
            self._slot_trmac(record)
        elif proto == "brs":
            self._slot_brs(record)
        else:
            self._slot_token(record)
        self.cycle += 1

    def run(self) -> SimResult:
        cfg = self.cfg
        try:
            while self.cycle < cfg.max_cycles:
                self.step()
            if cfg.drain:
                limit = cfg.max_cycles + cfg.drain_limit
                while not self._quiet() and self.cycle < limit:
                    self.step(injecting=False)
        except ProtocolError as exc:
            raise SimulationInvariantError(f"cycle {self.cycle}: {exc}", list(self.tracer.tail)) from exc
        return self.result()

    def result(self) -> SimResult:
        depths = np.array([len(q) for q in self.queues], dtype=np.int64)
        in_flight = sum(
            1 for s in self.states if type(s.fsm) in (PreambleSent, AwaitAck, TxData, TokenHolding)
        )
        if self.injected != len(self.delivered) + int(depths.sum()):
            self._fail("packet conservation violated")
        occ = np.array(self.occupancy, dtype=np.int16).reshape(len(self.occupancy), self.n_channels)
        return SimResult(
            self.cfg, self.npt, list(self.delivered), occ, dict(self.collisions),
            self.injected, self.injected_after_warmup, depths, in_flight, self.cycle,
        )


def run_simulation(cfg: SimConfig, **kwargs) -> SimResult:
    """Run one simulation; keyword arguments go to :class:`Simulation`."""
    return Simulation(cfg, **kwargs).run()


# --- sweeps ---------------------------------------------------------------------------


@dataclass
class SweepCell:
    axis: str
    value: float
    repeat: int
    seed: int
    result: Optional[SimResult] = None
    error: Optional[str] = None


def _run_cell(args):
    base, axis, value, repeat = args
    seed = base.seed + repeat
    try:
        cfg = dataclasses.replace(base.with_value(axis, value), seed=seed)
        return SweepCell(axis, value, repeat, seed, run_simulation(cfg))
    except Exception as exc:  # a failed cell is reported, the sweep goes on
        return SweepCell(axis, value, repeat, seed, None, f"{type(exc).__name__}: {exc}")


def sweep_configs(base: SimConfig, axis: str, values: Sequence, repeats: int = 1):
    """Tasks ``(base, axis, value, repeat)``; each cell builds its own config so a bad value fails only that cell."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    return [(base, axis, value, r) for value in values for r in range(repeats)]


def run_sweep(base: SimConfig, axis: str, values: Sequence, repeats: int = 1, jobs: int = 1) -> List[SweepCell]:
    """Independent seeded runs for every (value, repeat); repeat r uses seed base.seed + r."""
    tasks = sweep_configs(base, axis, values, repeats)
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, tasks))


def tone_energy_overhead(radio: RadioConfig, timing: TimingPlan, packet_bits: int, clock_ghz: float = 1.0) -> float:
    """Tone energy per delivered bit in pJ: power (mW) x data-phase time (ns) / bits."""
    if packet_bits <= 0:
        raise ValueError("packet_bits must be positive")
    return radio.tone_power_mw * timing.data_cycles / clock_ghz / packet_bits
