"""Synthetic traffic: bursty (Pareto ON/OFF) arrivals with hotspotted endpoints.

Burstiness is set by the Hurst exponent H. Each node aggregates
``n_sources`` ON/OFF sources whose period lengths are Pareto with shape
alpha = 3 - 2H, so the superposition is asymptotically self-similar. Spatial
hotspotness is set by sigma through log-normal node weights, applied to
destinations, sources or both (``spatial_role``).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .protocols import Packet

SIGMA_MAPPINGS = ("dispersion", "grid")
SPATIAL_ROLES = ("destination", "source", "both")
# H = 1 would need alpha = 1 (infinite mean periods); the generator clamps to this.
MAX_EFFECTIVE_HURST = 0.975
#: returned by :func:`estimate_hurst` for a series with no variance
DEGENERATE = None


@dataclass(frozen=True)
class TrafficConfig:
    injection_rate: float = 0.01
    hurst: float = 1.0
    sigma: float = 0.5
    n_nodes: int = 64
    seed: int = 0
    n_sources: int = 16
    sigma_mapping: str = "dispersion"
    spatial_role: str = "source"
    packet_bits: int = 80
    preamble_bits: int = 20

    def __post_init__(self):
        if not (0.0 <= self.injection_rate <= 1.0):
            raise ValueError("injection_rate must be in [0, 1] packets/node/cycle")
        if not (0.5 <= self.hurst <= 1.0):
            raise ValueError("hurst must be in [0.5, 1]")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be >= 2")
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")
        if self.sigma_mapping not in SIGMA_MAPPINGS:
            raise ValueError(f"sigma_mapping must be one of {SIGMA_MAPPINGS}")
        if self.spatial_role not in SPATIAL_ROLES:
            raise ValueError(f"spatial_role must be one of {SPATIAL_ROLES}")

    @property
    def pareto_shape(self) -> float:
        return 3.0 - 2.0 * min(self.hurst, MAX_EFFECTIVE_HURST)

    @property
    def memoryless(self) -> bool:
        return self.hurst == 0.5


@dataclass(frozen=True)
class SpatialWeights:
    source: np.ndarray  # share of the offered load injected at each node, sum 1
    target: np.ndarray  # destination attractiveness, sum 1

    @property
    def n_nodes(self) -> int:
        return self.source.size

    @property
    def dest(self) -> np.ndarray:
        """dest[i, j]: probability that a packet from i goes to j."""
        return _dest_matrix(self.target)


def _normalize(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w / w.sum()


def _dest_matrix(w: np.ndarray) -> np.ndarray:
    d = np.tile(w, (w.size, 1))
    np.fill_diagonal(d, 0.0)
    return d / d.sum(axis=1, keepdims=True)


def build_spatial_weights(
    n_nodes: int,
    sigma: float,
    seed: int = 0,
    mapping: str = "dispersion",
    positions: Optional[np.ndarray] = None,
    role: str = "source",
) -> SpatialWeights:
    """Node weights w_i, used as destination weights (a packet from i picks
    j != i with probability proportional to w_j), as injection shares, or both.

    ``dispersion``: w_i proportional to exp(z_i), z_i ~ N(0, 1/sigma^2).
    ``grid``: a Gaussian bump of width sigma * (package size) around a
    randomly placed hotspot on the node layout.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if mapping not in SIGMA_MAPPINGS:
        raise ValueError(f"mapping must be one of {SIGMA_MAPPINGS}")
    if role not in SPATIAL_ROLES:
        raise ValueError(f"role must be one of {SPATIAL_ROLES}")
    rng = np.random.default_rng(seed)
    if mapping == "dispersion":
        z = rng.standard_normal(n_nodes) / sigma
        logw = z - z.max()
    else:
        if positions is None:
            from .channel import grid_geometry

            positions = grid_geometry(n_nodes).positions
        positions = np.asarray(positions, dtype=float)
        lo, hi = positions.min(axis=0), positions.max(axis=0)
        span = float(np.max(hi - lo)) or 1.0
        center = lo + rng.random(2) * (hi - lo)
        d2 = ((positions - center) ** 2).sum(axis=1)
        logw = -d2 / (2.0 * (sigma * span) ** 2)
        logw -= logw.max()
    w = _normalize(np.exp(logw))
    # extremely small sigma can underflow far nodes to zero; keep every weight positive
    w = _normalize(np.maximum(w, np.finfo(float).tiny))
    flat = np.full(n_nodes, 1.0 / n_nodes)
    return SpatialWeights(
        w if role != "destination" else flat,
        w if role != "source" else flat,
    )


def uniform_weights(n_nodes: int) -> SpatialWeights:
    w = np.full(n_nodes, 1.0 / n_nodes)
    return SpatialWeights(w, w.copy())


def gini(values: Sequence[float]) -> float:
    """Gini coefficient of non-negative values (0 = perfectly even)."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float((2.0 * np.sum(ranks * x) / (n * x.sum())) - (n + 1.0) / n)


class OnOffSources:
    """Per-node aggregate of independent Pareto ON/OFF sources.

    ON and OFF periods share one distribution, so every source is ON half
    of the time in the long run regardless of the heavy tail.
    """

    def __init__(self, n_nodes: int, n_sources: int, shape: float, rng: np.random.Generator, min_period: float = 1.0):
        self.n_nodes = n_nodes
        self.n_sources = n_sources
        self.shape = shape
        self.min_period = min_period
        self.rng = rng
        total = n_nodes * n_sources
        self.owner = np.repeat(np.arange(n_nodes), n_sources)
        self.on = rng.random(total) < 0.5
        # start in stationary-ish phase: residual of a fresh period
        self.remaining = np.ceil(self._draw(total) * rng.random(total)).astype(np.int64)
        self.remaining = np.maximum(self.remaining, 1)

    def _draw(self, k: int) -> np.ndarray:
        return self.min_period * (1.0 - self.rng.random(k)) ** (-1.0 / self.shape)

    @property
    def mean_period(self) -> float:
        return self.min_period * self.shape / (self.shape - 1.0)

    def block(self, length: int) -> np.ndarray:
        """Number of ON sources per node for the next ``length`` slots, shape (n_nodes, length)."""
        n_src = self.owner.size
        k = int(2 * length / self.mean_period) + 16
        durations = np.empty((n_src, k + 1), dtype=np.int64)
        durations[:, 0] = self.remaining
        durations[:, 1:] = self._draw_int((n_src, k))
        ends = np.cumsum(durations, axis=1)
        while np.any(ends[:, -1] <= length):
            extra = self._draw_int((n_src, k))
            durations = np.concatenate([durations, extra], axis=1)
            ends = np.concatenate([ends, ends[:, -1:] + np.cumsum(extra, axis=1)], axis=1)
        starts = ends - durations
        parity = (np.arange(durations.shape[1]) % 2).astype(bool)
        state = self.on[:, None] ^ parity[None, :]
        live = state & (starts < length)
        rows = np.broadcast_to(self.owner[:, None], starts.shape)[live]
        width = length + 1
        up = np.bincount(rows * width + starts[live], minlength=self.n_nodes * width)
        down = np.bincount(rows * width + np.minimum(ends[live], length), minlength=self.n_nodes * width)
        diff = (up - down).reshape(self.n_nodes, width)
        # the period straddling the block boundary carries over
        cur = np.argmax(ends > length, axis=1)
        idx = np.arange(n_src)
        self.remaining = ends[idx, cur] - length
        self.on = state[idx, cur]
        return np.cumsum(diff[:, :length], axis=1)

    def _draw_int(self, shape) -> np.ndarray:
        x = self.min_period * (1.0 - self.rng.random(shape)) ** (-1.0 / self.shape)
        return np.maximum(np.ceil(np.minimum(x, 1e15)), 1).astype(np.int64)


class TrafficGenerator:
    """Slot-by-slot packet arrivals for one simulation; call :meth:`arrivals` with consecutive cycles."""

    def __init__(self, cfg: TrafficConfig, weights: Optional[SpatialWeights] = None, block: int = 512):
        self.cfg = cfg
        self.weights = weights if weights is not None else build_spatial_weights(
            cfg.n_nodes, cfg.sigma, cfg.seed, cfg.sigma_mapping, role=cfg.spatial_role
        )
        if self.weights.n_nodes != cfg.n_nodes:
            raise ValueError("weights do not match n_nodes")
        ss = np.random.SeedSequence(cfg.seed)
        temporal_seed, emit_seed, credit_seed = ss.spawn(3)
        self._emit_rng = np.random.default_rng(emit_seed)
        self.rates = cfg.injection_rate * cfg.n_nodes * self.weights.source
        self._cdf = np.cumsum(self.weights.target)
        self._cdf[-1] = 1.0
        if cfg.memoryless:
            self._sources = None
            self._p = np.minimum(self.rates / cfg.n_sources, 1.0)
        else:
            self._sources = OnOffSources(cfg.n_nodes, cfg.n_sources, cfg.pareto_shape, np.random.default_rng(temporal_seed))
            self._p = np.minimum(self.rates / (cfg.n_sources * 0.5), 1.0)
            self._credit = np.random.default_rng(credit_seed).random(cfg.n_nodes)
        self.block_len = block
        self._block_start = 0
        self._counts = None
        self._next_cycle = 0
        self._next_id = 0

    @property
    def saturated_nodes(self) -> np.ndarray:
        """Nodes whose requested rate exceeds what their sources can emit."""
        cap = self.cfg.n_sources * (1.0 if self.cfg.memoryless else 0.5)
        return np.flatnonzero(self.rates > cap)

    def count_block(self, length: int) -> np.ndarray:
        """Packets emitted per node for the next ``length`` slots (advances the generator)."""
        if self.cfg.injection_rate == 0:
            return np.zeros((self.cfg.n_nodes, length), dtype=np.int64)
        if self._sources is None:
            return self._emit_rng.binomial(self.cfg.n_sources, self._p[:, None], size=(self.cfg.n_nodes, length))
        # credit-based thinning: each ON source earns p per slot and a packet
        # leaves whenever a whole unit has accrued, so no per-slot coin-flip
        # noise is layered on top of the ON/OFF burst structure
        on = self._sources.block(length)
        total = self._credit[:, None] + np.cumsum(on * self._p[:, None], axis=1)
        emitted = np.floor(total)
        counts = np.diff(emitted, axis=1, prepend=0.0).astype(np.int64)
        self._credit = total[:, -1] - emitted[:, -1]
        return counts

    def _draw_destinations(self, src: np.ndarray) -> np.ndarray:
        dst = np.searchsorted(self._cdf, self._emit_rng.random(src.size), side="right")
        clash = np.flatnonzero(dst == src)
        while clash.size:
            dst[clash] = np.searchsorted(self._cdf, self._emit_rng.random(clash.size), side="right")
            clash = clash[dst[clash] == src[clash]]
        return np.minimum(dst, self.cfg.n_nodes - 1)

    def _fill(self) -> None:
        counts = self.count_block(self.block_len)
        slot_idx, src = np.nonzero(counts.T)
        reps = counts.T[slot_idx, src]
        slots = np.repeat(slot_idx, reps)
        srcs = np.repeat(src, reps)
        dsts = self._draw_destinations(srcs)
        bounds = np.searchsorted(slots, np.arange(self.block_len + 1))
        self._counts = (slots, srcs, dsts, bounds)

    def arrivals(self, cycle: int) -> List[Packet]:
        if cycle != self._next_cycle:
            raise ValueError(f"cycles must be consecutive: expected {self._next_cycle}, got {cycle}")
        self._next_cycle += 1
        offset = cycle - self._block_start
        if self._counts is None or offset >= self.block_len:
            if self._counts is not None:
                self._block_start += self.block_len
                offset = cycle - self._block_start
            self._fill()
        slots, srcs, dsts, bounds = self._counts
        lo, hi = bounds[offset], bounds[offset + 1]
        if lo == hi:
            return []
        cfg = self.cfg
        out = []
        for s, d in zip(srcs[lo:hi].tolist(), dsts[lo:hi].tolist()):
            out.append(Packet(self._next_id, s, d, cycle, cfg.packet_bits, cfg.preamble_bits))
            self._next_id += 1
        return out


def generate_slot_arrivals(generator: TrafficGenerator, cycle: int) -> List[Packet]:
    return generator.arrivals(cycle)


def arrival_series(cfg: TrafficConfig, n_slots: int, block: int = 4096) -> np.ndarray:
    """Per-node packet counts for the first ``n_slots`` slots, shape (n_nodes, n_slots)."""
    gen = TrafficGenerator(cfg, block=block)
    parts = []
    left = n_slots
    while left > 0:
        k = min(block, left)
        parts.append(gen.count_block(k))
        left -= k
    return np.concatenate(parts, axis=1) if parts else np.zeros((cfg.n_nodes, 0), dtype=np.int64)


def estimate_hurst(series: Sequence[float], min_windows: int = 32, min_block: int = 1) -> Optional[float]:
    """Aggregated-variance Hurst estimate.

    The series is averaged over non-overlapping blocks of size m for
    log-spaced m between ``min_block`` and len/``min_windows``; the slope
    beta of log Var vs log m gives H = 1 + beta/2. Returns ``DEGENERATE``
    for a constant series.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 2 * min_windows:
        raise ValueError(f"series too short: need at least {2 * min_windows} samples")
    if np.all(x == x[0]):
        return DEGENERATE
    max_m = x.size // min_windows
    if max_m <= min_block:
        raise ValueError("series too short for the requested block range")
    ms = np.unique(np.round(np.logspace(math.log10(min_block), math.log10(max_m), 20)).astype(int))
    logm, logv = [], []
    for m in ms:
        k = x.size // m
        v = x[: k * m].reshape(k, m).mean(axis=1).var()
        if v > 0:
            logm.append(math.log(m))
            logv.append(math.log(v))
    if len(logm) < 2:
        return DEGENERATE
    beta = np.polyfit(logm, logv, 1)[0]
    return float(1.0 + beta / 2.0)


# --- traces -----------------------------------------------------------------------


TRACE_COLUMNS = ("cycle", "src", "dst", "packet_id")


def write_trace(packets: Iterable[Packet], stream: Optional[TextIO] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for p in packets:
        w.writerow([p.created_cycle, p.src, p.dst, p.id])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


class TraceReplay:
    """Replays a recorded trace through the same ``arrivals(cycle)`` interface as the generator."""

    def __init__(self, packets: Sequence[Packet]):
        self.packets = sorted(packets, key=lambda p: (p.created_cycle, p.id))
        self._i = 0

    @classmethod
    def from_csv(cls, source: Union[str, TextIO], packet_bits: int = 80, preamble_bits: int = 20) -> "TraceReplay":
        text = source if isinstance(source, str) else source.read()
        rows = list(csv.reader(line for line in io.StringIO(text) if not line.startswith("#")))
        if not rows or tuple(h.strip() for h in rows[0]) != TRACE_COLUMNS:
            raise ValueError(f"trace header must be {','.join(TRACE_COLUMNS)}")
        packets = []
        seen = set()
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            try:
                cycle, src, dst, pid = (int(v) for v in row)
            except ValueError as exc:
                raise ValueError(f"trace row {lineno}: {row}") from exc
            if pid in seen:
                raise ValueError(f"trace row {lineno}: duplicate packet_id {pid}")
            if cycle < 0:
                raise ValueError(f"trace row {lineno}: negative cycle")
            seen.add(pid)
            packets.append(Packet(pid, src, dst, cycle, packet_bits, preamble_bits))
        return cls(packets)

    @property
    def n_nodes_required(self) -> int:
        return 1 + max((max(p.src, p.dst) for p in self.packets), default=0)

    def arrivals(self, cycle: int) -> List[Packet]:
        out = []
        while self._i < len(self.packets) and self.packets[self._i].created_cycle <= cycle:
            p = self.packets[self._i]
            if p.created_cycle < cycle:
                raise ValueError(f"trace packet {p.id} at cycle {p.created_cycle} was skipped")
            out.append(p)
            self._i += 1
        return out


class RecordingSource:
    """Wraps an arrival source and keeps every packet it hands out (for trace export)."""

    def __init__(self, inner):
        self.inner = inner
        self.packets: List[Packet] = []

    def arrivals(self, cycle: int) -> List[Packet]:
        out = self.inner.arrivals(cycle)
        self.packets.extend(out)
        return out
