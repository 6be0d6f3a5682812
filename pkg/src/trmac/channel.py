"""Static in-package channel: CIR synthesis/ingest, TR filter banks, energy matrix.

Every directed link between two antennas gets a tap-delay channel impulse
response (CIR) on a uniform delay grid. A time-reversal (TR) filter bank is
derived from those CIRs once, together with the energy each node observes
when any transmitter precodes towards any intended receiver. Higher layers
only ever look at that energy matrix.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, Iterator, Mapping, Optional, TextIO, Tuple, Union

import numpy as np

SPEED_OF_LIGHT_MM_PER_PS = 0.299792458
DEFAULT_CARRIER_GHZ = 140.0
DEFAULT_WAVELENGTH_MM = SPEED_OF_LIGHT_MM_PER_PS * 1e3 / DEFAULT_CARRIER_GHZ

#: returned by :func:`focusing_metrics` when the effective response has no off-peak energy
PERFECT_FOCUSING = math.inf
#: returned by :func:`focusing_metrics` when there is no non-intended observer (2 nodes)
NO_OBSERVER = None

DETECTION_MODES = ("peak", "total")

Link = Tuple[int, int]


class CirFormatError(ValueError):
    """Raised when a CIR text file cannot be parsed."""


@dataclass(frozen=True)
class ChannelGeometry:
    """Antenna placement. Positions in mm, one antenna per node."""

    positions: np.ndarray
    wavelength: float = DEFAULT_WAVELENGTH_MM

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError("positions must be an (n_nodes, 2) array")
        if pos.shape[0] < 2:
            raise ValueError("a channel needs at least 2 nodes")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if not (math.isfinite(self.wavelength) and self.wavelength > 0):
            raise ValueError("wavelength must be positive")
        d = self._pairwise(pos)
        iu = np.triu_indices(pos.shape[0], 1)
        if np.any(d[iu] <= 0):
            raise ValueError("geometry has coincident nodes")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @staticmethod
    def _pairwise(pos: np.ndarray) -> np.ndarray:
        diff = pos[:, None, :] - pos[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=-1))

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def distance(self, a: int, b: int) -> float:
        return float(np.hypot(*(self.positions[a] - self.positions[b])))

    def distances(self) -> np.ndarray:
        return self._pairwise(self.positions)

    def spacing_in_wavelengths(self) -> Tuple[float, float]:
        """(min, max) pairwise antenna spacing in wavelengths."""
        d = self.distances()[np.triu_indices(self.n_nodes, 1)] / self.wavelength
        return float(d.min()), float(d.max())

    def __eq__(self, other):
        if not isinstance(other, ChannelGeometry):
            return NotImplemented
        return self.wavelength == other.wavelength and np.array_equal(
            self.positions, other.positions
        )

    def __hash__(self):
        return hash((self.wavelength, self.positions.tobytes()))


def grid_geometry(
    n_nodes: int,
    chiplets: Tuple[int, int] = (2, 2),
    chiplet_mm: float = 5.0,
    wavelength: float = DEFAULT_WAVELENGTH_MM,
) -> ChannelGeometry:
    """Cores laid out on a regular grid inside each chiplet of a rectangular package.

    Nodes are split as evenly as possible across chiplets (row-major), and each
    chiplet places its cores on a centered square-ish grid.
    """
    if n_nodes < 2:
        raise ValueError("n_nodes must be >= 2")
    n_chiplets = chiplets[0] * chiplets[1]
    per_chiplet = [n_nodes // n_chiplets + (1 if k < n_nodes % n_chiplets else 0) for k in range(n_chiplets)]
    positions = []
    for k, count in enumerate(per_chiplet):
        if count == 0:
            continue
        cx, cy = k % chiplets[0], k // chiplets[0]
        cols = math.ceil(math.sqrt(count))
        rows = math.ceil(count / cols)
        pitch_x = chiplet_mm / cols
        pitch_y = chiplet_mm / rows
        for c in range(count):
            col, row = c % cols, c // cols
            positions.append(
                (cx * chiplet_mm + (col + 0.5) * pitch_x, cy * chiplet_mm + (row + 0.5) * pitch_y)
            )
    return ChannelGeometry(np.array(positions), wavelength)


def four_chiplet_geometry(wavelength: float = DEFAULT_WAVELENGTH_MM) -> ChannelGeometry:
    """One antenna per 5x5 mm chiplet (nodes A, B, C, D), spacings of ~1.3-4.4 wavelengths."""
    return ChannelGeometry(
        np.array([[3.0, 3.0], [5.8, 3.0], [3.0, 7.0], [9.6, 9.6]]), wavelength
    )


@dataclass(frozen=True)
class Cir:
    """Tap-delay channel impulse response on a uniform grid.

    ``delays`` are integer sample indices; ``delay_ps`` gives them in ps.
    """

    delays: np.ndarray
    amplitudes: np.ndarray
    sample_period: float = 1.0

    def __post_init__(self):
        delays = np.array(self.delays, dtype=np.int64).ravel()
        amps = np.array(self.amplitudes, dtype=np.complex128).ravel()
        if delays.size == 0:
            raise ValueError("a CIR needs at least one tap")
        if delays.shape != amps.shape:
            raise ValueError("delays and amplitudes differ in length")
        if delays[0] < 0 or np.any(np.diff(delays) <= 0):
            raise ValueError("tap delays must be non-negative and strictly increasing")
        if not np.all(np.isfinite(amps)):
            raise ValueError("tap amplitudes must be finite")
        if not (np.sum(np.abs(amps) ** 2) > 0):
            raise ValueError("CIR has zero energy")
        if not (self.sample_period > 0):
            raise ValueError("sample_period must be positive")
        delays.setflags(write=False)
        amps.setflags(write=False)
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def delay_ps(self) -> np.ndarray:
        return self.delays * self.sample_period

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    @property
    def n_taps(self) -> int:
        return self.delays.size

    def to_dense(self, length: Optional[int] = None) -> np.ndarray:
        n = int(self.delays[-1]) + 1 if length is None else length
        out = np.zeros(n, dtype=np.complex128)
        out[self.delays] = self.amplitudes
        return out

    def scaled(self, factor: float) -> "Cir":
        return Cir(self.delays, self.amplitudes * factor, self.sample_period)

    def __eq__(self, other):
        if not isinstance(other, Cir):
            return NotImplemented
        return (
            self.sample_period == other.sample_period
            and np.array_equal(self.delays, other.delays)
            and np.array_equal(self.amplitudes, other.amplitudes)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class CirParams:
    """Parametric reverberant-channel model.

    mean_tap_count counts the LOS tap, so 1 means a pure line-of-sight channel.
    The diffuse multipath energy does not depend on distance; rician_k is the
    ratio of free-space LOS energy at one wavelength to that diffuse energy.
    """

    mean_tap_count: float = 200.0
    decay_constant: float = 200.0  # ps
    los_excess_gain: float = 0.3
    rician_k: float = 0.5
    span_decays: float = 5.0  # multipath excess delays drawn in [0, span_decays * decay_constant]

    def __post_init__(self):
        for name in ("mean_tap_count", "decay_constant", "los_excess_gain", "rician_k", "span_decays"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.mean_tap_count < 1:
            raise ValueError("mean_tap_count must be >= 1")
        if self.decay_constant <= 0:
            raise ValueError("decay_constant must be > 0")
        if self.rician_k <= 0 or self.los_excess_gain < 0 or self.span_decays <= 0:
            raise ValueError("rician_k and span_decays must be > 0, los_excess_gain >= 0")


@dataclass(frozen=True)
class CirMatrix:
    """CIRs for every ordered (tx, rx) pair of a geometry; never mutated."""

    geometry: ChannelGeometry
    links: Mapping[Link, Cir]
    seed: Optional[int] = None

    def __post_init__(self):
        n = self.geometry.n_nodes
        expected = {(a, b) for a in range(n) for b in range(n) if a != b}
        keys = set(self.links)
        for a, b in keys:
            if a == b:
                raise ValueError(f"link {a}->{b}: self-link forbidden")
        if keys != expected:
            missing = sorted(expected - keys)
            extra = sorted(keys - expected)
            raise ValueError(f"CirMatrix link set mismatch (missing={missing[:5]}, extra={extra[:5]})")
        periods = {c.sample_period for c in self.links.values()}
        if len(periods) != 1:
            raise ValueError("all CIRs must share one sample_period")
        object.__setattr__(self, "links", dict(sorted(self.links.items())))

    @property
    def n_nodes(self) -> int:
        return self.geometry.n_nodes

    @property
    def sample_period(self) -> float:
        return next(iter(self.links.values())).sample_period

    def __getitem__(self, link: Link) -> Cir:
        return self.links[link]

    def __iter__(self) -> Iterator[Link]:
        return iter(self.links)

    def __len__(self) -> int:
        return len(self.links)

    def max_delay(self) -> int:
        return max(int(c.delays[-1]) for c in self.links.values())

    def dense(self, tx: int, length: Optional[int] = None) -> np.ndarray:
        """(n_nodes, length) complex array of CIRs from ``tx``; row ``tx`` is zero."""
        n = self.n_nodes
        length = self.max_delay() + 1 if length is None else length
        out = np.zeros((n, length), dtype=np.complex128)
        for m in range(n):
            if m != tx:
                c = self.links[(tx, m)]
                out[m, c.delays] = c.amplitudes
        return out

    def with_link(self, link: Link, cir: Cir) -> "CirMatrix":
        links = dict(self.links)
        links[link] = cir
        return CirMatrix(self.geometry, links, self.seed)

    def is_reciprocal(self) -> bool:
        return all(self.links[(a, b)] == self.links[(b, a)] for a, b in self.links if a < b)

    def __eq__(self, other):
        if not isinstance(other, CirMatrix):
            return NotImplemented
        return self.geometry == other.geometry and self.links == other.links

    __hash__ = None  # type: ignore[assignment]


def synthesize_cir(
    geometry: ChannelGeometry,
    params: CirParams = CirParams(),
    seed: int = 0,
    sample_period: float = 1.0,
) -> CirMatrix:
    """Draw a reciprocal reverberant CIR for every antenna pair.

    Each link: a LOS tap at distance/c with free-space amplitude (times
    ``los_excess_gain``), then Poisson(mean_tap_count - 1) multipath taps with
    complex-Gaussian amplitudes whose expected energy decays as
    exp(-excess_delay / decay_constant). Taps landing on the same grid bin
    add coherently.
    """
    if not isinstance(params, CirParams):
        params = CirParams(**params)
    if not (math.isfinite(sample_period) and sample_period > 0):
        raise ValueError("sample_period must be positive and finite")
    rng = np.random.default_rng(seed)
    n = geometry.n_nodes
    lam = geometry.wavelength
    span = params.span_decays * params.decay_constant
    n_mean_mp = params.mean_tap_count - 1.0
    diffuse_energy = (1.0 / (4.0 * math.pi)) ** 2 / params.rician_k
    if n_mean_mp > 0:
        # expected sum of exp(-tau/decay) over the multipath taps of one link
        norm = n_mean_mp * (params.decay_constant / span) * (1.0 - math.exp(-span / params.decay_constant))
    links: Dict[Link, Cir] = {}
    for a in range(n):
        for b in range(a + 1, n):
            d = geometry.distance(a, b)
            los_idx = int(round(d / SPEED_OF_LIGHT_MM_PER_PS / sample_period))
            los_amp = params.los_excess_gain * lam / (4.0 * math.pi * d) * np.exp(-2j * math.pi * d / lam)
            k = int(rng.poisson(n_mean_mp)) if n_mean_mp > 0 else 0
            if k:
                excess = rng.uniform(0.0, span, size=k)
                excess_idx = np.maximum(1, np.rint(excess / sample_period)).astype(np.int64)
                var = diffuse_energy * np.exp(-excess_idx * sample_period / params.decay_constant) / norm
                amps = np.sqrt(var / 2.0) * (rng.standard_normal(k) + 1j * rng.standard_normal(k))
                uniq, inv = np.unique(excess_idx, return_inverse=True)
                summed = np.zeros(uniq.size, dtype=np.complex128)
                np.add.at(summed, inv, amps)
                delays = np.concatenate(([los_idx], los_idx + uniq))
                taps = np.concatenate(([los_amp], summed))
            else:
                delays = np.array([los_idx])
                taps = np.array([los_amp])
            cir = Cir(delays, taps, sample_period)
            links[(a, b)] = cir
            links[(b, a)] = cir
    return CirMatrix(geometry, links, seed)


# --- CIR text format -------------------------------------------------------


def dump_cir_matrix(matrix: CirMatrix, stream: Optional[TextIO] = None) -> str:
    """Write the line-oriented ``CIR v1`` format; links in (tx, rx) order."""
    out = io.StringIO() if stream is None else stream
    out.write(f"CIR v1 {matrix.n_nodes} {matrix.sample_period!r}\n")
    for i, (x, y) in enumerate(matrix.geometry.positions):
        out.write(f"POS {i} {float(x)!r} {float(y)!r}\n")
    for (tx, rx), cir in matrix.links.items():
        out.write(f"LINK {tx} {rx} {cir.n_taps}\n")
        for dly, amp in zip(cir.delay_ps, cir.amplitudes):
            out.write(f"{float(dly)!r} {float(amp.real)!r} {float(amp.imag)!r}\n")
    return out.getvalue() if stream is None else ""


def _as_text(source: Union[bytes, str, BinaryIO, TextIO]) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def load_cir_matrix(
    source: Union[bytes, str, BinaryIO, TextIO], wavelength: float = DEFAULT_WAVELENGTH_MM
) -> CirMatrix:
    """Parse a ``CIR v1`` document (bytes, text or an open file)."""
    lines = [ln.strip() for ln in _as_text(source).splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise CirFormatError("empty CIR file")
    head = lines[0].split()
    if len(head) != 4 or head[:2] != ["CIR", "v1"]:
        raise CirFormatError(f"malformed header: {lines[0]!r}")
    try:
        n = int(head[2])
        period = float(head[3])
    except ValueError as exc:
        raise CirFormatError(f"malformed header: {lines[0]!r}") from exc
    if n < 2 or not (period > 0):
        raise CirFormatError(f"malformed header: {lines[0]!r}")

    positions: Dict[int, Tuple[float, float]] = {}
    links: Dict[Link, Cir] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        kind = parts[0]
        if kind == "POS":
            if len(parts) != 4:
                raise CirFormatError(f"malformed POS line: {lines[i]!r}")
            node = int(parts[1])
            if not 0 <= node < n:
                raise CirFormatError(f"POS for unknown node {node}")
            positions[node] = (float(parts[2]), float(parts[3]))
            i += 1
        elif kind == "LINK":
            if len(parts) != 4:
                raise CirFormatError(f"malformed LINK line: {lines[i]!r}")
            tx, rx, n_taps = int(parts[1]), int(parts[2]), int(parts[3])
            name = f"link {tx}->{rx}"
            if tx == rx:
                raise CirFormatError(f"{name}: self-link forbidden")
            if not (0 <= tx < n and 0 <= rx < n):
                raise CirFormatError(f"{name}: node id out of range")
            if (tx, rx) in links:
                raise CirFormatError(f"{name}: duplicate link")
            if n_taps < 1:
                raise CirFormatError(f"{name}: a link needs at least one tap")
            rows = lines[i + 1 : i + 1 + n_taps]
            if len(rows) != n_taps:
                raise CirFormatError(f"{name}: expected {n_taps} tap lines, got {len(rows)}")
            try:
                vals = np.array([[float(v) for v in r.split()] for r in rows])
            except ValueError as exc:
                raise CirFormatError(f"{name}: malformed tap line") from exc
            if vals.ndim != 2 or vals.shape[1] != 3:
                raise CirFormatError(f"{name}: tap lines need '<delay_ps> <re> <im>'")
            idx = vals[:, 0] / period
            if np.any(np.abs(idx - np.rint(idx)) > 1e-6):
                raise CirFormatError(f"{name}: delays must be multiples of the sample period")
            idx = np.rint(idx).astype(np.int64)
            if np.any(np.diff(idx) <= 0):
                raise CirFormatError(f"{name}: non-increasing delays")
            try:
                links[(tx, rx)] = Cir(idx, vals[:, 1] + 1j * vals[:, 2], period)
            except ValueError as exc:
                raise CirFormatError(f"{name}: {exc}") from exc
            i += 1 + n_taps
        else:
            raise CirFormatError(f"unexpected line: {lines[i]!r}")

    if set(positions) != set(range(n)):
        raise CirFormatError(f"missing POS lines for nodes {sorted(set(range(n)) - set(positions))}")
    missing = [(a, b) for a in range(n) for b in range(n) if a != b and (a, b) not in links]
    if missing:
        raise CirFormatError(f"missing links: {', '.join(f'{a}->{b}' for a, b in missing[:10])}")
    geometry = ChannelGeometry(np.array([positions[k] for k in range(n)]), wavelength)
    return CirMatrix(geometry, links, None)


# --- TR filter bank ----------------------------------------------------------


def _quantize(amps: np.ndarray, bits: int) -> np.ndarray:
    full = max(np.abs(amps.real).max(), np.abs(amps.imag).max())
    levels = 2 ** (bits - 1) - 1
    if levels < 1:
        raise ValueError("amplitude_bits must be >= 2")
    step = full / levels
    return np.rint(amps.real / step) * step + 1j * np.rint(amps.imag / step) * step


def tr_filter(cir: Cir, max_taps: Optional[int] = None, amplitude_bits: Optional[int] = None) -> Cir:
    """Time-reversed, conjugated, unit-energy copy of ``cir``.

    Filter delay k holds conj(h[T - k]) where T is the last tap delay.
    ``max_taps`` keeps only the strongest taps and ``amplitude_bits``
    quantizes re/im uniformly, emulating a finite filter memory.
    """
    t_max = int(cir.delays[-1])
    delays = (t_max - cir.delays)[::-1]
    amps = np.conj(cir.amplitudes)[::-1]
    if max_taps is not None and max_taps < amps.size:
        keep = np.sort(np.argsort(-np.abs(amps), kind="stable")[:max_taps])
        delays, amps = delays[keep], amps[keep]
    if amplitude_bits is not None:
        amps = _quantize(amps, amplitude_bits)
        nz = amps != 0
        if not np.any(nz):
            raise ValueError("quantization removed every filter tap")
        delays, amps = delays[nz], amps[nz]
    amps = amps / math.sqrt(float(np.sum(np.abs(amps) ** 2)))
    return Cir(delays, amps, cir.sample_period)


@dataclass(frozen=True)
class TrFilterBank:
    """Per-link TR filters plus the derived received-energy matrix.

    ``energy_matrix[tx, rx, m]`` is the energy node ``m`` observes when ``tx``
    transmits a unit-energy symbol through the filter aimed at ``rx``.
    Entries with ``rx == tx`` or ``m == tx`` are 0 (undefined).

    With ``detection == "peak"`` the energy is taken at the focusing instant
    (the sample where the intended response peaks), which is what an
    energy-threshold receiver synchronized to that instant sees. With
    ``"total"`` it is the energy of the whole convolution.
    """

    cirs: CirMatrix
    filters: Mapping[Link, Cir]
    energy_matrix: np.ndarray
    detection: str = "peak"

    @property
    def n_nodes(self) -> int:
        return self.cirs.n_nodes

    def focused(self, tx: int, rx: int) -> float:
        return float(self.energy_matrix[tx, rx, rx])

    def leaked(self, tx: int, rx: int, observer: int) -> float:
        return float(self.energy_matrix[tx, rx, observer])

    def effective_response(self, link: Link, observer: Optional[int] = None) -> np.ndarray:
        """Sample-level response at ``observer`` (default: intended rx) of a TR transmission."""
        tx, rx = link
        observer = rx if observer is None else observer
        f = self.filters[link]
        return np.convolve(f.to_dense(), self.cirs[(tx, observer)].to_dense())


def build_tr_filter_bank(
    cirs: CirMatrix,
    max_taps: Optional[int] = None,
    amplitude_bits: Optional[int] = None,
    detection: str = "peak",
) -> TrFilterBank:
    """Derive one TR filter per link and the (tx, rx_intended, observer) energy matrix."""
    if detection not in DETECTION_MODES:
        raise ValueError(f"detection must be one of {DETECTION_MODES}")
    n = cirs.n_nodes
    filters = {link: tr_filter(c, max_taps, amplitude_bits) for link, c in cirs.links.items()}
    length = cirs.max_delay() + 1
    energy = np.zeros((n, n, n))
    if detection == "total":
        nfft = 1 << (2 * length - 1).bit_length()
    for tx in range(n):
        h = cirs.dense(tx, length)
        if detection == "peak":
            # template q[s] = f[T - s] so that y_m[T] = sum_s q[s] h_m[s]
            q = np.zeros((n, length), dtype=np.complex128)
            for rx in range(n):
                if rx == tx:
                    continue
                f = filters[(tx, rx)]
                t_ref = int(cirs[(tx, rx)].delays[-1])
                s = t_ref - f.delays
                ok = (s >= 0) & (s < length)
                q[rx, s[ok]] = f.amplitudes[ok]
            energy[tx] = np.abs(q @ h.T) ** 2
        else:
            fd = np.zeros((n, length), dtype=np.complex128)
            for rx in range(n):
                if rx != tx:
                    f = filters[(tx, rx)]
                    fd[rx, f.delays] = f.amplitudes
            pf = np.abs(np.fft.fft(fd, nfft, axis=1)) ** 2
            ph = np.abs(np.fft.fft(h, nfft, axis=1)) ** 2
            energy[tx] = (pf @ ph.T) / nfft
        energy[tx, tx, :] = 0.0
        energy[tx, :, tx] = 0.0
    energy = np.maximum(energy, 0.0)
    energy.setflags(write=False)
    return TrFilterBank(cirs, filters, energy, detection)


@dataclass(frozen=True)
class FocusingMetrics:
    temporal_focusing_gain: float
    spatial_contrast_db: Optional[float]


def focusing_metrics(bank: TrFilterBank, link: Link) -> FocusingMetrics:
    """Temporal peak-to-sidelobe ratio and spatial contrast for one link.

    Gain is ``PERFECT_FOCUSING`` (inf) when the intended response has no
    off-peak energy; contrast is ``NO_OBSERVER`` (None) with only 2 nodes.
    """
    tx, rx = link
    if (tx, rx) not in bank.filters:
        raise KeyError(f"no link {tx}->{rx}")
    p = np.abs(bank.effective_response(link)) ** 2
    k = int(np.argmax(p))
    off = np.delete(p, k)
    off_mean = float(off.mean()) if off.size else 0.0
    gain = PERFECT_FOCUSING if off_mean <= 1e-15 * p[k] else float(p[k] / off_mean)
    others = [m for m in range(bank.n_nodes) if m not in (tx, rx)]
    if not others:
        return FocusingMetrics(gain, NO_OBSERVER)
    worst = max(bank.leaked(tx, rx, m) for m in others)
    intended = bank.focused(tx, rx)
    contrast = math.inf if worst == 0 else 10.0 * math.log10(intended / worst)
    return FocusingMetrics(gain, contrast)
