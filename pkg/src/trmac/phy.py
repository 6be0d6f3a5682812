"""Energy-threshold physical layer on top of a TR filter bank.

Per-link thresholds, an analytic BER for on-off energy detection under
co-channel interference, NPT (number of parallel transmissions) derivation,
and the slot-level preamble/ACK decisions the MAC consumes.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erfc

from .channel import TrFilterBank

Link = Tuple[int, int]

DEFAULT_BER_LIMIT = 1e-10
# Chosen so the default 64-node reverberant channel supports 2-4 parallel links.
DEFAULT_NOISE_ENERGY = 3e-5
DEFAULT_VARIANCE_SCALE = 3e-6
EXACT_NPT_MAX_NODES = 10


@dataclass(frozen=True)
class NoiseModel:
    """Per-slot noise energy, in the same units as the energy matrix."""

    noise_energy: float = DEFAULT_NOISE_ENERGY

    def __post_init__(self):
        if not (self.noise_energy >= 0 and math.isfinite(self.noise_energy)):
            raise ValueError("noise_energy must be finite and >= 0")

    def scaled(self, factor: float) -> "NoiseModel":
        return NoiseModel(self.noise_energy * factor)


@dataclass(frozen=True)
class DecodeOutcome:
    kind: str  # "decoded" | "garbled" | "silence"
    address: Optional[int] = None

    @classmethod
    def decoded(cls, src: int) -> "DecodeOutcome":
        return cls("decoded", src)

    @classmethod
    def garbled(cls, wrong: int) -> "DecodeOutcome":
        return cls("garbled", wrong)

    @classmethod
    def silence(cls) -> "DecodeOutcome":
        return cls("silence")

    @property
    def is_silence(self) -> bool:
        return self.kind == "silence"


SILENCE = DecodeOutcome.silence()


@dataclass(frozen=True)
class Thresholds:
    """Per-link detection thresholds. ``values[t, r]`` is NaN for unusable links."""

    values: np.ndarray
    usable: np.ndarray
    focused: np.ndarray
    mean_leakage: np.ndarray  # per observer node
    noise_energy: float

    def __getitem__(self, link: Link) -> float:
        return float(self.values[link])

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    def unusable_links(self) -> List[Link]:
        n = self.n_nodes
        return [(t, r) for t in range(n) for r in range(n) if t != r and not self.usable[t, r]]


@dataclass(frozen=True)
class PhyProfile:
    """Everything the MAC needs from the physical layer; derived once per channel."""

    thresholds: Thresholds
    ber_limit: float = DEFAULT_BER_LIMIT
    npt: int = 1
    noise: NoiseModel = NoiseModel()
    variance_scale: float = DEFAULT_VARIANCE_SCALE
    p_garble: float = 1.0
    composite_thresholds: Dict[Tuple[int, FrozenSet[int]], float] = field(default_factory=dict)

    def __post_init__(self):
        n = self.thresholds.n_nodes
        if not 1 <= self.npt <= max(1, n // 2):
            raise ValueError(f"npt must be in [1, {n // 2}], got {self.npt}")
        if not 0 < self.ber_limit < 1:
            raise ValueError("ber_limit must be in (0, 1)")
        if not 0 <= self.p_garble <= 1:
            raise ValueError("p_garble must be a probability")

    def threshold(self, link: Link) -> float:
        return self.thresholds[link]


def _mean_leakage(energy: np.ndarray) -> np.ndarray:
    n = energy.shape[0]
    count = (n - 1) * (n - 2)
    if count == 0:
        return np.zeros(n)
    per_obs = energy.sum(axis=(0, 1)) - np.einsum("trr->r", energy)
    return per_obs / count


def compute_thresholds(bank: TrFilterBank, noise: NoiseModel = NoiseModel()) -> Thresholds:
    """Geometric mean of focused energy and mean leakage+noise at the receiver.

    When leakage and noise are both zero the threshold falls back to half the
    focused energy. Links whose focused energy does not exceed leakage+noise
    are flagged unusable (threshold NaN).
    """
    energy = bank.energy_matrix
    n = bank.n_nodes
    focused = np.einsum("trr->tr", energy).copy()
    leak = _mean_leakage(energy)
    floor = leak[None, :] + noise.noise_energy
    with np.errstate(invalid="ignore"):
        vals = np.where(floor > 0, np.sqrt(focused * floor), focused / 2.0)
    usable = focused > floor
    off_diag = ~np.eye(n, dtype=bool)
    usable &= off_diag
    vals = np.where(usable, vals, np.nan)
    return Thresholds(vals, usable, focused, leak, noise.noise_energy)


def composite_threshold(thresholds: Thresholds, bank: TrFilterBank, rx: int, senders: Iterable[int]) -> float:
    """Threshold at ``rx`` for the superposition of focused signals from ``senders``.

    Used when one node expects simultaneous replies from several targets
    (symmetric multi-target transmission).
    """
    s = sum(bank.focused(t, rx) for t in senders)
    floor = thresholds.mean_leakage[rx] + thresholds.noise_energy
    return math.sqrt(s * floor) if floor > 0 else s / 2.0


def ber_from_energies(signal, interference, noise, threshold, variance_scale=DEFAULT_VARIANCE_SCALE):
    """Gaussian-approximation error probability for on-off energy detection.

    Works elementwise on arrays. With no interference and no noise the
    error probability is 0 whenever the threshold sits below the signal.
    """
    signal = np.asarray(signal, dtype=float)
    floor = np.asarray(interference, dtype=float) + noise
    threshold = np.asarray(threshold, dtype=float)
    scale = 2.0 * np.sqrt(2.0 * floor * variance_scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(scale > 0, (signal - threshold) / scale, np.where(signal > threshold, np.inf, -np.inf))
        b = np.where(scale > 0, (threshold - floor) / scale, np.where(threshold > floor, np.inf, -np.inf))
    out = 0.5 * erfc(a) + 0.5 * erfc(b)
    out = np.where(np.isnan(threshold), 1.0, out)
    return out if out.ndim else float(out)


def _check_disjoint(links: Sequence[Link]) -> None:
    nodes = [x for link in links for x in link]
    if len(nodes) != len(set(nodes)):
        raise ValueError(f"links are not pairwise node-disjoint: {list(links)}")


def interference_at(bank: TrFilterBank, rx: int, links: Iterable[Link]) -> float:
    """Summed energy at ``rx`` leaked by concurrent TR transmissions ``links``."""
    e = bank.energy_matrix
    return float(sum(e[t, r, rx] for t, r in links if t != rx))


def estimate_link_ber(link: Link, interferers: Iterable[Link], bank: TrFilterBank, profile: PhyProfile) -> float:
    interferers = list(interferers)
    _check_disjoint([link] + interferers)
    t, r = link
    return ber_from_energies(
        bank.focused(t, r),
        interference_at(bank, r, interferers),
        profile.noise.noise_energy,
        profile.thresholds[link],
        profile.variance_scale,
    )


# --- NPT ----------------------------------------------------------------------


def count_disjoint_sets(n_nodes: int, k: int) -> int:
    """Number of unordered sets of k node-disjoint directed links."""
    if 2 * k > n_nodes:
        return 0
    return math.factorial(n_nodes) // (math.factorial(n_nodes - 2 * k) * math.factorial(k))


def enumerate_disjoint_sets(n_nodes: int, k: int) -> np.ndarray:
    """All node-disjoint k-link sets as an (count, k, 2) array, links sorted within a set."""
    links = [(t, r) for t in range(n_nodes) for r in range(n_nodes) if t != r]
    out: List[Tuple[Link, ...]] = []

    def rec(start: int, used: FrozenSet[int], chosen: Tuple[Link, ...]):
        if len(chosen) == k:
            out.append(chosen)
            return
        for i in range(start, len(links)):
            t, r = links[i]
            if t in used or r in used:
                continue
            rec(i + 1, used | {t, r}, chosen + ((t, r),))

    rec(0, frozenset(), ())
    return np.array(out, dtype=np.int64).reshape(len(out), k, 2)


def set_ber(sets: np.ndarray, energy: np.ndarray, thresholds: Thresholds, noise: float, variance_scale: float) -> np.ndarray:
    """Worst-link BER of every link set in ``sets`` (shape (S, k, 2))."""
    tx, rx = sets[..., 0], sets[..., 1]
    # cross[s, i, j] = energy leaked by link j onto link i's receiver
    cross = energy[tx[:, None, :], rx[:, None, :], rx[:, :, None]]
    k = sets.shape[1]
    cross = cross * (1 - np.eye(k))[None, :, :]
    interference = cross.sum(axis=2)
    signal = energy[tx, rx, rx]
    theta = thresholds.values[tx, rx]
    ber = ber_from_energies(signal, interference, noise, theta, variance_scale)
    return np.asarray(ber).max(axis=1)


@dataclass(frozen=True)
class NptReport:
    npt: int
    flagged: bool
    mode: str
    ber_limit: float
    table: Tuple[Tuple[int, float, int], ...]  # (k, statistic, n_sets evaluated)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# mode={self.mode} ber_limit={self.ber_limit!r} npt={self.npt} flagged={self.flagged}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "ber_statistic", "n_sets", "within_limit"])
        for k, stat, count in self.table:
            w.writerow([k, repr(stat), count, int(stat <= self.ber_limit)])
        return buf.getvalue()


def npt_report(
    bank: TrFilterBank,
    thresholds: Thresholds,
    ber_limit: float = DEFAULT_BER_LIMIT,
    mode: str = "exact",
    n_samples: int = 2000,
    percentile: float = 100.0,
    variance_scale: float = DEFAULT_VARIANCE_SCALE,
    seed: int = 0,
) -> NptReport:
    """Largest k whose worst-link BER statistic over node-disjoint k-sets stays within ``ber_limit``.

    ``exact`` enumerates every set (n_nodes <= 10). ``sampled`` draws
    ``n_samples`` random sets per k and takes the given percentile of the
    per-set worst BER; if ``n_samples`` covers all sets they are enumerated.
    """
    if not 0 < ber_limit < 1:
        raise ValueError("ber_limit must be in (0, 1)")
    if mode not in ("exact", "sampled"):
        raise ValueError("mode must be 'exact' or 'sampled'")
    n = bank.n_nodes
    if mode == "exact" and n > EXACT_NPT_MAX_NODES:
        raise ValueError(f"exact NPT is limited to {EXACT_NPT_MAX_NODES} nodes; use sampled mode")
    rng = np.random.default_rng(seed)
    energy = bank.energy_matrix
    table = []
    npt = 0
    for k in range(1, n // 2 + 1):
        total = count_disjoint_sets(n, k)
        if mode == "exact" or total <= n_samples:
            sets = enumerate_disjoint_sets(n, k)
            stat_pct = 100.0 if mode == "exact" else percentile
        else:
            perms = np.argsort(rng.random((n_samples, n)), axis=1)[:, : 2 * k]
            sets = perms.reshape(n_samples, k, 2)
            stat_pct = percentile
        worst = set_ber(sets, energy, thresholds, thresholds.noise_energy, variance_scale)
        stat = float(np.percentile(worst, stat_pct)) if stat_pct < 100 else float(worst.max())
        table.append((k, stat, len(sets)))
        if stat > ber_limit:
            break
        npt = k
    flagged = npt == 0
    return NptReport(max(npt, 1), flagged, mode, ber_limit, tuple(table))


def compute_npt(bank: TrFilterBank, thresholds: Thresholds, ber_limit: float = DEFAULT_BER_LIMIT, **kwargs) -> int:
    return npt_report(bank, thresholds, ber_limit, **kwargs).npt


def derive_profile(
    bank: TrFilterBank,
    noise: NoiseModel = NoiseModel(),
    ber_limit: float = DEFAULT_BER_LIMIT,
    npt: Optional[int] = None,
    variance_scale: float = DEFAULT_VARIANCE_SCALE,
    p_garble: float = 1.0,
    npt_mode: Optional[str] = None,
    n_samples: int = 2000,
    percentile: float = 99.0,
    seed: int = 0,
) -> PhyProfile:
    """Thresholds plus NPT (derived from the channel unless given)."""
    thr = compute_thresholds(bank, noise)
    if npt is None:
        mode = npt_mode or ("exact" if bank.n_nodes <= 8 else "sampled")
        npt = compute_npt(
            bank, thr, ber_limit, mode=mode, n_samples=n_samples,
            percentile=percentile if mode == "sampled" else 100.0,
            variance_scale=variance_scale, seed=seed,
        )
    return PhyProfile(thr, ber_limit, npt, noise, variance_scale, p_garble)


def dump_thresholds(thresholds: Thresholds) -> str:
    """CSV: tx, rx, threshold, focused energy, mean leakage at rx, usable."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tx", "rx", "threshold", "focused_energy", "mean_leakage", "usable"])
    n = thresholds.n_nodes
    for t in range(n):
        for r in range(n):
            if t == r:
                continue
            w.writerow([
                t, r, repr(float(thresholds.values[t, r])), repr(float(thresholds.focused[t, r])),
                repr(float(thresholds.mean_leakage[r])), int(thresholds.usable[t, r]),
            ])
    return buf.getvalue()


# --- slot-level decisions -------------------------------------------------------


def garble_address(
    rx: int, transmitters: Iterable[int], n_nodes: int, rng: np.random.Generator, pool: Optional[Iterable[int]] = None
) -> Optional[int]:
    """A wrong source address: uniform over ``pool`` (default all nodes) minus ``rx`` and transmitters."""
    busy = set(transmitters) | {rx}
    candidates = [x for x in (range(n_nodes) if pool is None else pool) if x not in busy]
    if not candidates:
        return None
    return candidates[int(rng.integers(len(candidates)))]


def resolve_preamble(
    rx: int,
    arrivals: Sequence[Link],
    bank: Optional[TrFilterBank],
    profile: PhyProfile,
    rng: np.random.Generator,
    background: Sequence[Link] = (),
    overloaded: bool = False,
    n_nodes: Optional[int] = None,
    pool: Optional[Sequence[int]] = None,
) -> DecodeOutcome:
    """What a listening ``rx`` decodes from the preambles sent this slot.

    ``arrivals`` are all concurrent preambles on rx's channel (src, dst);
    ``background`` other concurrent transmissions (ACK/data) adding CCI.
    ``bank=None`` means ideal energies (only collisions matter).
    ``overloaded`` marks a preamble that did not fit in the spare spatial
    capacity this slot; it is lost in the interference.
    ``pool`` limits garbled addresses to the nodes sharing the channel.
    """
    n = bank.n_nodes if bank is not None else n_nodes
    if n is None:
        raise ValueError("n_nodes is required without a filter bank")
    transmitters = {s for s, _ in arrivals} | {s for s, _ in background}
    if rx in transmitters:
        raise ValueError(f"node {rx} is transmitting this slot and cannot decode")
    targeting = [a for a in arrivals if a[1] == rx]
    if len(targeting) >= 2:
        if profile.p_garble < 1.0 and rng.random() >= profile.p_garble:
            return SILENCE
        w = garble_address(rx, transmitters, n, rng, pool)
        return SILENCE if w is None else DecodeOutcome.garbled(w)
    others = [a for a in arrivals if a[1] != rx] + list(background)
    if len(targeting) == 1:
        src = targeting[0][0]
        if overloaded:
            return SILENCE
        if bank is None:
            return DecodeOutcome.decoded(src)
        s = bank.focused(src, rx)
        theta = profile.thresholds[(src, rx)]
        ber = ber_from_energies(
            s, interference_at(bank, rx, others), profile.noise.noise_energy, theta, profile.variance_scale
        )
        if s >= theta and ber <= profile.ber_limit:
            return DecodeOutcome.decoded(src)
        return SILENCE
    # an idle listener only reacts to preamble energy; ACK and data bursts add interference but are not decoded
    stray = [a for a in arrivals if a[1] != rx]
    if bank is None or not stray:
        return SILENCE
    observed = interference_at(bank, rx, stray)
    incoming = profile.thresholds.values[:, rx]
    if np.all(np.isnan(incoming)) or observed < np.nanmin(incoming):
        return SILENCE
    w = garble_address(rx, transmitters, n, rng, pool)
    return SILENCE if w is None else DecodeOutcome.garbled(w)


def ack_detected(
    tx: int,
    ack_transmissions: Sequence[Link],
    bank: Optional[TrFilterBank],
    profile: PhyProfile,
    awaiting: Optional[int] = None,
) -> bool:
    """Whether ``tx`` (waiting for an ACK from ``awaiting``) sees an ACK this slot.

    True when the ACK energy at tx clears the threshold of some ACK aimed at
    it, or when the summed energy clears tx's own waiting threshold; the
    latter lets an erroneous ACK (or enough leakage) fake a handshake.
    """
    aimed = [a for a, t in ack_transmissions if t == tx and a != tx]
    if bank is None:
        return bool(aimed)
    total = sum(bank.energy_matrix[a, t, tx] for a, t in ack_transmissions if a != tx)
    thr = profile.thresholds
    if any(total >= thr[(a, tx)] for a in aimed if thr.usable[a, tx]):
        return True
    if awaiting is not None and awaiting != tx and thr.usable[awaiting, tx]:
        return total >= thr[(awaiting, tx)]
    return False
