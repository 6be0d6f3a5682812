"""Latency, throughput and box-plot summaries of simulation results.

Quantiles use linear interpolation between order statistics (numpy's
``linear`` method), so {1, 2, 3, 4} gives p25 = 1.75, median = 2.5,
p75 = 3.25. Latency statistics cover packets created at or after the
warmup cycle. Throughput counts deliveries that land inside the
measurement window (warmup, end of run].
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np

from .engine import COLLISION_CATEGORIES, SimResult, SweepCell

NO_DELIVERIES = "no deliveries"
QUANTILE_METHOD = "linear"
SATURATION_FACTOR = 10.0


@dataclass(frozen=True)
class BoxStats:
    p25: float
    median: float
    p75: float
    lo_whisker: float
    hi_whisker: float

    @property
    def iqr(self) -> float:
        return self.p75 - self.p25


def box_stats(values: Iterable[float]) -> Optional[BoxStats]:
    """Quartiles and 1.5 IQR whiskers.

    A whisker ends at the most extreme data point inside its fence, but never
    inside the box.
    """
    x = np.sort(np.asarray(list(values), dtype=float))
    if x.size == 0:
        return None
    p25, med, p75 = np.quantile(x, [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    iqr = p75 - p25
    inside = x[(x >= p25 - 1.5 * iqr) & (x <= p75 + 1.5 * iqr)]
    lo = min(float(inside.min()), float(p25))
    hi = max(float(inside.max()), float(p75))
    return BoxStats(float(p25), float(med), float(p75), lo, hi)


@dataclass(frozen=True)
class MetricsSummary:
    n_nodes: int
    window_cycles: int
    delivered: int  # deliveries inside the window
    measured_packets: int  # post-warmup packets with a latency sample
    offered_load: float  # packets/node/cycle injected in the window
    throughput: float  # packets/node/cycle delivered in the window
    throughput_gbps: float
    mean_latency_cycles: Optional[float]
    mean_latency_ns: Optional[float]
    latency: Optional[BoxStats]
    collision_rate: Dict[str, float]
    status: str = "ok"

    @property
    def has_deliveries(self) -> bool:
        return self.status != NO_DELIVERIES


def summarize(result: SimResult, packet_bits: Optional[int] = None, clock_ghz: Optional[float] = None) -> MetricsSummary:
    cfg = result.config
    bits = packet_bits if packet_bits is not None else cfg.timing.packet_bits
    clock = clock_ghz if clock_ghz is not None else cfg.timing.clock_ghz
    n = cfg.n_nodes
    start = min(cfg.warmup_cycles, result.cycles - 1)
    window = max(result.cycles - start, 1)
    a = result.delivery_arrays()
    in_window = (a["delivered_cycle"] > start) & (a["delivered_cycle"] <= result.cycles)
    delivered = int(in_window.sum())
    throughput = delivered / (n * window)
    # delivered bits over elapsed ns
    gbps = delivered * bits / (window / clock)
    measured = a["created_cycle"] >= cfg.warmup_cycles
    lat = (a["delivered_cycle"] - a["created_cycle"])[measured]
    injected = max(result.injected_after_warmup, 1)
    rates = {k: result.collisions.get(k, 0) / injected for k in COLLISION_CATEGORIES}
    if lat.size == 0:
        return MetricsSummary(
            n, window, delivered, 0, result.injected_after_warmup / (n * window), throughput, gbps,
            None, None, None, rates, NO_DELIVERIES,
        )
    mean = float(lat.mean())
    return MetricsSummary(
        n, window, delivered, int(lat.size), result.injected_after_warmup / (n * window), throughput, gbps,
        mean, mean / clock, box_stats(lat), rates,
    )


def aggregate_gbps(throughput: float, n_nodes: int, packet_bits: int, clock_ghz: float) -> float:
    """packets/node/cycle to aggregate Gbps."""
    return throughput * n_nodes * packet_bits * clock_ghz


# --- sweeps ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    axis: str
    value: float
    repeat: int
    seed: int
    summary: Optional[MetricsSummary]
    error: Optional[str] = None
    saturated: bool = False


def summarize_sweep(cells: Sequence[SweepCell]) -> List[SweepRow]:
    rows = [
        SweepRow(c.axis, c.value, c.repeat, c.seed, summarize(c.result) if c.result is not None else None, c.error)
        for c in cells
    ]
    zero = zero_load_latency(rows)
    for r in rows:
        s = r.summary
        r.saturated = bool(
            zero is not None and s is not None and s.mean_latency_cycles is not None
            and s.mean_latency_cycles > SATURATION_FACTOR * zero
        )
    return rows


def zero_load_latency(rows: Sequence[SweepRow]) -> Optional[float]:
    """Mean latency at the lowest axis value that delivered anything."""
    ok = [r for r in rows if r.summary is not None and r.summary.mean_latency_cycles is not None]
    if not ok:
        return None
    lowest = min(r.value for r in ok)
    return float(np.mean([r.summary.mean_latency_cycles for r in ok if r.value == lowest]))


def by_value(rows: Sequence[SweepRow]) -> Dict[float, List[MetricsSummary]]:
    out: Dict[float, List[MetricsSummary]] = {}
    for r in rows:
        if r.summary is not None:
            out.setdefault(r.value, []).append(r.summary)
    return dict(sorted(out.items()))


def saturation_throughput(rows: Sequence[SweepRow]) -> float:
    """Highest repeat-averaged throughput over the sweep (packets/node/cycle)."""
    curve = throughput_curve(rows)
    return max(curve.values()) if curve else 0.0


def saturation_point(rows: Sequence[SweepRow]) -> Optional[float]:
    """Smallest axis value whose mean latency exceeds 10x the zero-load latency."""
    zero = zero_load_latency(rows)
    if zero is None:
        return None
    for value, summaries in by_value(rows).items():
        lats = [s.mean_latency_cycles for s in summaries if s.mean_latency_cycles is not None]
        if lats and np.mean(lats) > SATURATION_FACTOR * zero:
            return value
    return None


def throughput_curve(rows: Sequence[SweepRow]) -> Dict[float, float]:
    return {v: float(np.mean([s.throughput for s in ss])) for v, ss in by_value(rows).items()}


def latency_curve(rows: Sequence[SweepRow]) -> Dict[float, Optional[float]]:
    out = {}
    for v, ss in by_value(rows).items():
        lats = [s.mean_latency_cycles for s in ss if s.mean_latency_cycles is not None]
        out[v] = float(np.mean(lats)) if lats else None
    return out


def boxplot_over(rows: Sequence[SweepRow], metric: str = "throughput") -> Optional[BoxStats]:
    """Box statistics of one metric across every run of a sweep (e.g. over injection rates)."""
    vals = [getattr(r.summary, metric) for r in rows if r.summary is not None]
    vals = [v for v in vals if v is not None]
    return box_stats(vals)


# --- comparisons ------------------------------------------------------------------------


@dataclass(frozen=True)
class TrendReport:
    values: Tuple[float, ...]
    throughput_ratio: Dict[float, float]  # a / b
    latency_ratio: Dict[float, Optional[float]]
    a_throughput_higher: Dict[float, bool]
    a_latency_lower: Dict[float, Optional[bool]]
    saturation_ratio: float


def _ratio(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None or b is None:
        return None
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def compare_runs(a: Sequence[SweepRow], b: Sequence[SweepRow]) -> TrendReport:
    """Per-axis-value ratios of sweep ``a`` to sweep ``b``."""
    ta, tb = throughput_curve(a), throughput_curve(b)
    if set(ta) != set(tb):
        raise ValueError(f"sweeps cover different axis values: {sorted(ta)} vs {sorted(tb)}")
    la, lb = latency_curve(a), latency_curve(b)
    values = tuple(ta)
    tr = {v: _ratio(ta[v], tb[v]) for v in values}
    lr = {v: _ratio(la[v], lb[v]) for v in values}
    return TrendReport(
        values,
        tr,
        lr,
        {v: ta[v] > tb[v] for v in values},
        {v: None if lr[v] is None else la[v] < lb[v] for v in values},
        _ratio(saturation_throughput(a), saturation_throughput(b)),
    )


# --- CSV -------------------------------------------------------------------------------

RESULT_COLUMNS = (
    ["axis", "value", "repeat", "seed", "status"]
    + ["mean_latency_cycles", "mean_latency_ns", "median_latency_cycles", "p25_latency_cycles", "p75_latency_cycles"]
    + ["offered_load", "throughput_pnc", "throughput_gbps"]
    + list(COLLISION_CATEGORIES)
    + ["saturated", "error"]
)
BOXPLOT_COLUMNS = ["value", "p25", "median", "p75", "lo_whisker", "hi_whisker"]


def write_header(fh: TextIO, lines: Iterable[str]) -> None:
    for line in lines:
        fh.write(f"# {line}\n")


def result_row(row: SweepRow, counts: Optional[Mapping[str, int]] = None) -> List:
    s = row.summary
    if s is None:
        return [row.axis, row.value, row.repeat, row.seed, "error"] + [""] * (len(RESULT_COLUMNS) - 7) + [
            row.saturated, row.error or "",
        ]
    lat = s.latency
    fmt = lambda v: "" if v is None else repr(float(v))
    counts = counts or {}
    return (
        [row.axis, row.value, row.repeat, row.seed, s.status]
        + [fmt(s.mean_latency_cycles), fmt(s.mean_latency_ns)]
        + [fmt(lat.median if lat else None), fmt(lat.p25 if lat else None), fmt(lat.p75 if lat else None)]
        + [repr(s.offered_load), repr(s.throughput), repr(s.throughput_gbps)]
        + [counts.get(k, 0) for k in COLLISION_CATEGORIES]
        + [row.saturated, ""]
    )


def write_results_csv(fh: TextIO, rows: Sequence[SweepRow], cells: Optional[Sequence[SweepCell]] = None, header=()) -> None:
    write_header(fh, header)
    w = csv.writer(fh)
    w.writerow(RESULT_COLUMNS)
    for i, row in enumerate(rows):
        counts = cells[i].result.collisions if cells is not None and cells[i].result is not None else None
        w.writerow(result_row(row, counts))


def boxplot_table(rows: Sequence[SweepRow], metric: str = "mean_latency_cycles") -> List[Tuple[float, BoxStats]]:
    """Per axis value, box statistics of ``metric`` over repeats."""
    out = []
    for v, ss in by_value(rows).items():
        b = box_stats([getattr(s, metric) for s in ss if getattr(s, metric) is not None])
        if b is not None:
            out.append((v, b))
    return out


def write_boxplot_csv(fh: TextIO, table: Sequence[Tuple[float, BoxStats]], header=()) -> None:
    write_header(fh, header)
    w = csv.writer(fh)
    w.writerow(BOXPLOT_COLUMNS)
    for v, b in table:
        w.writerow([v, b.p25, b.median, b.p75, b.lo_whisker, b.hi_whisker])


def summary_dict(s: MetricsSummary) -> Dict:
    d = asdict(s)
    d["latency"] = asdict(s.latency) if s.latency is not None else None
    return d
