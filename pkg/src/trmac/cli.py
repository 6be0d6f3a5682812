"""Command-line entry point: ``trmac <subcommand> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import math
import os
import sys
import warnings
from typing import List, Optional, Sequence

import numpy as np

from . import channel as ch
from . import metrics, phy
from .config import ConfigError, header_lines, load_config
from .engine import (
    SWEEP_AXES,
    SimConfig,
    Simulation,
    SimulationInvariantError,
    SweepCell,
    build_channel,
    default_arrivals,
    run_sweep,
)
from .traffic import RecordingSource, TraceReplay, write_trace

OUT_ENV = "TRMAC_OUT_DIR"
DEFAULT_OUT = "trmac-out"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_OUTPUT = 4
EXIT_SIMULATION = 5


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


# --- argument parsing -------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. traffic.sigma=0.1 (repeatable)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--seed", type=int, help="simulation seed; wins over the file and --set")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")
    p.add_argument("--trace", help="write the per-slot FSM trace to this file ('-' for stdout)")
    p.add_argument("-v", "--verbose", action="store_true", help="print the resolved config to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="trmac", description="Slotted simulator for time-reversal wireless NoC MACs")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="one simulation and its summary")
    run.add_argument("--save-arrivals", metavar="FILE", help="also write the generated traffic as a trace CSV")

    sw = sub.add_parser("sweep", parents=[common], help="seeded runs over one axis")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    sw.add_argument("--repeats", type=int, default=1)
    sw.add_argument("--injection-rates", help="comma-separated rates; box statistics are taken over these per axis value")
    sw.add_argument("--box-metric", default="throughput", choices=("throughput", "mean_latency_cycles"))

    npt = sub.add_parser("npt", parents=[common], help="NPT report for the configured channel")
    npt.add_argument("--mode", choices=("exact", "sampled"), default=None)
    npt.add_argument("--percentile", type=float, default=None)
    npt.add_argument("--samples", type=int, default=None)

    sub.add_parser("thresholds", parents=[common], help="per-link detection thresholds")

    gen = sub.add_parser("channel-gen", parents=[common], help="synthesize a CIR file")
    gen.add_argument("--file", default=None, help="CIR output path (default <out>/channel.cir)")

    ins = sub.add_parser("channel-inspect", parents=[common], help="focusing metrics per link")
    ins.add_argument("--cir", help="CIR file to inspect instead of the configured channel")

    rep = sub.add_parser("trace-replay", parents=[common], help="run against a recorded traffic trace")
    rep.add_argument("trace_file", help="CSV with cycle,src,dst,packet_id")
    return parser


# --- helpers ---------------------------------------------------------------------------------


def _out_dir(args) -> str:
    path = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError("output", f"cannot create output directory {path}: {exc}", EXIT_OUTPUT) from None
    return path


def _write(path: str, writer) -> str:
    try:
        with open(path, "w", newline="") as fh:
            writer(fh)
    except OSError as exc:
        raise CliError("output", f"cannot write {path}: {exc}", EXIT_OUTPUT) from None
    return path


def _floats(text: str, what: str) -> List[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError("config", f"{what} must be comma-separated numbers, got {text!r}", EXIT_CONFIG) from None
    if not vals:
        raise CliError("config", f"{what} is empty", EXIT_CONFIG)
    return vals


def _header(cfg: SimConfig, args, extra: Sequence[str] = ()) -> List[str]:
    return header_lines(cfg, [f"command={args.command}", f"seed={cfg.seed}", *extra])


@contextlib.contextmanager
def _trace_stream(path: Optional[str]):
    if path is None:
        yield None
    elif path == "-":
        yield sys.stdout
    else:
        try:
            fh = open(path, "w")
        except OSError as exc:
            raise CliError("output", f"cannot write trace {path}: {exc}", EXIT_OUTPUT) from None
        with fh:
            yield fh


def _print_summary(s: metrics.MetricsSummary, npt: int, result) -> None:
    print(f"npt: {npt}")
    print(f"status: {s.status}")
    print(f"offered_load: {s.offered_load:.6g} packets/node/cycle")
    print(f"throughput: {s.throughput:.6g} packets/node/cycle ({s.throughput_gbps:.6g} Gbps aggregate)")
    if s.mean_latency_cycles is not None:
        print(f"mean_latency: {s.mean_latency_cycles:.6g} cycles ({s.mean_latency_ns:.6g} ns)")
        print(f"latency p25/median/p75: {s.latency.p25:.6g} / {s.latency.median:.6g} / {s.latency.p75:.6g}")
    print("collisions: " + ", ".join(f"{k}={v}" for k, v in result.collisions.items()))


def _simulate(cfg: SimConfig, args, arrivals=None):
    with _trace_stream(args.trace) as stream:
        sim = Simulation(cfg, arrivals=arrivals, trace=stream)
        return sim, sim.run()


def _write_single(out: str, cfg: SimConfig, args, result, extra=()) -> metrics.MetricsSummary:
    row = metrics.summarize_sweep([_as_cell(cfg, result)])[0]
    header = _header(cfg, args, [f"npt_effective={result.npt}", *extra])
    _write(os.path.join(out, "summary.csv"), lambda fh: metrics.write_results_csv(fh, [row], [_as_cell(cfg, result)], header))

    def deliveries(fh):
        metrics.write_header(fh, header)
        w = csv.writer(fh)
        w.writerow(["packet_id", "src", "dst", "created_cycle", "delivered_cycle", "retries"])
        w.writerows(result.delivered)

    _write(os.path.join(out, "deliveries.csv"), deliveries)
    return row.summary


def _as_cell(cfg, result):
    return SweepCell("injection_rate", cfg.traffic.injection_rate, 0, cfg.seed, result)


# --- subcommands ------------------------------------------------------------------------------


def cmd_run(cfg: SimConfig, args) -> int:
    out = _out_dir(args)
    source = RecordingSource(default_arrivals(cfg)) if args.save_arrivals else None
    _, result = _simulate(cfg, args, arrivals=source)
    summary = _write_single(out, cfg, args, result)
    if source is not None:
        _write(args.save_arrivals, lambda fh: (metrics.write_header(fh, _header(cfg, args)), write_trace(source.packets, fh)))
    _print_summary(summary, result.npt, result)
    return EXIT_OK


def cmd_trace_replay(cfg: SimConfig, args) -> int:
    try:
        with open(args.trace_file) as fh:
            replay = TraceReplay.from_csv(fh, cfg.timing.packet_bits, cfg.timing.preamble_bits)
    except OSError as exc:
        raise CliError("input", f"cannot read trace {args.trace_file}: {exc}", EXIT_INPUT) from None
    except ValueError as exc:
        raise CliError("input", f"{args.trace_file}: {exc}", EXIT_INPUT) from None
    if replay.n_nodes_required > cfg.n_nodes:
        raise CliError("config", f"trace needs {replay.n_nodes_required} nodes but sim.n_nodes={cfg.n_nodes}", EXIT_CONFIG)
    out = _out_dir(args)
    _, result = _simulate(cfg, args, arrivals=replay)
    summary = _write_single(out, cfg, args, result, [f"trace={args.trace_file}"])
    _print_summary(summary, result.npt, result)
    return EXIT_OK


def cmd_sweep(cfg: SimConfig, args) -> int:
    values = _floats(args.values, "--values")
    if args.axis in ("n_nodes", "npt", "f_n"):
        values = [int(v) for v in values]
    out = _out_dir(args)
    header = _header(cfg, args, [f"axis={args.axis}", f"values={values}", f"repeats={args.repeats}"])
    if args.injection_rates:
        rates = _floats(args.injection_rates, "--injection-rates")
        rows, cells, table = [], [], []
        for v in values:
            inner = cfg.with_value(args.axis, v)
            c = run_sweep(inner, "injection_rate", rates, args.repeats, args.jobs)
            r = metrics.summarize_sweep(c)
            for row in r:
                row.axis = f"{args.axis}={v}|injection_rate"
            rows += r
            cells += c
            b = metrics.boxplot_over(r, args.box_metric)
            if b is not None:
                table.append((v, b))
        header.append(f"injection_rates={rates}")
    else:
        cells = run_sweep(cfg, args.axis, values, args.repeats, args.jobs)
        rows = metrics.summarize_sweep(cells)
        table = metrics.boxplot_table(rows, args.box_metric)
    header.append(f"box_metric={args.box_metric}")
    _write(os.path.join(out, "results.csv"), lambda fh: metrics.write_results_csv(fh, rows, cells, header))
    _write(os.path.join(out, "boxplot.csv"), lambda fh: metrics.write_boxplot_csv(fh, table, header))
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"cell {r.axis}={r.value} repeat={r.repeat} failed: {r.error}", file=sys.stderr)
    if not args.injection_rates:
        print(f"saturation_throughput: {metrics.saturation_throughput(rows):.6g} packets/node/cycle")
        point = metrics.saturation_point(rows)
        print(f"saturation_point: {point if point is not None else 'not reached'}")
    print(f"cells: {len(rows)} ({len(failed)} failed)")
    return EXIT_SIMULATION if failed and len(failed) == len(rows) else EXIT_OK


def _bank(cfg: SimConfig) -> ch.TrFilterBank:
    try:
        return build_channel(cfg.n_nodes, cfg.channel)
    except OSError as exc:
        raise CliError("input", f"cannot read channel file: {exc}", EXIT_INPUT) from None
    except ch.CirFormatError as exc:
        raise CliError("input", f"bad channel file: {exc}", EXIT_INPUT) from None


def cmd_npt(cfg: SimConfig, args) -> int:
    bank = _bank(cfg)
    thr = phy.compute_thresholds(bank, phy.NoiseModel(cfg.phy.noise_energy))
    mode = args.mode or cfg.phy.npt_mode or ("exact" if cfg.n_nodes <= 8 else "sampled")
    percentile = args.percentile if args.percentile is not None else (100.0 if mode == "exact" else cfg.phy.percentile)
    try:
        report = phy.npt_report(
            bank, thr, cfg.phy.ber_limit, mode=mode, n_samples=args.samples or cfg.phy.n_samples,
            percentile=percentile, variance_scale=cfg.phy.variance_scale, seed=cfg.channel.seed,
        )
    except ValueError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG) from None
    out = _out_dir(args)
    header = _header(cfg, args, [f"npt_mode={mode}", f"percentile={percentile}"])
    _write(os.path.join(out, "npt.csv"), lambda fh: (metrics.write_header(fh, header), fh.write(report.to_csv())))
    print(f"npt: {report.npt}{' (flagged: no k meets the BER limit)' if report.flagged else ''}")
    return EXIT_OK


def cmd_thresholds(cfg: SimConfig, args) -> int:
    bank = _bank(cfg)
    thr = phy.compute_thresholds(bank, phy.NoiseModel(cfg.phy.noise_energy))
    out = _out_dir(args)
    _write(os.path.join(out, "thresholds.csv"), lambda fh: (metrics.write_header(fh, _header(cfg, args)), fh.write(phy.dump_thresholds(thr))))
    unusable = thr.unusable_links()
    print(f"links: {cfg.n_nodes * (cfg.n_nodes - 1)}, unusable: {len(unusable)}")
    return EXIT_OK


def cmd_channel_gen(cfg: SimConfig, args) -> int:
    c = cfg.channel
    geometry = ch.grid_geometry(cfg.n_nodes, chiplet_mm=c.chiplet_mm)
    try:
        cirs = ch.synthesize_cir(geometry, c.params(), seed=c.seed, sample_period=c.sample_period)
    except ValueError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG) from None
    path = args.file or os.path.join(_out_dir(args), "channel.cir")
    _write(path, lambda fh: (metrics.write_header(fh, _header(cfg, args)), ch.dump_cir_matrix(cirs, fh)))
    print(f"wrote {path} ({cfg.n_nodes} nodes, {len(cirs)} links)")
    return EXIT_OK


def cmd_channel_inspect(cfg: SimConfig, args) -> int:
    if args.cir:
        cfg = dataclasses.replace(cfg, channel=dataclasses.replace(cfg.channel, file=args.cir))
        try:
            with open(args.cir) as fh:
                n = ch.load_cir_matrix(fh).n_nodes
        except OSError as exc:
            raise CliError("input", f"cannot read {args.cir}: {exc}", EXIT_INPUT) from None
        except ch.CirFormatError as exc:
            raise CliError("input", f"bad channel file: {exc}", EXIT_INPUT) from None
        cfg = dataclasses.replace(cfg, n_nodes=n)
    bank = _bank(cfg)
    n = bank.n_nodes
    rows = []
    focused_ok = 0
    for tx in range(n):
        for rx in range(n):
            if tx == rx:
                continue
            m = ch.focusing_metrics(bank, (tx, rx))
            leaks = [bank.leaked(tx, rx, o) for o in range(n) if o not in (tx, rx)]
            worst = max(leaks) if leaks else 0.0
            ok = bank.focused(tx, rx) > worst
            focused_ok += ok
            rows.append([tx, rx, bank.focused(tx, rx), worst, m.temporal_focusing_gain, m.spatial_contrast_db, int(ok)])
    out = _out_dir(args)

    def writer(fh):
        metrics.write_header(fh, _header(cfg, args))
        w = csv.writer(fh)
        w.writerow(["tx", "rx", "focused_energy", "worst_leak", "temporal_gain", "spatial_contrast_db", "focused_strictly"])
        w.writerows(rows)

    _write(os.path.join(out, "focusing.csv"), writer)
    contrasts = [r[5] for r in rows if r[5] is not None and math.isfinite(r[5])]
    print(f"links: {len(rows)}, intended receiver strictly strongest: {focused_ok / max(len(rows), 1):.2%}")
    if contrasts:
        print(f"spatial contrast dB: median {np.median(contrasts):.3g}, min {min(contrasts):.3g}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "npt": cmd_npt,
    "thresholds": cmd_thresholds,
    "channel-gen": cmd_channel_gen,
    "channel-inspect": cmd_channel_inspect,
    "trace-replay": cmd_trace_replay,
}


def _report(category: str, message: str) -> None:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                cfg = load_config(args.config, args.overrides, args.seed)
            except OSError as exc:
                raise CliError("input", f"cannot read config: {exc}", EXIT_INPUT) from None
            except ConfigError as exc:
                raise CliError("config", str(exc), EXIT_CONFIG) from None
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        if args.verbose:
            for line in header_lines(cfg):
                print(f"# {line}", file=sys.stderr)
        if args.jobs < 1:
            raise CliError("config", "--jobs must be >= 1", EXIT_CONFIG)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        _report(exc.category, str(exc))
        return exc.code
    except SimulationInvariantError as exc:
        _report("simulation", str(exc))
        return EXIT_SIMULATION
    except (ValueError, ConfigError) as exc:
        _report("config", str(exc))
        return EXIT_CONFIG
    except Exception as exc:  # still machine-readable, but a bug
        _report("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
