import csv
import json
import os

import pytest

from trmac import cli
from trmac import config as cf
from trmac import engine as en


def _data_rows(path):
    with open(path) as fh:
        return list(csv.reader(l for l in fh if not l.startswith("#")))


def _header(path):
    with open(path) as fh:
        return [l[2:].rstrip("\n") for l in fh if l.startswith("# ")]


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


# --- config --------------------------------------------------------------------------


def test_unknown_key_lists_every_valid_key():
    with pytest.raises(cf.ConfigError) as info:
        cf.build_config({"traffic.burstiness": 1})
    msg = str(info.value)
    assert "traffic.burstiness" in msg
    for key in cf.valid_keys():
        assert key in msg


def test_protocol_section_maps_onto_sim_and_backoff():
    cfg = cf.build_config({"protocol.name": "brs", "protocol.npt": 2, "protocol.initial_window": 8})
    assert cfg.protocol == "brs" and cfg.npt == 2 and cfg.backoff.initial_window == 8


def test_config_round_trips_through_yaml(tmp_path):
    cfg = cf.build_config({"sim.n_nodes": 16, "traffic.sigma": 0.1, "phy.mode": "energy", "channel.seed": 4})
    path = tmp_path / "c.yaml"
    path.write_text(cf.dump_yaml(cfg))
    assert cf.load_config(str(path)) == cfg


def test_precedence_file_then_overrides_then_seed(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("sim:\n  seed: 1\n  n_nodes: 16\ntraffic:\n  sigma: 2.0\n")
    assert cf.load_config(str(path)).seed == 1
    cfg = cf.load_config(str(path), ["sim.seed=2", "traffic.sigma=0.3"])
    assert cfg.seed == 2 and cfg.traffic.sigma == 0.3 and cfg.n_nodes == 16
    assert cf.load_config(str(path), ["sim.seed=2"], seed=3).seed == 3


def test_hurst_below_half_warns_and_clamps():
    with pytest.warns(UserWarning, match="0.5"):
        cfg = cf.build_config({"traffic.hurst": 0.3})
    assert cfg.traffic.hurst == 0.5


@pytest.mark.parametrize("h", [0.0, -0.2, 1.2, "x"])
def test_hurst_outside_unit_interval_rejected(h):
    with pytest.raises(cf.ConfigError):
        cf.build_config({"traffic.hurst": h})


@pytest.mark.parametrize("text", ["sim.n_nodes", "sim.n_nodes=[1,"])
def test_bad_override_syntax(text):
    with pytest.raises(cf.ConfigError):
        cf.load_config(None, [text])


def test_values_coerced_to_field_types():
    cfg = cf.load_config(None, ["phy.variance_scale=1e-6", "sim.max_cycles=2000.0", "channel.max_taps=", "sim.drain=true"])
    assert cfg.phy.variance_scale == 1e-6 and isinstance(cfg.phy.variance_scale, float)
    assert cfg.max_cycles == 2000 and isinstance(cfg.max_cycles, int)
    assert cfg.channel.max_taps is None and cfg.drain is True


@pytest.mark.parametrize("text", ["sim.max_cycles=12.5", "sim.max_cycles=lots", "traffic.sigma=[1]", "sim.drain=3", "sim.seed="])
def test_uncoercible_values_rejected(text):
    with pytest.raises(cf.ConfigError):
        cf.load_config(None, [text])


def test_bad_value_becomes_config_error():
    with pytest.raises(cf.ConfigError):
        cf.build_config({"sim.n_nodes": 1})


def test_header_embeds_every_key():
    lines = cf.header_lines(en.SimConfig(), ["command=run"])
    assert lines[0] == "command=run"
    keys = {l.split("=", 1)[0] for l in lines[1:]}
    assert keys == set(cf.valid_keys())


# --- CLI --------------------------------------------------------------------------------


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env-out"))
    return tmp_path


SMALL = ["--set", "sim.n_nodes=8", "--set", "sim.max_cycles=600", "--set", "sim.warmup_cycles=100", "--set", "protocol.npt=2"]


def test_run_writes_summary_with_header(out, capsys):
    assert cli.main(["run", *SMALL, "--seed", "4"]) == 0
    d = out / "env-out"
    header = _header(d / "summary.csv")
    assert "command=run" in header and "seed=4" in header and "sim.seed=4" in header
    rows = _data_rows(d / "summary.csv")
    assert rows[0][:4] == ["axis", "value", "repeat", "seed"] and rows[1][3] == "4"
    assert _data_rows(d / "deliveries.csv")[0][0] == "packet_id"
    assert "throughput" in capsys.readouterr().out


def test_run_with_builtin_defaults(out):
    assert cli.main(["run", "--out", str(out / "d"), "--set", "sim.max_cycles=3000"]) == 0
    header = _header(out / "d" / "summary.csv")
    for item in ("sim.n_nodes=64", "protocol.npt=3", "traffic.hurst=1.0", "traffic.sigma=0.5"):
        assert item in header


def test_single_value_sweep_matches_run(out):
    assert cli.main(["run", *SMALL, "--out", str(out / "a")]) == 0
    assert cli.main(["sweep", *SMALL, "--out", str(out / "b"), "--axis", "injection_rate", "--values", "0.01"]) == 0
    run_rows = _data_rows(out / "a" / "summary.csv")
    sweep_rows = _data_rows(out / "b" / "results.csv")
    assert run_rows == sweep_rows
    assert _data_rows(out / "b" / "boxplot.csv")[0] == ["value", "p25", "median", "p75", "lo_whisker", "hi_whisker"]


def test_sweep_jobs_do_not_change_results(out):
    args = ["sweep", *SMALL, "--axis", "sigma", "--values", "0.1,10", "--repeats", "2"]
    assert cli.main([*args, "--out", str(out / "j1")]) == 0
    assert cli.main([*args, "--out", str(out / "j2"), "--jobs", "2"]) == 0
    assert _data_rows(out / "j1" / "results.csv") == _data_rows(out / "j2" / "results.csv")


def test_sweep_box_over_injection_rates(out):
    args = ["sweep", *SMALL, "--out", str(out), "--axis", "hurst", "--values", "0.5,1", "--injection-rates", "0.001,0.01,0.1"]
    assert cli.main(args) == 0
    box = _data_rows(out / "boxplot.csv")
    assert [r[0] for r in box[1:]] == ["0.5", "1.0"]
    assert len(_data_rows(out / "results.csv")) == 1 + 6


def test_npt_exact_matches_sampled_at_full_percentile(out):
    base = ["npt", "--set", "sim.n_nodes=8", "--set", "phy.variance_scale=3e-8"]
    assert cli.main([*base, "--out", str(out / "e"), "--mode", "exact"]) == 0
    assert cli.main([*base, "--out", str(out / "s"), "--mode", "sampled", "--percentile", "100", "--samples", "200000"]) == 0

    def report(path):
        lines = [l for l in open(path) if l.startswith("# mode=")]
        return lines[0].split(" ", 2)[2], _data_rows(path)

    exact, sampled = report(out / "e" / "npt.csv"), report(out / "s" / "npt.csv")
    assert "npt=3" in exact[0]
    assert exact == sampled


def test_thresholds_and_channel_commands(out, capsys):
    small = ["--set", "sim.n_nodes=6", "--out", str(out)]
    assert cli.main(["thresholds", *small]) == 0
    assert len(_data_rows(out / "thresholds.csv")) == 1 + 30
    assert cli.main(["channel-gen", *small]) == 0
    assert (out / "channel.cir").exists()
    assert cli.main(["channel-inspect", *small, "--cir", str(out / "channel.cir")]) == 0
    rows = _data_rows(out / "focusing.csv")
    assert len(rows) == 1 + 30
    assert "strictly strongest" in capsys.readouterr().out


def test_cir_file_drives_a_run(out):
    assert cli.main(["channel-gen", "--set", "sim.n_nodes=6", "--out", str(out)]) == 0
    cir = str(out / "channel.cir")
    args = ["run", "--out", str(out / "r"), "--set", "sim.n_nodes=6", "--set", f"channel.file={cir}",
            "--set", "phy.mode=energy", "--set", "protocol.npt=2", "--set", "sim.max_cycles=300", "--set", "sim.warmup_cycles=0"]
    assert cli.main(args) == 0


def test_trace_replay_and_saved_arrivals(out):
    trace = out / "arrivals.csv"
    assert cli.main(["run", *SMALL, "--out", str(out / "a"), "--save-arrivals", str(trace)]) == 0
    assert cli.main(["trace-replay", *SMALL, "--out", str(out / "b"), str(trace)]) == 0
    assert _data_rows(out / "a" / "deliveries.csv") == _data_rows(out / "b" / "deliveries.csv")


def test_fsm_trace_file(out):
    path = out / "fsm.log"
    assert cli.main(["run", *SMALL, "--out", str(out), "--trace", str(path)]) == 0
    first = path.read_text().splitlines()[0].split(" ")
    assert first[0].isdigit() and first[1].isdigit()


# --- failures ---------------------------------------------------------------------------------


def test_unknown_key_exit_code(out, capsys):
    assert cli.main(["run", "--set", "sim.bogus=1"]) == cli.EXIT_CONFIG
    err = _error(capsys)
    assert err["error"] == "config" and "sim.n_nodes" in err["message"]


def test_missing_config_file(out, capsys):
    assert cli.main(["run", "--config", str(out / "nope.yaml")]) == cli.EXIT_INPUT
    assert _error(capsys)["error"] == "input"


def test_bad_trace_file(out, capsys):
    bad = out / "t.csv"
    bad.write_text("cycle,src\n")
    assert cli.main(["trace-replay", *SMALL, str(bad)]) == cli.EXIT_INPUT
    assert cli.main(["trace-replay", *SMALL, str(out / "missing.csv")]) == cli.EXIT_INPUT


def test_trace_needing_more_nodes(out, capsys):
    t = out / "t.csv"
    t.write_text("cycle,src,dst,packet_id\n0,0,12,0\n")
    assert cli.main(["trace-replay", *SMALL, str(t)]) == cli.EXIT_CONFIG


def test_unwritable_output(out, capsys):
    blocker = out / "file"
    blocker.write_text("x")
    assert cli.main(["run", *SMALL, "--out", str(blocker / "sub")]) == cli.EXIT_OUTPUT
    assert _error(capsys)["error"] == "output"


def test_bad_cir_file(out, capsys):
    bad = out / "bad.cir"
    bad.write_text("CIR v9\n")
    assert cli.main(["channel-inspect", "--out", str(out), "--cir", str(bad)]) == cli.EXIT_INPUT


def test_exact_npt_on_large_network_is_a_config_error(out, capsys):
    assert cli.main(["npt", "--set", "sim.n_nodes=16", "--out", str(out), "--mode", "exact"]) == cli.EXIT_CONFIG


def test_hurst_warning_reaches_stderr(out, capsys):
    assert cli.main(["run", *SMALL, "--out", str(out), "--set", "traffic.hurst=0.3"]) == 0
    assert "warning" in capsys.readouterr().err


def test_all_failed_sweep_is_a_simulation_error(out, capsys):
    code = cli.main(["sweep", *SMALL, "--out", str(out), "--axis", "npt", "--values", "40"])
    assert code == cli.EXIT_SIMULATION
    assert os.path.exists(out / "results.csv")
