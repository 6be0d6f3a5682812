import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trmac import traffic as tr
from trmac.protocols import Packet


def _collect(gen, cycles):
    return [p for c in range(cycles) for p in gen.arrivals(c)]


# --- spatial weights -----------------------------------------------------------------


def test_weights_are_distributions_and_deterministic():
    a = tr.build_spatial_weights(32, 0.5, seed=4)
    b = tr.build_spatial_weights(32, 0.5, seed=4)
    np.testing.assert_array_equal(a.source, b.source)
    assert a.source.sum() == pytest.approx(1.0)
    assert np.all(a.source > 0)
    d = a.dest
    assert np.all(np.diag(d) == 0)
    np.testing.assert_allclose(d.sum(axis=1), 1.0)


@pytest.mark.parametrize(
    "role, weighted_source, weighted_target",
    [("source", True, False), ("destination", False, True), ("both", True, True)],
)
def test_spatial_role_selects_weighted_side(role, weighted_source, weighted_target):
    w = tr.build_spatial_weights(16, 0.5, seed=1, role=role)
    flat = np.full(16, 1 / 16)
    assert np.allclose(w.source, flat) != weighted_source
    assert np.allclose(w.target, flat) != weighted_target


def test_high_sigma_weights_nearly_uniform():
    cvs = [np.std(w) / np.mean(w) for w in (tr.build_spatial_weights(64, 10.0, seed=s).source for s in range(100))]
    assert np.mean(cvs) < 0.15


def test_gini_decreases_with_sigma_on_average():
    sigmas = [0.1, 0.5, 1, 5, 10]
    g = [np.mean([tr.gini(tr.build_spatial_weights(64, s, seed=k).source) for k in range(20)]) for s in sigmas]
    assert all(x >= y for x, y in zip(g, g[1:]))
    assert g[0] > 0.9 and g[-1] < 0.1


def test_gini_oracle():
    assert tr.gini([1, 1, 1, 1]) == 0.0
    # one of four holds everything: (n - 1) / n
    assert tr.gini([0, 0, 0, 4]) == pytest.approx(0.75)
    assert tr.gini([]) == 0.0


def test_grid_mapping_builds_a_bump():
    w = tr.build_spatial_weights(64, 0.1, seed=0, mapping="grid").source
    assert w.max() / np.median(w) > 10


@pytest.mark.parametrize("kwargs", [dict(sigma=0), dict(mapping="ring"), dict(role="sink")])
def test_weight_arguments_validated(kwargs):
    args = dict(n_nodes=8, sigma=1.0) | kwargs
    with pytest.raises(ValueError):
        tr.build_spatial_weights(**args)


# --- config --------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(injection_rate=-0.1), dict(hurst=0.4), dict(hurst=1.1), dict(sigma=0), dict(n_nodes=1), dict(spatial_role="x")],
)
def test_traffic_config_validation(kwargs):
    with pytest.raises(ValueError):
        tr.TrafficConfig(**kwargs)


def test_pareto_shape_clamped_near_one():
    assert tr.TrafficConfig(hurst=0.7).pareto_shape == pytest.approx(1.6)
    assert tr.TrafficConfig(hurst=1.0).pareto_shape == pytest.approx(3 - 2 * tr.MAX_EFFECTIVE_HURST)


# --- arrivals -----------------------------------------------------------------------------


def test_zero_injection_is_always_empty():
    gen = tr.TrafficGenerator(tr.TrafficConfig(injection_rate=0.0, n_nodes=8))
    assert _collect(gen, 2000) == []


def test_generator_is_deterministic_per_seed():
    cfg = tr.TrafficConfig(injection_rate=0.05, n_nodes=16, seed=7)
    a = _collect(tr.TrafficGenerator(cfg), 3000)
    b = _collect(tr.TrafficGenerator(cfg), 3000)
    c = _collect(tr.TrafficGenerator(tr.TrafficConfig(injection_rate=0.05, n_nodes=16, seed=8)), 3000)
    assert a == b and a != c


def test_cycles_must_be_consecutive():
    gen = tr.TrafficGenerator(tr.TrafficConfig(n_nodes=4))
    gen.arrivals(0)
    with pytest.raises(ValueError, match="consecutive"):
        gen.arrivals(2)


@settings(max_examples=20)
@given(st.integers(0, 1000), st.sampled_from([0.5, 0.75, 1.0]))
def test_packets_are_well_formed(seed, hurst):
    cfg = tr.TrafficConfig(injection_rate=0.05, hurst=hurst, n_nodes=8, seed=seed)
    pkts = _collect(tr.TrafficGenerator(cfg, block=64), 300)
    assert [p.id for p in pkts] == list(range(len(pkts)))
    for p in pkts:
        assert p.src != p.dst and 0 <= p.dst < 8


@pytest.mark.parametrize("hurst", [0.5, 0.7, 1.0])
def test_long_run_injection_rate(hurst):
    cfg = tr.TrafficConfig(injection_rate=0.02, hurst=hurst, n_nodes=16, seed=2)
    counts = tr.arrival_series(cfg, 200_000)
    assert counts.sum() / counts.size == pytest.approx(0.02, rel=0.05 if hurst < 1 else 0.1)


def test_source_role_load_follows_weights():
    cfg = tr.TrafficConfig(injection_rate=0.05, hurst=0.5, sigma=0.5, n_nodes=16, seed=3)
    load = tr.arrival_series(cfg, 50_000).sum(axis=1)
    w = tr.build_spatial_weights(16, 0.5, seed=3).source
    np.testing.assert_allclose(load / load.sum(), w, atol=0.01)


def test_destination_role_spreads_sources_evenly():
    cfg = tr.TrafficConfig(injection_rate=0.05, hurst=0.5, sigma=0.2, n_nodes=8, seed=3, spatial_role="destination")
    pkts = _collect(tr.TrafficGenerator(cfg), 20_000)
    src = np.bincount([p.src for p in pkts], minlength=8)
    dst = np.bincount([p.dst for p in pkts], minlength=8)
    assert src.std() / src.mean() < 0.1
    assert tr.gini(dst) > 0.4


def test_saturated_nodes_reported():
    cfg = tr.TrafficConfig(injection_rate=1.0, hurst=1.0, sigma=0.1, n_nodes=64, n_sources=4)
    assert tr.TrafficGenerator(cfg).saturated_nodes.size > 0


# --- Hurst estimation --------------------------------------------------------------------


def test_hurst_of_bernoulli_stream():
    x = np.random.default_rng(0).random(200_000) < 0.1
    assert tr.estimate_hurst(x) == pytest.approx(0.5, abs=0.1)


def test_hurst_degenerate_and_short_series():
    assert tr.estimate_hurst(np.ones(1000)) is tr.DEGENERATE
    with pytest.raises(ValueError, match="too short"):
        tr.estimate_hurst(np.arange(10))


@pytest.mark.parametrize("hurst", [0.5, 0.8])
def test_generator_hurst_self_consistency(hurst):
    cfg = tr.TrafficConfig(injection_rate=0.1, hurst=hurst, n_nodes=8, seed=3)
    series = tr.arrival_series(cfg, 200_000).sum(axis=0)
    assert tr.estimate_hurst(series, min_block=10) == pytest.approx(hurst, abs=0.1)


# --- traces -----------------------------------------------------------------------------


def test_trace_round_trip():
    gen = tr.RecordingSource(tr.TrafficGenerator(tr.TrafficConfig(injection_rate=0.05, n_nodes=8, seed=1)))
    _collect(gen, 500)
    text = tr.write_trace(gen.packets)
    replay = tr.TraceReplay.from_csv(io.StringIO("# comment\n" + text))
    assert _collect(replay, 500) == gen.packets
    assert replay.n_nodes_required <= 8


@pytest.mark.parametrize(
    "text, message",
    [
        ("a,b\n", "header"),
        ("cycle,src,dst,packet_id\n0,1,x,0\n", "row 2"),
        ("cycle,src,dst,packet_id\n0,1,2,0\n1,2,1,0\n", "duplicate"),
        ("cycle,src,dst,packet_id\n-1,1,2,0\n", "negative"),
    ],
)
def test_malformed_traces(text, message):
    with pytest.raises(ValueError, match=message):
        tr.TraceReplay.from_csv(text)


def test_replay_detects_skipped_cycles():
    replay = tr.TraceReplay([Packet(0, 0, 1, 3)])
    with pytest.raises(ValueError, match="skipped"):
        replay.arrivals(5)
