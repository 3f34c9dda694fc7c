"""Test the synthetic feed generator"""

import json

import numpy as np
import pytest

from tensortrack.ingest import (
    MetricKind,
    diff_counters,
    format_stats,
    parse_stats,
    parse_stats_file,
    read_job_events,
)
from tensortrack.path_utils import stats_filename
from tensortrack.synth import (
    MAX_METRICS,
    AnomalyKind,
    AnomalySpec,
    SynthConfig,
    SynthConfigError,
    gen_feed,
    host_names,
    plant_anomalies,
    table_schema,
    write_feed,
)


@pytest.fixture
def small_config():
    return SynthConfig(n_nodes=4, n_slices_total=36, n_metrics=6, window_len=6, seed=3)


def test_defaults():
    cfg = SynthConfig()
    assert (cfg.n_nodes, cfg.n_slices_total, cfg.n_metrics, cfg.window_len) == (16, 720, 12, 18)
    assert cfg.ranks == (2, 2, 2)
    assert cfg.n_windows == 40


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_nodes": 0},
        {"n_metrics": 0},
        {"n_metrics": MAX_METRICS + 1},
        {"window_len": 1},
        {"n_slices_total": 10, "window_len": 18},
        {"ranks": (2, 2)},
        {"ranks": (9, 2, 2)},
        {"ranks": (2, 19, 2)},
        {"n_job_groups": 0},
        {"noise_sigma": -0.1},
        {"seed": -1},
        {"period": 0},
        {"anomalies": [{"window": 40, "kind": "node_spike", "magnitude": 1.0}]},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(SynthConfigError):
        SynthConfig(**kwargs)


def test_anomaly_spec_validation():
    with pytest.raises(SynthConfigError):
        AnomalySpec(0, "meteor", 1.0)
    with pytest.raises(SynthConfigError):
        AnomalySpec(0, "node_spike", -1.0)


def test_config_dict():
    cfg = SynthConfig(
        n_nodes=8,
        anomalies=(AnomalySpec(3, AnomalyKind.METRIC_BURST, 4.0),),
        seed=11,
    )
    data = cfg.to_dict()
    assert data["anomalies"] == [{"window": 3, "kind": "metric_burst", "magnitude": 4.0}]
    assert data["ranks"] == [2, 2, 2]
    assert SynthConfig.from_dict(data) == cfg


def test_config_from_dict_unknown_key():
    with pytest.raises(SynthConfigError, match="n_hosts"):
        SynthConfig.from_dict({"n_hosts": 4})


def test_plant_anomalies():
    planted = plant_anomalies(40, 4, 5.0, first=8)
    assert [a.window for a in planted] == [12, 20, 28, 36]
    assert all(a.kind is AnomalyKind.NODE_SPIKE and a.magnitude == 5.0 for a in planted)
    assert plant_anomalies(40, 0, 5.0) == ()


def test_plant_too_many():
    with pytest.raises(SynthConfigError):
        plant_anomalies(10, 5, 1.0, first=6)


def test_table_schema():
    schema = table_schema(7)
    assert schema.n_metrics == 7
    assert [c for c, _ in schema.components] == ["cpu", "block", "llite", "lnet", "vm"]
    assert schema.keys[:2] == ["cpu.user", "cpu.nice"]
    assert table_schema(MAX_METRICS).n_metrics == MAX_METRICS


def test_table_schema_has_gauges():
    kinds = {m.kind for m in table_schema(MAX_METRICS).metrics}
    assert kinds == {MetricKind.COUNTER, MetricKind.GAUGE}


def test_host_names():
    hosts = host_names(18)
    assert hosts[0] == "c300-101"
    assert hosts[15] == "c300-116"
    assert hosts[16] == "c301-101"
    assert list(hosts) == sorted(hosts)


def test_deterministic(small_config):
    first = gen_feed(small_config)
    second = gen_feed(small_config)
    assert first.texts == second.texts
    assert first.jobs_csv() == second.jobs_csv()
    np.testing.assert_array_equal(first.rates, second.rates)


def test_seed_changes_feed(small_config):
    other = SynthConfig(**{**small_config.to_dict(), "seed": 4, "ranks": (2, 2, 2)})
    assert gen_feed(small_config).texts != gen_feed(other).texts


def test_feed_shapes(small_config):
    feed = gen_feed(small_config)
    assert feed.hosts == host_names(4)
    assert feed.rates.shape == (4, 36, 6)
    assert len(feed.windows) == 6
    assert feed.windows[0].shape == (4, 6, 6)
    assert np.all(feed.rates >= 0)
    assert [len(g) for g in feed.groups] == [2, 2]


def test_stats_text_parses_to_rates(small_config):
    """Differencing the written counters recovers the generated per-interval values"""
    feed = gen_feed(small_config)
    for n, host in enumerate(feed.hosts):
        parsed = parse_stats(feed.texts[host])
        assert parsed.header.hostname == host
        assert parsed.schema.keys == feed.schema.keys
        periodic = [r for r in parsed.records if r.mark is None]
        assert len(periodic) == small_config.n_slices_total + 1
        rates = diff_counters(periodic, parsed.schema)
        assert rates.resets == 0
        np.testing.assert_array_equal(np.stack([r.values for r in rates.records]), feed.rates[n])
        assert rates.records[0].timestamp == small_config.start



def test_two_hosts_three_timestamps_round_trip():
    cfg = SynthConfig(n_nodes=2, n_slices_total=2, n_metrics=4, window_len=2, ranks=(1, 1, 1), n_job_groups=1)
    feed = gen_feed(cfg)
    parsed = {host: parse_stats(feed.texts[host]) for host in feed.hosts}
    periodic = [r for host in feed.hosts for r in parsed[host].records if r.mark is None]
    assert len(periodic) == 6
    assert sorted({r.timestamp for r in periodic}) == [cfg.start + (s - 1) * cfg.period for s in range(3)]

    # writing the parsed records back reproduces every value bit for bit
    for host, stats in parsed.items():
        rewritten = parse_stats(format_stats(stats.header, stats.schema, stats.records))
        assert rewritten.header == stats.header
        assert [r.timestamp for r in rewritten.records] == [r.timestamp for r in stats.records]
        for before, after in zip(stats.records, rewritten.records):
            assert after.values.tobytes() == before.values.tobytes()

def test_job_marks_written(small_config):
    feed = gen_feed(small_config)
    host = feed.hosts[0]
    marks = [r for r in parse_stats(feed.texts[host]).records if r.mark]
    host_jobs = [e for e in feed.job_events if e.node_id == host]
    assert len(marks) == 2 * len(host_jobs)
    assert marks[0].mark == "begin"
    assert marks[0].mark_jobid == host_jobs[0].job_id
    assert marks[0].timestamp == host_jobs[0].start + 1


def test_job_events_cover_every_window(small_config):
    feed = gen_feed(small_config)
    span = small_config.window_len * small_config.period
    end_of_feed = small_config.start + small_config.n_windows * span
    for host in feed.hosts:
        jobs = sorted((e for e in feed.job_events if e.node_id == host), key=lambda e: e.start)
        assert jobs[0].start == small_config.start
        assert jobs[-1].end == end_of_feed - small_config.period
        for earlier, later in zip(jobs, jobs[1:]):
            assert later.start == earlier.end + small_config.period


def test_groups_share_jobs(small_config):
    feed = gen_feed(small_config)
    nodes_by_job = {}
    for event in feed.job_events:
        nodes_by_job.setdefault(event.job_id, set()).add(event.node_id)
    groups = [{feed.hosts[i] for i in g} for g in feed.groups]
    assert all(nodes in groups for nodes in nodes_by_job.values())


@pytest.mark.parametrize("kind", list(AnomalyKind))
def test_anomaly_truth(kind):
    cfg = SynthConfig(
        n_nodes=4,
        n_slices_total=36,
        n_metrics=6,
        window_len=6,
        anomalies=(AnomalySpec(2, kind, 3.0),),
    )
    feed = gen_feed(cfg)
    assert len(feed.truth) == 1
    record = feed.truth[0]
    assert record["window"] == 2
    assert record["window_start"] == cfg.start + 2 * 6 * cfg.period
    assert record["kind"] == kind.value
    assert feed.anomalous_starts == [record["window_start"]]
    if kind is AnomalyKind.NODE_SPIKE:
        assert 0 <= record["node"] < 4
    if kind is AnomalyKind.METRIC_BURST:
        assert 0 <= record["metric"] < 6


def test_node_spike_only_changes_last_slice():
    base = dict(n_nodes=4, n_slices_total=36, n_metrics=6, window_len=6, seed=8)
    quiet = gen_feed(SynthConfig(**base, anomalies=(AnomalySpec(1, "node_spike", 0.0),)))
    loud = gen_feed(SynthConfig(**base, anomalies=(AnomalySpec(1, "node_spike", 50.0),)))
    node = loud.truth[0]["node"]
    difference = loud.windows[1] - quiet.windows[1]
    np.testing.assert_array_equal(difference[:, :-1, :], 0.0)
    assert np.all(difference[node, -1, :] > 0)
    others = [n for n in range(4) if n != node]
    np.testing.assert_array_equal(difference[others], 0.0)
    for w in (0, 2, 3):
        np.testing.assert_array_equal(loud.windows[w], quiet.windows[w])


def test_write_feed(tmp_path, small_config):
    spiked = {**small_config.to_dict(), "anomalies": [{"window": 1, "kind": "node_spike", "magnitude": 2.0}]}
    feed = gen_feed(SynthConfig.from_dict(spiked))
    written = write_feed(feed, tmp_path / "feed")
    names = sorted(p.name for p in written)
    assert names == sorted([stats_filename(h) for h in feed.hosts] + ["jobs.csv", "truth.json"])

    parsed = parse_stats_file(tmp_path / "feed" / "c300-101.stats")
    assert parsed.header.hostname == "c300-101"
    assert read_job_events(tmp_path / "feed" / "jobs.csv") == feed.job_events
    truth = json.loads((tmp_path / "feed" / "truth.json").read_text())
    assert truth[0]["window"] == 1
