"""Test TACC_Stats parsing, counter differencing, normalization and window assembly"""

import io
import logging

import numpy as np
import pytest

from tensortrack.ingest import (
    EmptyRosterError,
    InsufficientSamplesError,
    JobEvent,
    JobEventsError,
    MetricKind,
    MetricSchema,
    MetricSpec,
    SchemaMismatchError,
    StatsHeader,
    StatsHeaderError,
    StatsRecord,
    StatsRecordError,
    UnsortedRecordsError,
    UsageWindow,
    assemble_windows,
    build_job_matrix,
    diff_counters,
    format_stats,
    format_value,
    group_by_host,
    job_events_from_records,
    job_matrix_from_json,
    job_matrix_to_json,
    parse_stats,
    parse_stats_file,
    read_job_events,
    read_schema,
    window_from_json,
    window_to_json,
    write_job_events,
    zscore_fit,
    zscore_normalize,
)
from tensortrack.tensor import Tensor3

HEADER = """\
$tacc_stats 2.0.1
$hostname c300-101
$uname Linux x86_64 2.6.32
$uptime 4242
!cpu user,E,U=cs system,E,U=cs
!mem MemUsed,U=KB
!block rd_ios,E wr_ios,E
"""

STATS = (
    HEADER
    + """
1362096000 0
cpu 0 100 50
cpu 1 300 70
mem - 1000
block sda 10 20
block sdb 5 5

1362096600 4001
cpu 0 200 60
cpu 1 400 80
mem - 1500
block sda 12 30
block sdb 6 6

1362096601 4001
%begin 4001
cpu 0 200 60
cpu 1 400 80
mem - 1500
block sda 12 30
block sdb 6 6

1362097200 4001
cpu 0 250 65
cpu 1 450 85
mem - 1200
net eth0 1 2
block sda 2 31
block sdb 6 7
"""
)

SCHEMA = MetricSchema(
    (
        MetricSpec("cpu", "user", MetricKind.COUNTER, "cs"),
        MetricSpec("mem", "MemUsed", MetricKind.GAUGE, "KB"),
    )
)


def record(host, timestamp, values, mark=None, mark_jobid=None):
    return StatsRecord(host, timestamp, np.asarray(values, dtype=float), mark=mark, mark_jobid=mark_jobid)


def test_parse_header():
    parsed = parse_stats(STATS)
    assert parsed.header.version == "2.0.1"
    assert parsed.header.hostname == "c300-101"
    assert parsed.header.uptime == "4242"


def test_parse_schema():
    schema = parse_stats(STATS).schema
    assert schema.keys == ["cpu.user", "cpu.system", "mem.MemUsed", "block.rd_ios", "block.wr_ios"]
    assert schema.counter_mask.tolist() == [True, True, False, True, True]
    assert schema.metrics[0].unit == "cs"
    assert schema.components == [
        ("cpu", ("user", "system")),
        ("mem", ("MemUsed",)),
        ("block", ("rd_ios", "wr_ios")),
    ]


def test_parse_records_sum_and_average_devices():
    parsed = parse_stats(STATS)
    assert len(parsed.records) == 4
    first = parsed.records[0]
    assert first.host == "c300-101"
    assert first.timestamp == 1362096000
    assert first.jobid == "0"
    # cpu rows averaged, block rows summed
    np.testing.assert_array_equal(first.values, [200, 60, 1000, 15, 25])


def test_parse_marks():
    parsed = parse_stats(STATS)
    marked = [r for r in parsed.records if r.mark]
    assert len(marked) == 1
    assert marked[0].mark == "begin"
    assert marked[0].mark_jobid == "4001"
    assert marked[0].timestamp == 1362096601


def test_unknown_component_counted():
    parsed = parse_stats(STATS)
    assert parsed.unknown_components == 1


def test_parse_from_stream_and_file(tmp_path):
    path = tmp_path / "c300-101.stats"
    path.write_text(STATS)
    from_file = parse_stats_file(path)
    from_stream = parse_stats(io.StringIO(STATS))
    assert len(from_file.records) == len(from_stream.records)
    np.testing.assert_array_equal(from_file.records[-1].values, from_stream.records[-1].values)


# unprefixed header and schema lines, as written by older collectors
LEGACY_STATS = """\
tacc_stats 1.0.3
hostname c300-101.ls4.tacc.utexas.edu
uname Linux x86_64 2.6.18-194.32.1.el5_TACC #2 SMP
uptime 14043540
block rd_ios,E rd_merges,E rd_sectors,E,U=512B rd_ticks,E,U=ms wr_ios,E wr_merges,E wr_sectors,E,U=512B wr_ticks,E,U=ms in_flight io_ticks,E,U=ms time_in_queue,E,U=ms
cpu user,E,U=cs nice,E,U=cs system,E,U=cs idle,E,U=cs iowait,E,U=cs irq,E,U=cs softirq,E,U=cs
1369285201 0
block sr0 0 0 0 0 0 0 0 0 0 0 0
block sda 49084176 677526 6343808434 188319052 20484319 53240661 587799456 1051382284 0 126316813 1239733920
cpu 0 319172960 135 16110118 1068725347 235978 3361 170451
"""


def test_parse_legacy_fragment():
    parsed = parse_stats(LEGACY_STATS)
    assert parsed.header.version == "1.0.3"
    assert parsed.header.uptime == "14043540"
    assert [c for c, _ in parsed.schema.components] == ["block", "cpu"]
    assert parsed.schema.n_metrics == 18
    assert parsed.schema.metrics[2].unit == "512B"
    assert parsed.schema.metrics[8].kind is MetricKind.GAUGE
    assert len(parsed.records) == 1
    only = parsed.records[0]
    assert only.host == "c300-101.ls4.tacc.utexas.edu"
    assert only.timestamp == 1369285201
    assert only.jobid == "0"
    assert only.mark is None
    # sr0 is all zeros, so the block sums equal the sda row
    np.testing.assert_array_equal(
        only.values[:11],
        [49084176, 677526, 6343808434, 188319052, 20484319, 53240661, 587799456, 1051382284, 0, 126316813, 1239733920],
    )
    np.testing.assert_array_equal(only.values[11:], [319172960, 135, 16110118, 1068725347, 235978, 3361, 170451])


def test_format_stats_round_trip():
    parsed = parse_stats(STATS)
    written = format_stats(parsed.header, parsed.schema, parsed.records)
    reparsed = parse_stats(written)
    assert reparsed.header == parsed.header
    assert reparsed.schema == parsed.schema
    assert reparsed.unknown_components == 0
    assert [r.timestamp for r in reparsed.records] == [r.timestamp for r in parsed.records]
    assert [(r.jobid, r.mark, r.mark_jobid) for r in reparsed.records] == [
        (r.jobid, r.mark, r.mark_jobid) for r in parsed.records
    ]
    for before, after in zip(parsed.records, reparsed.records):
        np.testing.assert_array_equal(after.values, before.values)


def test_format_stats_keeps_non_integer_values_exact():
    header = StatsHeader("2.0.1", "c300-102")
    schema = SCHEMA
    values = [[0.1 + 0.2, 1 / 3], [2.5e-7, 123456789.123456789]]
    records = [record("c300-102", 1362096000 + 600 * i, v) for i, v in enumerate(values)]
    reparsed = parse_stats(format_stats(header, schema, records))
    assert len(reparsed.records) == 2
    for before, after in zip(records, reparsed.records):
        assert after.values.tobytes() == before.values.tobytes()


def test_value_count_mismatch():
    text = HEADER + "\n1362096000 0\ncpu 0 1 2 3\nmem - 1\nblock sda 1 1\n"
    with pytest.raises(StatsRecordError) as excinfo:
        parse_stats(text, source="bad.stats")
    assert excinfo.value.lineno == 10
    assert "bad.stats:10" in str(excinfo.value)


def test_non_numeric_value():
    text = HEADER + "\n1362096000 0\ncpu 0 1 x\nmem - 1\nblock sda 1 1\n"
    with pytest.raises(StatsRecordError):
        parse_stats(text)


def test_missing_component_rows():
    text = HEADER + "\n1362096000 0\ncpu 0 1 2\nblock sda 1 1\n"
    with pytest.raises(StatsRecordError, match="mem"):
        parse_stats(text)


def test_missing_hostname():
    text = HEADER.replace("$hostname c300-101\n", "")
    with pytest.raises(StatsHeaderError, match="hostname"):
        parse_stats(text)


def test_malformed_schema_line():
    text = HEADER + "!vm ,E\n"
    with pytest.raises(StatsHeaderError):
        parse_stats(text)


def test_read_schema(tmp_path):
    path = tmp_path / "schema.txt"
    path.write_text(HEADER)
    assert read_schema(path) == parse_stats(STATS).schema


def test_duplicate_metric_in_schema():
    with pytest.raises(SchemaMismatchError):
        MetricSchema((MetricSpec("cpu", "user"), MetricSpec("cpu", "user")))


def test_metric_declaration():
    assert MetricSpec("block", "rd_sectors", MetricKind.COUNTER, "512B").declaration() == "rd_sectors,E,U=512B"
    assert MetricSpec("vm", "nr_dirty", MetricKind.GAUGE).declaration() == "nr_dirty"


@pytest.mark.parametrize("value,expected", [(3.0, "3"), (0.0, "0"), (2.5, "2.5"), (12345678901.0, "12345678901")])
def test_format_value(value, expected):
    assert format_value(value) == expected


def test_record_timestamp_positive():
    with pytest.raises(StatsRecordError):
        record("a", 0, [1.0])


def test_group_by_host_sorts():
    records = [record("b", 20, [1]), record("a", 30, [1]), record("a", 10, [1])]
    grouped = group_by_host(records)
    assert list(grouped) == ["a", "b"]
    assert [r.timestamp for r in grouped["a"]] == [10, 30]


def test_diff_counters():
    records = [
        record("a", 600, [100, 7]),
        record("a", 1200, [160, 9]),
        record("a", 1800, [40, 4]),
    ]
    diff = diff_counters(records, SCHEMA)
    assert [r.timestamp for r in diff.records] == [1200, 1800]
    np.testing.assert_array_equal(diff.records[0].values, [60, 9])
    # counter reset clamped, gauge carried
    np.testing.assert_array_equal(diff.records[1].values, [0, 4])
    assert diff.resets == 1


def test_diff_counters_unsorted():
    records = [record("a", 1200, [1, 1]), record("a", 1200, [2, 2])]
    with pytest.raises(UnsortedRecordsError):
        diff_counters(records, SCHEMA)


def test_diff_counters_parsed_file():
    parsed = parse_stats(STATS)
    periodic = [r for r in parsed.records if r.mark is None]
    diff = diff_counters(periodic, parsed.schema)
    np.testing.assert_array_equal(diff.records[0].values, [100, 10, 1500, 3, 11])
    # block rd_ios went 18 -> 8: reset
    np.testing.assert_array_equal(diff.records[1].values, [50, 5, 1200, 0, 2])
    assert diff.resets == 1


def test_zscore():
    values = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [6.0, 5.0]])
    normalized, params = zscore_normalize(values)
    np.testing.assert_allclose(normalized[:, 0].mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(normalized[:, 0].std(ddof=1), 1.0)
    assert params.constant.tolist() == [False, True]
    assert np.all(normalized[:, 1] == 0.0)


def test_zscore_too_few_samples():
    with pytest.raises(InsufficientSamplesError):
        zscore_fit(np.ones((1, 3)))


def rates(hosts, n_slices, period=600, start=6000, skip=()):
    out = []
    for n, host in enumerate(hosts):
        for s in range(n_slices):
            if (host, s) in skip:
                continue
            out.append(record(host, start + s * period, [n * 100 + s, -s]))
    return out


def test_assemble_windows():
    windows = assemble_windows(rates(["a", "b"], 5), 2, ["a", "b"])
    # trailing partial window dropped
    assert len(windows) == 2
    assert [w.start for w in windows] == [6000, 7200]
    assert windows[0].tensor.dims == (2, 2, 2)
    assert windows[1].tensor.data[1, 0, 0] == 102
    assert windows[1].end == 8400
    assert not windows[0].degraded


def test_assemble_windows_roster_order():
    windows = assemble_windows(rates(["a", "b"], 2), 2, ["b", "a"])
    assert windows[0].nodes == ("b", "a")
    assert windows[0].tensor.data[0, 0, 0] == 100


def test_assemble_windows_fills_missing():
    windows = assemble_windows(rates(["a", "b"], 4, skip={("a", 1)}), 2, ["a", "b"])
    assert windows[0].missing == 2
    assert np.all(windows[0].tensor.data[0, 1, :] == 0)
    # 2 of 8 cells is more than 20%
    assert windows[0].degraded
    assert not windows[1].degraded


def test_assemble_windows_skips_marked_records():
    data = rates(["a"], 2) + [record("a", 6001, [999, 999], mark="begin", mark_jobid="1")]
    windows = assemble_windows(data, 2, ["a"])
    assert windows[0].tensor.data.max() < 999


def test_assemble_windows_warns_on_shared_slice(caplog):
    # 6250 rounds to the same slice as 6000
    data = rates(["a"], 2) + [record("a", 6250, [7, 7])]
    with caplog.at_level(logging.WARNING, logger="tensortrack.ingest"):
        windows = assemble_windows(data, 2, ["a"])
    assert windows[0].tensor.data[0, 0].tolist() == [7, 7]
    assert "1 records landed in an already filled slice" in caplog.text


def test_assemble_windows_quiet_without_collisions(caplog):
    with caplog.at_level(logging.WARNING, logger="tensortrack.ingest"):
        assemble_windows(rates(["a", "b"], 4), 2, ["a", "b"])
    assert "already filled" not in caplog.text


def test_assemble_windows_empty_roster():
    with pytest.raises(EmptyRosterError):
        assemble_windows(rates(["a"], 2), 2, [])


def make_window(nodes, start=6000, window_len=2, period=600):
    return UsageWindow(start, tuple(nodes), Tensor3.zeros((len(nodes), window_len, 1)), period)


def test_build_job_matrix_overlap():
    window = make_window(["a", "b", "c"])  # covers [6000, 7200)
    events = [
        JobEvent("10", "a", 5000, 6000),  # ends at window start: overlaps
        JobEvent("9", "b", 7100, 9000),
        JobEvent("11", "c", 7200, 9000),  # starts at window end: no overlap
        JobEvent("12", "z", 6000, 7000),  # not on roster
    ]
    jm = build_job_matrix(events, window)
    assert jm.jobs == ("9", "10")
    assert jm.entries.tolist() == [[0, 1], [1, 0], [0, 0]]


def test_build_job_matrix_bad_event():
    with pytest.raises(JobEventsError):
        build_job_matrix([JobEvent("1", "a", 7000, 6000)], make_window(["a"]))


def test_job_events_from_records():
    data = [
        record("a", 6001, [0], mark="begin", mark_jobid="7"),
        record("a", 8001, [0], mark="end", mark_jobid="7"),
        record("b", 6000, [0]),
        record("b", 6601, [0], mark="begin", mark_jobid="8"),
        record("b", 9000, [0]),
    ]
    events = job_events_from_records(data)
    assert events == [JobEvent("7", "a", 6001, 8001), JobEvent("8", "b", 6601, 9000)]


def test_job_events_csv(tmp_path):
    events = [JobEvent("1", "a", 10, 20), JobEvent("2", "b", 15, 15)]
    stream = io.StringIO()
    write_job_events(events, stream)
    assert stream.getvalue().splitlines()[0] == "job_id,node_id,start_ts,end_ts"
    path = tmp_path / "jobs.csv"
    path.write_text(stream.getvalue())
    assert read_job_events(path) == events


@pytest.mark.parametrize(
    "text",
    [
        "job,node,start,end\n1,a,1,2\n",
        "job_id,node_id,start_ts,end_ts\n1,a,x,2\n",
        "job_id,node_id,start_ts,end_ts\n1,a,5,2\n",
    ],
)
def test_job_events_csv_errors(text):
    with pytest.raises(JobEventsError):
        read_job_events(io.StringIO(text))


def test_window_checkpoint():
    rng = np.random.default_rng(0)
    window = UsageWindow(6000, ("a", "b"), Tensor3(rng.normal(size=(2, 3, 4))), 600, missing=1)
    data = window_to_json(window)
    assert data["encoding"] == "base64-f64le"
    restored = window_from_json(data)
    assert restored.tensor == window.tensor
    assert (restored.start, restored.nodes, restored.missing) == (6000, ("a", "b"), 1)


def test_job_matrix_checkpoint():
    jm = build_job_matrix([JobEvent("1", "a", 6000, 6600)], make_window(["a", "b"]))
    restored = job_matrix_from_json(job_matrix_to_json(jm))
    assert restored.jobs == jm.jobs
    assert restored.entries.tolist() == jm.entries.tolist()
