"""Deterministic synthetic telemetry: low-rank windows, job groups, planted anomalies, TACC_Stats writer"""

from __future__ import annotations

import enum
import io
import logging
import math
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from .constants import DEFAULT_PERIOD, TensorTrackError
from .ingest import (
    JobEvent,
    MetricKind,
    MetricSchema,
    MetricSpec,
    StatsHeader,
    StatsRecord,
    format_stats,
    write_job_events,
)
from .path_utils import stats_filename
from .tensor import Tensor3, mode_product
from .utils import convert_to_json

__all__ = [
    "AnomalyKind",
    "AnomalySpec",
    "SynthConfig",
    "SynthConfigError",
    "SynthFeed",
    "gen_feed",
    "host_names",
    "plant_anomalies",
    "table_schema",
    "write_feed",
]

logger = logging.getLogger(__name__)

# Friday 1 March 2013 00:00:00 UTC
DEFAULT_START = 1362096000

# relative jitter of each window's core around the group's base core
CORE_JITTER = 0.1

# per-metric un-normalization scale range, counts per unit
SCALE_RANGE = (1e7, 1e8)

FIRST_JOB_ID = 1000

SYNTH_VERSION = "2.0.1"
SYNTH_UNAME = "Linux x86_64 2.6.32-358.el6.x86_64 #1 SMP"

# devices written for each component; counter values are split across summed
# devices and repeated across averaged ones
DEVICES = {
    "cpu": ("0", "1"),
    "block": ("sda",),
    "llite": ("/scratch", "/work"),
    "lnet": ("-",),
    "vm": ("-",),
}

_C = MetricKind.COUNTER
_G = MetricKind.GAUGE

# resource usage metrics collected per component, in schema order
TABLE_METRICS: Dict[str, Tuple[Tuple[str, MetricKind, Optional[str]], ...]] = {
    "cpu": (
        ("user", _C, "cs"),
        ("nice", _C, "cs"),
        ("system", _C, "cs"),
        ("idle", _C, "cs"),
        ("iowait", _C, "cs"),
        ("irq", _C, "cs"),
        ("softirq", _C, "cs"),
    ),
    "block": (
        ("rd_ios", _C, None),
        ("rd_merges", _C, None),
        ("rd_sectors", _C, "512B"),
        ("in_flight", _G, None),
        ("rd_ticks", _C, "ms"),
        ("wr_ios", _C, None),
        ("wr_merges", _C, None),
        ("wr_sectors", _C, "512B"),
        ("wr_ticks", _C, "ms"),
        ("io_ticks", _C, "ms"),
        ("time_in_queue", _C, "ms"),
    ),
    "llite": (
        ("read_bytes", _C, "B"),
        ("write_bytes", _C, "B"),
        ("open", _C, None),
        ("close", _C, None),
        ("mmap", _C, None),
        ("seek", _C, None),
        ("fsync", _C, None),
        ("setattr", _C, None),
        ("truncate", _C, None),
        ("getattr", _C, None),
        ("statfs", _C, None),
        ("alloc_inode", _C, None),
        ("setxattr", _C, None),
        ("getxattr", _C, None),
        ("listxattr", _C, None),
        ("removexattr", _C, None),
        ("inode_permission", _C, None),
    ),
    "lnet": (
        ("tx_msgs", _C, None),
        ("rx_msgs", _C, None),
        ("rx_msgs_dropped", _C, None),
        ("tx_bytes", _C, "B"),
        ("rx_bytes", _C, "B"),
        ("rx_bytes_dropped", _C, "B"),
    ),
    "vm": (
        ("nr_free_pages", _G, "4KB"),
        ("pgpgin", _C, "KB"),
        ("pgpgout", _C, "KB"),
        ("pswpin", _C, None),
        ("pswpout", _C, None),
        ("pgfault", _C, None),
        ("pgmajfault", _C, None),
        ("nr_dirty", _G, "4KB"),
    ),
}

MAX_METRICS = sum(len(metrics) for metrics in TABLE_METRICS.values())


class SynthConfigError(TensorTrackError, ValueError):
    """Raised when a synthetic feed configuration is invalid"""

    pass


class AnomalyKind(str, enum.Enum):
    """Perturbation planted in the last slice of a window"""

    NODE_SPIKE = "node_spike"
    METRIC_BURST = "metric_burst"
    DECORRELATE = "decorrelate"


@dataclass(frozen=True)
class AnomalySpec:
    """Anomaly of kind with magnitude planted in window"""

    window: int
    kind: AnomalyKind
    magnitude: float

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", AnomalyKind(self.kind))
        except ValueError as e:
            raise SynthConfigError(
                f"Unknown anomaly kind {self.kind!r}; expected one of "
                f"{', '.join(k.value for k in AnomalyKind)}"
            ) from e
        if self.magnitude < 0:
            raise SynthConfigError(f"Anomaly magnitude must be >= 0, got {self.magnitude}")


@dataclass(frozen=True)
class SynthConfig:
    """Shape, planted structure and anomalies of a synthetic feed"""

    n_nodes: int = 16
    n_slices_total: int = 720
    n_metrics: int = 12
    window_len: int = 18
    ranks: Tuple[int, int, int] = (2, 2, 2)
    noise_sigma: float = 0.1
    n_job_groups: int = 2
    anomalies: Tuple[AnomalySpec, ...] = ()
    seed: int = 0
    period: int = DEFAULT_PERIOD
    start: int = DEFAULT_START

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        object.__setattr__(
            self,
            "anomalies",
            tuple(a if isinstance(a, AnomalySpec) else AnomalySpec(**a) for a in self.anomalies),
        )
        self.validate()

    @property
    def n_windows(self) -> int:
        return self.n_slices_total // self.window_len

    def validate(self):
        if self.n_nodes < 1:
            raise SynthConfigError(f"n_nodes must be >= 1, got {self.n_nodes}")
        if not 1 <= self.n_metrics <= MAX_METRICS:
            raise SynthConfigError(f"n_metrics must be between 1 and {MAX_METRICS}, got {self.n_metrics}")
        if self.window_len < 2:
            raise SynthConfigError(f"window_len must be >= 2, got {self.window_len}")
        if self.n_slices_total < self.window_len:
            raise SynthConfigError(
                f"n_slices_total ({self.n_slices_total}) must be at least window_len ({self.window_len})"
            )
        if len(self.ranks) != 3:
            raise SynthConfigError(f"ranks must have three entries, got {self.ranks}")
        if not 1 <= self.n_job_groups <= self.n_nodes:
            raise SynthConfigError(
                f"n_job_groups must be between 1 and n_nodes ({self.n_nodes}), got {self.n_job_groups}"
            )
        smallest_group = self.n_nodes // self.n_job_groups
        for name, rank, dim in zip(
            ("node", "time", "metric"),
            self.ranks,
            (smallest_group, self.window_len, self.n_metrics),
        ):
            if not 1 <= rank <= dim:
                raise SynthConfigError(f"Planted {name} rank {rank} must be between 1 and {dim}")
        if not self.noise_sigma >= 0:
            raise SynthConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.seed < 0:
            raise SynthConfigError(f"seed must be >= 0, got {self.seed}")
        if self.period < 1:
            raise SynthConfigError(f"period must be >= 1, got {self.period}")
        if self.start <= self.period:
            raise SynthConfigError(f"start must be later than one period, got {self.start}")
        for anomaly in self.anomalies:
            if not 0 <= anomaly.window < self.n_windows:
                raise SynthConfigError(
                    f"Anomaly window {anomaly.window} outside the {self.n_windows} generated windows"
                )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SynthConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise SynthConfigError(f"Unknown synth settings: {', '.join(sorted(unknown))}")
        values = dict(data)
        if "anomalies" in values:
            values["anomalies"] = tuple(AnomalySpec(**a) for a in values["anomalies"])
        if "ranks" in values:
            values["ranks"] = tuple(values["ranks"])
        try:
            return cls(**values)
        except TypeError as e:
            raise SynthConfigError(str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_nodes": self.n_nodes,
            "n_slices_total": self.n_slices_total,
            "n_metrics": self.n_metrics,
            "window_len": self.window_len,
            "ranks": list(self.ranks),
            "noise_sigma": self.noise_sigma,
            "n_job_groups": self.n_job_groups,
            "anomalies": [
                {"window": a.window, "kind": a.kind.value, "magnitude": a.magnitude}
                for a in self.anomalies
            ],
            "seed": self.seed,
            "period": self.period,
            "start": self.start,
        }


def plant_anomalies(
    n_windows: int,
    count: int,
    magnitude: float,
    kind: Union[AnomalyKind, str] = AnomalyKind.NODE_SPIKE,
    first: int = 0,
) -> Tuple[AnomalySpec, ...]:
    """count anomalies spread evenly over windows [first, n_windows)"""
    if count < 0:
        raise SynthConfigError(f"Anomaly count must be >= 0, got {count}")
    span = n_windows - first
    if count > span:
        raise SynthConfigError(f"Cannot plant {count} anomalies in {span} windows")
    if count == 0:
        return ()
    step = span / count
    return tuple(
        AnomalySpec(first + int(step * (i + 0.5)), AnomalyKind(kind), magnitude) for i in range(count)
    )


def table_schema(n_metrics: int) -> MetricSchema:
    """First n_metrics metrics taken round-robin over the components, grouped by component"""
    if not 1 <= n_metrics <= MAX_METRICS:
        raise SynthConfigError(f"n_metrics must be between 1 and {MAX_METRICS}, got {n_metrics}")
    taken = {component: 0 for component in TABLE_METRICS}
    remaining = n_metrics
    while remaining:
        for component, metrics in TABLE_METRICS.items():
            if remaining and taken[component] < len(metrics):
                taken[component] += 1
                remaining -= 1
    specs = []
    for component, metrics in TABLE_METRICS.items():
        for name, kind, unit in metrics[: taken[component]]:
            specs.append(MetricSpec(component, name, kind, unit))
    return MetricSchema(tuple(specs))


def host_names(n_nodes: int) -> Tuple[str, ...]:
    """Rack-style host names, 16 per rack; lexical order matches index order"""
    return tuple(f"c{300 + i // 16:03d}-{101 + i % 16:03d}" for i in range(n_nodes))


@dataclass(eq=False)
class SynthFeed:
    """A generated feed and the data it was written from

    windows holds the normalized-scale N x T x M arrays before
    un-normalization; rates holds the integer per-interval values (N x S x M)
    the stats files encode.
    """

    config: SynthConfig
    schema: MetricSchema
    hosts: Tuple[str, ...]
    texts: Dict[str, str]
    job_events: List[JobEvent]
    truth: List[Dict[str, Any]]
    windows: List[npt.NDArray[np.float64]]
    rates: npt.NDArray[np.float64]
    groups: List[npt.NDArray[np.int64]] = field(default_factory=list)

    @property
    def anomalous_starts(self) -> List[int]:
        return sorted({t["window_start"] for t in self.truth})

    def jobs_csv(self) -> str:
        stream = io.StringIO()
        write_job_events(self.job_events, stream)
        return stream.getvalue()

    def truth_json(self) -> str:
        return convert_to_json(self.truth)


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> npt.NDArray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def _time_factor(window_len: int, rank: int) -> npt.NDArray:
    """Smooth orthonormal temporal basis whose first column is constant"""
    t = np.arange(window_len)
    columns = [np.full(window_len, 1.0 / math.sqrt(window_len))]
    for k in range(1, rank):
        columns.append(np.cos(math.pi * k * (t + 0.5) / window_len) * math.sqrt(2.0 / window_len))
    return np.stack(columns, axis=1)


def _generate_windows(cfg: SynthConfig, groups: List[npt.NDArray]) -> Tuple[List[npt.NDArray], List[Dict[str, Any]]]:
    rng = np.random.default_rng([cfg.seed, 0])
    anomaly_rng = np.random.default_rng([cfg.seed, 1])
    r_n, r_t, r_m = cfg.ranks
    T, M = cfg.window_len, cfg.n_metrics
    a_time = _time_factor(T, r_t)

    structure = []
    for members in groups:
        n_g = len(members)
        scale = math.sqrt(n_g * T * M / (r_n * r_t * r_m))
        structure.append(
            (
                _orthonormal(rng, n_g, r_n),
                _orthonormal(rng, M, r_m),
                rng.standard_normal((r_n, r_t, r_m)) * scale,
            )
        )

    by_window: Dict[int, List[AnomalySpec]] = {}
    for anomaly in cfg.anomalies:
        by_window.setdefault(anomaly.window, []).append(anomaly)

    n_generated = -(-cfg.n_slices_total // T)
    windows = []
    truth = []
    for w in range(n_generated):
        signal = np.zeros((cfg.n_nodes, T, M))
        for members, (a_node, a_metric, core) in zip(groups, structure):
            jittered = core * (1.0 + CORE_JITTER * rng.standard_normal(core.shape))
            block = Tensor3(jittered)
            for mode, factor in enumerate((a_node, a_time, a_metric)):
                block = mode_product(block, factor, mode)
            signal[members] = block.data
        noise = cfg.noise_sigma * rng.standard_normal(signal.shape)
        window = signal + noise
        unit = float(window.std())
        for anomaly in by_window.get(w, ()):
            record = {
                "window": w,
                "window_start": cfg.start + w * T * cfg.period,
                "kind": anomaly.kind.value,
                "magnitude": anomaly.magnitude,
                "node": None,
                "metric": None,
            }
            if anomaly.kind is AnomalyKind.NODE_SPIKE:
                node = int(anomaly_rng.integers(cfg.n_nodes))
                window[node, -1, :] += anomaly.magnitude * unit
                record["node"] = node
            elif anomaly.kind is AnomalyKind.METRIC_BURST:
                metric = int(anomaly_rng.integers(M))
                nodes = anomaly_rng.permutation(cfg.n_nodes)[: max(1, cfg.n_nodes // 2)]
                window[nodes, -1, metric] += anomaly.magnitude * unit
                record["metric"] = metric
            else:
                window = signal + anomaly.magnitude * noise
            truth.append(record)
        windows.append(window)
    return windows, truth


def _job_events(cfg: SynthConfig, groups: List[npt.NDArray], hosts: Sequence[str]) -> List[JobEvent]:
    """Consecutive jobs of 1 to 4 windows on every node of each group"""
    rng = np.random.default_rng([cfg.seed, 2])
    span = cfg.window_len * cfg.period
    events = []
    job_id = FIRST_JOB_ID
    for members in groups:
        w = 0
        while w < cfg.n_windows:
            last = min(w + int(rng.integers(1, 5)), cfg.n_windows) - 1
            start = cfg.start + w * span
            end = cfg.start + (last + 1) * span - cfg.period
            for node in members:
                events.append(JobEvent(str(job_id), hosts[node], start, end))
            job_id += 1
            w = last + 1
    return sorted(events, key=lambda e: (e.start, int(e.job_id), e.node_id))


def _device_rows(component: str, values: npt.NDArray) -> List[Tuple[str, List[float]]]:
    """Split a component's values over its devices so the parser recovers them"""
    devices = DEVICES[component]
    if component == "cpu" or len(devices) == 1:
        return [(device, list(values)) for device in devices]
    # summed devices: integer halves of every value
    first = np.floor(values / 2)
    return [(devices[0], list(first)), (devices[1], list(values - first))]


def _render_host(
    host: str,
    schema: MetricSchema,
    records: List[Tuple[int, str, Optional[str], Optional[str], npt.NDArray]],
) -> str:
    header = StatsHeader(SYNTH_VERSION, host, SYNTH_UNAME, "0")
    stats = (
        StatsRecord(host, timestamp, values, jobid=jobid, mark=mark, mark_jobid=mark_jobid)
        for timestamp, jobid, mark, mark_jobid, values in records
    )
    return format_stats(header, schema, stats, device_rows=_device_rows)


def gen_feed(cfg: SynthConfig) -> SynthFeed:
    """Generate a synthetic feed for cfg; identical configs give identical feeds"""
    schema = table_schema(cfg.n_metrics)
    hosts = host_names(cfg.n_nodes)
    groups = [np.asarray(g, dtype=np.int64) for g in np.array_split(np.arange(cfg.n_nodes), cfg.n_job_groups)]

    windows, truth = _generate_windows(cfg, groups)
    normalized = np.concatenate(windows, axis=1)[:, : cfg.n_slices_total, :]

    write_rng = np.random.default_rng([cfg.seed, 3])
    scale = write_rng.uniform(*SCALE_RANGE, size=cfg.n_metrics)
    floor = np.ceil(np.maximum(0.0, -normalized.min(axis=(0, 1)))) + 1.0
    rates = np.rint(scale * (normalized + floor))

    job_events = _job_events(cfg, groups, hosts)
    running: Dict[Tuple[str, int], str] = {}
    marks: Dict[str, List[Tuple[int, str, str]]] = {host: [] for host in hosts}
    for event in job_events:
        marks[event.node_id].append((event.start + 1, "begin", event.job_id))
        marks[event.node_id].append((event.end + 1, "end", event.job_id))
        for ts in range(event.start, event.end + 1, cfg.period):
            running[(event.node_id, ts)] = event.job_id

    counters = schema.counter_mask
    base = write_rng.integers(0, 10**9, size=(cfg.n_nodes, cfg.n_metrics)).astype(np.float64)
    texts = {}
    for n, host in enumerate(hosts):
        cumulative = base[n] + np.concatenate(
            [np.zeros((1, cfg.n_metrics)), np.cumsum(rates[n], axis=0)], axis=0
        )
        host_marks = sorted(marks[host])
        records = []
        for s in range(cfg.n_slices_total + 1):
            timestamp = cfg.start + (s - 1) * cfg.period
            values = np.where(counters, cumulative[s], rates[n, max(s - 1, 0)])
            records.append((timestamp, running.get((host, timestamp), "0"), None, None, values))
            # job marks carry the counters of the preceding periodic record
            while host_marks and host_marks[0][0] < timestamp + cfg.period and host_marks[0][0] > timestamp:
                mark_ts, mark, job = host_marks.pop(0)
                records.append((mark_ts, job, mark, job, values))
        texts[host] = _render_host(host, schema, records)

    logger.debug(
        "generated %d hosts x %d slices x %d metrics, %d jobs events, %d anomalies",
        cfg.n_nodes,
        cfg.n_slices_total,
        cfg.n_metrics,
        len(job_events),
        len(truth),
    )
    return SynthFeed(
        config=cfg,
        schema=schema,
        hosts=hosts,
        texts=texts,
        job_events=job_events,
        truth=truth,
        windows=windows[: cfg.n_windows],
        rates=rates,
        groups=groups,
    )


def write_feed(feed: SynthFeed, outdir: Union[str, pathlib.Path]) -> List[pathlib.Path]:
    """Write <host>.stats files, jobs.csv and truth.json into outdir"""
    outdir = pathlib.Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for host in feed.hosts:
        path = outdir / stats_filename(host)
        path.write_text(feed.texts[host])
        written.append(path)
    jobs = outdir / "jobs.csv"
    jobs.write_text(feed.jobs_csv())
    truth = outdir / "truth.json"
    truth.write_text(feed.truth_json())
    written.extend([jobs, truth])
    return written
