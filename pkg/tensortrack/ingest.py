"""Parse TACC_Stats-style telemetry, difference counters, z-score normalize, and assemble windowed tensors and job matrices"""

from __future__ import annotations

import base64
import csv
import enum
import logging
import pathlib
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    NamedTuple,
    Optional,
    Sequence,
    TextIO,
    Tuple,
    Union,
)

import numpy as np
import numpy.typing as npt
from textx import TextXSyntaxError, metamodel_from_file

from .constants import DEFAULT_PERIOD, DEGRADED_FRACTION, TensorTrackError
from .tensor import Tensor3

__all__ = [
    "CounterDiff",
    "EmptyRosterError",
    "IngestError",
    "InsufficientSamplesError",
    "JobEvent",
    "JobEventsError",
    "JobMatrix",
    "MetricKind",
    "MetricSchema",
    "MetricSpec",
    "SchemaMismatchError",
    "StatsFile",
    "StatsHeader",
    "StatsHeaderError",
    "StatsParser",
    "StatsRecord",
    "StatsRecordError",
    "UnsortedRecordsError",
    "UsageWindow",
    "ZScoreParams",
    "assemble_windows",
    "build_job_matrix",
    "diff_counters",
    "format_stats",
    "format_value",
    "group_by_host",
    "job_events_from_records",
    "job_matrix_from_json",
    "job_matrix_to_json",
    "normalize_records",
    "parse_stats",
    "parse_stats_file",
    "read_schema",
    "read_job_events",
    "window_from_json",
    "window_to_json",
    "write_job_events",
    "zscore_fit",
    "zscore_normalize",
]

logger = logging.getLogger(__name__)

SCHEMA_GRAMMAR_MODEL = str(pathlib.Path(__file__).parent / "schema.tx")
"""TextX metamodel for TACC_Stats schema lines"""

HEADER_KEYS = ("tacc_stats", "hostname", "uname", "uptime")

# per-device rows of these components are averaged; all others are summed
AVERAGED_COMPONENTS = frozenset({"cpu"})

# flag marking an event counter in a schema declaration
COUNTER_FLAG = "E"

# metrics whose sample standard deviation falls below this are constant
CONSTANT_STD = 1e-12

JOB_EVENT_FIELDS = ("job_id", "node_id", "start_ts", "end_ts")

_GROUP_RE = re.compile(r"^(\d+)\s+(\S+)\s*$")
_MARK_RE = re.compile(r"^%(begin|end)\s+(\S+)\s*$")


class IngestError(TensorTrackError):
    """Raised when telemetry input cannot be ingested"""

    pass


class StatsHeaderError(IngestError):
    """Raised when a stats file header is malformed"""

    pass


class StatsRecordError(IngestError):
    """Raised when a record line is malformed"""

    def __init__(self, message: str, lineno: Optional[int] = None, source: Optional[str] = None):
        self.lineno = lineno
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class SchemaMismatchError(IngestError):
    """Raised when files or records disagree on the metric schema"""

    pass


class UnsortedRecordsError(IngestError):
    """Raised when records are not strictly increasing in time"""

    pass


class InsufficientSamplesError(IngestError):
    """Raised when a metric has fewer than two samples to normalize"""

    pass


class EmptyRosterError(IngestError):
    """Raised when the node roster is empty"""

    pass


class JobEventsError(IngestError):
    """Raised when job events are malformed"""

    pass


class MetricKind(str, enum.Enum):
    """Whether a metric is a running counter or an instantaneous gauge"""

    COUNTER = "counter"
    GAUGE = "gauge"


@dataclass(frozen=True)
class MetricSpec:
    """One metric declaration of a component"""

    component: str
    name: str
    kind: MetricKind = MetricKind.COUNTER
    unit: Optional[str] = None

    @property
    def key(self) -> str:
        """Qualified name, unique within a schema"""
        return f"{self.component}.{self.name}"

    def declaration(self) -> str:
        """Render as a schema-line declaration, e.g. rd_sectors,E,U=512B"""
        text = self.name
        if self.kind is MetricKind.COUNTER:
            text += f",{COUNTER_FLAG}"
        if self.unit:
            text += f",U={self.unit}"
        return text


@dataclass(frozen=True)
class MetricSchema:
    """Ordered metric list grouped by component

    Metric keys (component.name) are unique; M is the flattened count.
    """

    metrics: Tuple[MetricSpec, ...]

    def __post_init__(self):
        keys = [m.key for m in self.metrics]
        if len(set(keys)) != len(keys):
            duplicates = sorted({k for k in keys if keys.count(k) > 1})
            raise SchemaMismatchError(f"Duplicate metrics in schema: {', '.join(duplicates)}")

    @classmethod
    def from_components(
        cls, components: Iterable[Tuple[str, Iterable[MetricSpec]]]
    ) -> MetricSchema:
        metrics = []
        for _, specs in components:
            metrics.extend(specs)
        return cls(tuple(metrics))

    @property
    def n_metrics(self) -> int:
        return len(self.metrics)

    @property
    def components(self) -> List[Tuple[str, Tuple[str, ...]]]:
        """Ordered (component, metric names) pairs"""
        grouped: Dict[str, List[str]] = {}
        for metric in self.metrics:
            grouped.setdefault(metric.component, []).append(metric.name)
        return [(component, tuple(names)) for component, names in grouped.items()]

    @property
    def keys(self) -> List[str]:
        return [m.key for m in self.metrics]

    @property
    def counter_mask(self) -> npt.NDArray[np.bool_]:
        return np.array([m.kind is MetricKind.COUNTER for m in self.metrics], dtype=bool)

    def component_slices(self) -> Dict[str, slice]:
        """Offset range of each component within a flattened record"""
        slices = {}
        offset = 0
        for component, names in self.components:
            slices[component] = slice(offset, offset + len(names))
            offset += len(names)
        return slices

    def specs_for(self, component: str) -> List[MetricSpec]:
        return [m for m in self.metrics if m.component == component]


@dataclass(frozen=True)
class StatsHeader:
    """Meta-data lines at the top of a stats file"""

    version: str
    hostname: str
    uname: str = ""
    uptime: str = ""


@dataclass(frozen=True, eq=False)
class StatsRecord:
    """Readings for one host at one timestamp, flattened in schema order

    mark is "begin" or "end" for records taken when a job starts or
    terminates (mark_jobid names the job), None for periodic records.
    """

    host: str
    timestamp: int
    values: npt.NDArray[np.float64]
    jobid: str = "0"
    mark: Optional[str] = None
    mark_jobid: Optional[str] = None

    def __post_init__(self):
        if self.timestamp <= 0:
            raise StatsRecordError(f"Timestamp must be positive, got {self.timestamp}")
        values = np.array(self.values, dtype=np.float64)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def replace_values(self, values: npt.ArrayLike) -> StatsRecord:
        return StatsRecord(
            host=self.host,
            timestamp=self.timestamp,
            values=values,
            jobid=self.jobid,
            mark=self.mark,
            mark_jobid=self.mark_jobid,
        )


@dataclass(frozen=True, eq=False)
class StatsFile:
    """Result of parsing one stats stream"""

    header: StatsHeader
    schema: MetricSchema
    records: List[StatsRecord]
    unknown_components: int = 0


class SchemaModel:
    """Parser model for TACC_Stats schema lines"""

    # implemented as Singleton

    def __new__(cls, *args, **kwargs):
        """create new object or return instance of already created singleton"""
        if not hasattr(cls, "instance") or not cls.instance:
            cls.instance = super().__new__(cls)

        return cls.instance

    def __init__(self):
        """return existing singleton or create a new one"""

        if hasattr(self, "metamodel"):
            return

        self.metamodel = metamodel_from_file(SCHEMA_GRAMMAR_MODEL)

    def parse(self, line: str) -> Tuple[str, List[MetricSpec]]:
        """Parse a schema line into its component and metric specs"""
        model = self.metamodel.model_from_str(line)
        specs = []
        for decl in model.metrics:
            kind = MetricKind.GAUGE
            unit = None
            for flag in decl.flags:
                if flag.key == COUNTER_FLAG:
                    kind = MetricKind.COUNTER
                elif flag.key == "U":
                    unit = flag.value
            specs.append(MetricSpec(model.component, decl.name, kind, unit))
        return model.component, specs


def format_value(value: float) -> str:
    """Render a reading the way the stats writer does: integers without a fraction"""
    value = float(value)
    if value.is_integer():
        return str(int(value))
    return repr(value)


DeviceRows = Callable[[str, npt.NDArray], Iterable[Tuple[str, Sequence[float]]]]


def _single_device(component: str, values: npt.NDArray) -> List[Tuple[str, Sequence[float]]]:
    return [("-", list(values))]


def format_stats(
    header: StatsHeader,
    schema: MetricSchema,
    records: Iterable[StatsRecord],
    device_rows: DeviceRows = _single_device,
) -> str:
    """Render a stats stream that parse_stats reads back to the same values

    device_rows splits a component's values into (device, row) pairs; the
    default writes one row per component. Values are written exactly, so
    parsing the text reproduces every reading bit for bit.
    """
    lines = [
        f"$tacc_stats {header.version}",
        f"$hostname {header.hostname}",
        f"$uname {header.uname}",
        f"$uptime {header.uptime}",
    ]
    for component, _ in schema.components:
        lines.append(f"!{component} " + " ".join(s.declaration() for s in schema.specs_for(component)))
    slices = schema.component_slices()
    for r in records:
        lines.append("")
        lines.append(f"{r.timestamp} {r.jobid}")
        if r.mark:
            lines.append(f"%{r.mark} {r.mark_jobid}")
        for component, where in slices.items():
            for device, row in device_rows(component, r.values[where]):
                lines.append(f"{component} {device} " + " ".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


class StatsParser:
    """Parser for TACC_Stats-style text streams

    The stream starts with a header (tacc_stats version, hostname, uname,
    uptime, then one schema line per component) followed by record groups.
    Each group opens with "<unix_ts> <jobid>", may contain "%begin <jobid>" or
    "%end <jobid>" mark lines, and holds "<component> <device> <values...>"
    lines. Device rows are summed per component, except cpu rows which are
    averaged.
    """

    def __init__(self, source: Optional[str] = None):
        self.source = source
        self.model = SchemaModel()
        self.unknown_components = 0

    def parse(self, stream: Union[str, TextIO, Iterable[str]]) -> StatsFile:
        if isinstance(stream, str):
            stream = stream.splitlines()
        lines = enumerate(stream, start=1)

        meta: Dict[str, str] = {}
        components: List[Tuple[str, List[MetricSpec]]] = []
        first_group = None
        for lineno, line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if _GROUP_RE.match(line):
                first_group = (lineno, line)
                break
            key, _, rest = line.partition(" ")
            key = key.lstrip("$")
            if key in HEADER_KEYS:
                meta[key] = rest.strip()
                continue
            try:
                components.append(self.model.parse(line))
            except TextXSyntaxError as e:
                raise StatsHeaderError(
                    f"{self._where(lineno)}malformed schema line {line!r}: {e}"
                ) from e

        for key in ("tacc_stats", "hostname"):
            if key not in meta:
                raise StatsHeaderError(f"{self._where(None)}header is missing '{key}' line")
        if not components:
            raise StatsHeaderError(f"{self._where(None)}header has no schema lines")

        header = StatsHeader(
            version=meta["tacc_stats"],
            hostname=meta["hostname"],
            uname=meta.get("uname", ""),
            uptime=meta.get("uptime", ""),
        )
        schema = MetricSchema.from_components(components)
        records = []
        if first_group is not None:
            records = self._parse_records(first_group, lines, header, schema)
        if self.unknown_components:
            logger.warning(
                "%sskipped %d lines of components not in the schema",
                self._where(None),
                self.unknown_components,
            )
        return StatsFile(header, schema, records, self.unknown_components)

    def _where(self, lineno: Optional[int]) -> str:
        where = f"{self.source}:" if self.source else ""
        if lineno is not None:
            where += f"{lineno}:"
        return f"{where} " if where else ""

    def _parse_records(self, first_group, lines, header, schema) -> List[StatsRecord]:
        slices = schema.component_slices()
        records = []
        group = None

        def close_group():
            if group is None:
                return
            records.append(self._finish_group(group, header, schema, slices))

        pending = [first_group]
        for lineno, line in _chain(pending, lines):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            match = _GROUP_RE.match(line)
            if match:
                close_group()
                group = _Group(lineno, int(match[1]), match[2])
                continue
            mark = _MARK_RE.match(line)
            if mark:
                group.mark, group.mark_jobid = mark[1], mark[2]
                continue
            parts = line.split()
            if len(parts) < 3:
                raise StatsRecordError(f"malformed record line {line!r}", lineno, self.source)
            component, _device, raw = parts[0], parts[1], parts[2:]
            if component not in slices:
                self.unknown_components += 1
                continue
            expected = slices[component].stop - slices[component].start
            if len(raw) != expected:
                raise StatsRecordError(
                    f"component '{component}' has {len(raw)} values but the schema declares {expected}",
                    lineno,
                    self.source,
                )
            try:
                values = np.array([float(v) for v in raw])
            except ValueError as e:
                raise StatsRecordError(f"non-numeric value in {line!r}", lineno, self.source) from e
            group.add(component, values)
        close_group()
        return records

    def _finish_group(self, group, header, schema, slices) -> StatsRecord:
        values = np.zeros(schema.n_metrics)
        for component, where in slices.items():
            if component not in group.sums:
                raise StatsRecordError(
                    f"record group at {group.timestamp} has no '{component}' rows",
                    group.lineno,
                    self.source,
                )
            total = group.sums[component]
            if component in AVERAGED_COMPONENTS:
                total = total / group.devices[component]
            values[where] = total
        return StatsRecord(
            host=header.hostname,
            timestamp=group.timestamp,
            values=values,
            jobid=group.jobid,
            mark=group.mark,
            mark_jobid=group.mark_jobid,
        )


class _Group:
    """Accumulates device rows for one record group"""

    def __init__(self, lineno: int, timestamp: int, jobid: str):
        self.lineno = lineno
        self.timestamp = timestamp
        self.jobid = jobid
        self.mark = None
        self.mark_jobid = None
        self.sums: Dict[str, npt.NDArray] = {}
        self.devices: Dict[str, int] = defaultdict(int)

    def add(self, component: str, values: npt.NDArray):
        if component in self.sums:
            self.sums[component] = self.sums[component] + values
        else:
            self.sums[component] = values
        self.devices[component] += 1


def _chain(first, rest):
    yield from first
    yield from rest


def parse_stats(stream: Union[str, TextIO, Iterable[str]], source: Optional[str] = None) -> StatsFile:
    """Parse a TACC_Stats-style stream into its header, schema and records"""
    return StatsParser(source).parse(stream)


def parse_stats_file(path: Union[str, pathlib.Path]) -> StatsFile:
    """Parse a stats file from disk"""
    path = pathlib.Path(path)
    with open(path, "r") as fd:
        return parse_stats(fd, source=str(path))


def read_schema(path: Union[str, pathlib.Path]) -> MetricSchema:
    """Read a schema file: one schema line per component, header and comment lines ignored"""
    path = pathlib.Path(path)
    model = SchemaModel()
    components = []
    with open(path, "r") as fd:
        for lineno, line in enumerate(fd, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.lstrip("$").split(" ")[0] in HEADER_KEYS:
                continue
            try:
                components.append(model.parse(line))
            except TextXSyntaxError as e:
                raise StatsHeaderError(f"{path}:{lineno}: malformed schema line {line!r}: {e}") from e
    if not components:
        raise StatsHeaderError(f"{path}: no schema lines")
    return MetricSchema.from_components(components)


def group_by_host(records: Iterable[StatsRecord]) -> Dict[str, List[StatsRecord]]:
    """Split records per host, each list sorted by timestamp"""
    hosts: Dict[str, List[StatsRecord]] = defaultdict(list)
    for record in records:
        hosts[record.host].append(record)
    return {host: sorted(recs, key=lambda r: r.timestamp) for host, recs in sorted(hosts.items())}


class CounterDiff(NamedTuple):
    """Rate records produced by diff_counters and the number of clamped resets"""

    records: List[StatsRecord]
    resets: int


def diff_counters(records: Sequence[StatsRecord], schema: MetricSchema) -> CounterDiff:
    """Convert counter readings of one host to per-interval differences

    Counter metrics become the difference with the previous record (negative
    differences from counter resets are clamped to 0 and counted); gauge
    metrics are carried from the later record. The output has one record less
    than the input, timestamped at the later endpoint.

    Raises:
        UnsortedRecordsError if timestamps are not strictly increasing
    """
    if not records:
        return CounterDiff([], 0)
    hosts = {r.host for r in records}
    if len(hosts) > 1:
        raise IngestError(f"diff_counters expects one host, got {', '.join(sorted(hosts))}")
    for earlier, later in zip(records, records[1:]):
        if later.timestamp <= earlier.timestamp:
            raise UnsortedRecordsError(
                f"Records for host {later.host} are not strictly increasing: "
                f"{earlier.timestamp} then {later.timestamp}"
            )

    counters = schema.counter_mask
    rates = []
    resets = 0
    for earlier, later in zip(records, records[1:]):
        values = np.array(later.values)
        delta = later.values[counters] - earlier.values[counters]
        negative = delta < 0
        resets += int(negative.sum())
        delta[negative] = 0.0
        values[counters] = delta
        rates.append(later.replace_values(values))
    if resets:
        logger.warning("host %s: clamped %d counter resets to 0", records[0].host, resets)
    return CounterDiff(rates, resets)


@dataclass(frozen=True, eq=False)
class ZScoreParams:
    """Per-metric mean and sample standard deviation of a normalization corpus"""

    mean: npt.NDArray[np.float64]
    std: npt.NDArray[np.float64]
    constant: npt.NDArray[np.bool_]

    def apply(self, values: npt.ArrayLike) -> npt.NDArray[np.float64]:
        """Normalize values (..., M); constant metrics map to 0"""
        values = np.asarray(values, dtype=np.float64)
        scale = np.where(self.constant, 1.0, self.std)
        normalized = (values - self.mean) / scale
        return np.where(self.constant, 0.0, normalized)


def zscore_fit(values: npt.ArrayLike) -> ZScoreParams:
    """Fit per-metric normalization on a samples x M array

    Raises:
        InsufficientSamplesError if there are fewer than 2 samples
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, np.newaxis]
    if values.shape[0] < 2:
        raise InsufficientSamplesError(
            f"Need at least 2 samples per metric to normalize, got {values.shape[0]}"
        )
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1)
    constant = std < CONSTANT_STD
    if constant.any():
        logger.debug("%d constant metrics map to 0", int(constant.sum()))
    return ZScoreParams(mean, std, constant)


def zscore_normalize(
    values: npt.ArrayLike,
) -> Tuple[npt.NDArray[np.float64], ZScoreParams]:
    """Normalize each metric (column) to zero mean and unit sample variance"""
    params = zscore_fit(values)
    normalized = params.apply(values)
    if normalized.ndim == 2 and np.ndim(values) == 1:
        normalized = normalized[:, 0]
    return normalized, params


def normalize_records(records: Iterable[StatsRecord], params: ZScoreParams) -> List[StatsRecord]:
    """Apply frozen normalization parameters to rate records"""
    return [r.replace_values(params.apply(r.values)) for r in records]


@dataclass(frozen=True, eq=False)
class UsageWindow:
    """N x T x M tensor of T consecutive slices starting at start

    missing counts filled-in cells; degraded is set when more than 20% of the
    cells were filled.
    """

    start: int
    nodes: Tuple[str, ...]
    tensor: Tensor3
    period: int = DEFAULT_PERIOD
    missing: int = 0
    degraded: bool = False

    def __post_init__(self):
        if len(self.nodes) != self.tensor.n_nodes:
            raise IngestError(
                f"Window has {len(self.nodes)} nodes but tensor dims {self.tensor.dims}"
            )

    @property
    def window_len(self) -> int:
        return self.tensor.n_time

    @property
    def end(self) -> int:
        """Exclusive end time of the window"""
        return self.start + self.window_len * self.period

    def select_nodes(self, indices: Sequence[int]) -> UsageWindow:
        return UsageWindow(
            start=self.start,
            nodes=tuple(self.nodes[i] for i in indices),
            tensor=self.tensor.select_nodes(indices),
            period=self.period,
            missing=self.missing,
            degraded=self.degraded,
        )


def assemble_windows(
    records: Iterable[StatsRecord],
    window_len: int,
    node_roster: Sequence[str],
    period: int = DEFAULT_PERIOD,
    start: Optional[int] = None,
) -> List[UsageWindow]:
    """Partition normalized rate records into consecutive non-overlapping windows

    Slice index is round((timestamp - start) / period); start defaults to the
    earliest periodic timestamp. A trailing partial window is dropped. Cells of
    a node missing at a slice are filled with 0 (the normalized mean).
    Records taken at job start or end (mark set) are not assembled. When two
    records of a node fall in the same slice the last one read is kept and the
    collision is logged.

    Raises:
        EmptyRosterError if node_roster is empty
    """
    if not node_roster:
        raise EmptyRosterError("Node roster is empty")
    if window_len < 2:
        raise IngestError(f"Window length must be >= 2, got {window_len}")

    periodic = [r for r in records if r.mark is None]
    if not periodic:
        return []

    index = {node: i for i, node in enumerate(node_roster)}
    origin = start if start is not None else min(r.timestamp for r in periodic)
    n_metrics = len(periodic[0].values)

    cells: Dict[Tuple[int, int], npt.NDArray] = {}
    unknown = 0
    duplicates = 0
    for record in periodic:
        node = index.get(record.host)
        if node is None:
            unknown += 1
            continue
        if len(record.values) != n_metrics:
            raise SchemaMismatchError(
                f"Record for {record.host} at {record.timestamp} has {len(record.values)} "
                f"values, expected {n_metrics}"
            )
        slot = int(round((record.timestamp - origin) / period))
        if slot < 0:
            continue
        if (node, slot) in cells:
            duplicates += 1
            logger.debug("%s at %d replaces an earlier sample in slice %d", record.host, record.timestamp, slot)
        cells[(node, slot)] = record.values
    if unknown:
        logger.warning("ignored %d records from hosts not on the roster", unknown)
    if duplicates:
        logger.warning("%d records landed in an already filled slice; kept the last one read", duplicates)
    if not cells:
        return []

    n_slices = max(slot for _, slot in cells) + 1
    n_nodes = len(node_roster)
    windows = []
    for w in range(n_slices // window_len):
        data = np.zeros((n_nodes, window_len, n_metrics))
        missing = 0
        for node in range(n_nodes):
            for tau in range(window_len):
                values = cells.get((node, w * window_len + tau))
                if values is None:
                    missing += n_metrics
                else:
                    data[node, tau, :] = values
        degraded = missing > DEGRADED_FRACTION * data.size
        window_start = origin + w * window_len * period
        if missing:
            logger.warning(
                "window %d: filled %d missing cells%s",
                window_start,
                missing,
                " (degraded)" if degraded else "",
            )
        windows.append(
            UsageWindow(
                start=window_start,
                nodes=tuple(node_roster),
                tensor=Tensor3(data),
                period=period,
                missing=missing,
                degraded=degraded,
            )
        )
    return windows


class JobEvent(NamedTuple):
    """One node's participation in a job over [start, end]"""

    job_id: str
    node_id: str
    start: int
    end: int


@dataclass(frozen=True, eq=False)
class JobMatrix:
    """Binary node x job incidence for a window; rows follow the window's node order"""

    nodes: Tuple[str, ...]
    jobs: Tuple[str, ...]
    entries: npt.NDArray[np.int8]

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.int8).reshape(len(self.nodes), len(self.jobs))
        if not np.isin(entries, (0, 1)).all():
            raise JobEventsError("Job matrix entries must be 0 or 1")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    @property
    def n_jobs(self) -> int:
        return len(self.jobs)

    def select_nodes(self, indices: Sequence[int]) -> JobMatrix:
        indices = list(indices)
        return JobMatrix(
            nodes=tuple(self.nodes[i] for i in indices),
            jobs=self.jobs,
            entries=self.entries[indices, :],
        )


def _job_sort_key(job_id: str):
    return (0, int(job_id), "") if job_id.isdigit() else (1, 0, job_id)


def build_job_matrix(job_events: Iterable[JobEvent], window: UsageWindow) -> JobMatrix:
    """Job incidence of the window's nodes for jobs overlapping [start, start + T * period)

    Events on nodes not on the window's roster are ignored and counted.
    """
    index = {node: i for i, node in enumerate(window.nodes)}
    overlapping = []
    unknown = 0
    for event in job_events:
        if event.start > event.end:
            raise JobEventsError(
                f"Job {event.job_id} on {event.node_id} starts after it ends ({event.start} > {event.end})"
            )
        if event.start >= window.end or event.end < window.start:
            continue
        if event.node_id not in index:
            unknown += 1
            continue
        overlapping.append(event)
    if unknown:
        logger.warning(
            "window %d: ignored %d job events on nodes not on the roster", window.start, unknown
        )

    jobs = sorted({e.job_id for e in overlapping}, key=_job_sort_key)
    columns = {job: j for j, job in enumerate(jobs)}
    entries = np.zeros((len(window.nodes), len(jobs)), dtype=np.int8)
    for event in overlapping:
        entries[index[event.node_id], columns[event.job_id]] = 1
    return JobMatrix(nodes=tuple(window.nodes), jobs=tuple(jobs), entries=entries)


def job_events_from_records(records: Iterable[StatsRecord]) -> List[JobEvent]:
    """Pair %begin/%end mark records into job events

    A begin without an end runs to the host's last record; an end without a
    begin starts at the host's first record.
    """
    first: Dict[str, int] = {}
    last: Dict[str, int] = {}
    open_jobs: Dict[Tuple[str, str], int] = {}
    events = []
    for record in sorted(records, key=lambda r: (r.timestamp, r.host)):
        host = record.host
        first.setdefault(host, record.timestamp)
        last[host] = record.timestamp
        if record.mark == "begin":
            open_jobs[(record.mark_jobid, host)] = record.timestamp
        elif record.mark == "end":
            begin = open_jobs.pop((record.mark_jobid, host), first[host])
            events.append(JobEvent(record.mark_jobid, host, begin, record.timestamp))
    for (job_id, host), begin in open_jobs.items():
        events.append(JobEvent(job_id, host, begin, last[host]))
    return sorted(events, key=lambda e: (e.start, _job_sort_key(e.job_id), e.node_id))


def read_job_events(stream: Union[str, pathlib.Path, TextIO]) -> List[JobEvent]:
    """Read job events from CSV with header job_id,node_id,start_ts,end_ts"""
    if isinstance(stream, (str, pathlib.Path)):
        with open(stream, "r", newline="") as fd:
            return read_job_events(fd)

    reader = csv.DictReader(stream)
    if reader.fieldnames is None or not set(JOB_EVENT_FIELDS) <= set(reader.fieldnames):
        raise JobEventsError(
            f"Job events CSV must have columns {','.join(JOB_EVENT_FIELDS)}, got {reader.fieldnames}"
        )
    events = []
    for lineno, row in enumerate(reader, start=2):
        try:
            event = JobEvent(
                row["job_id"], row["node_id"], int(row["start_ts"]), int(row["end_ts"])
            )
        except (TypeError, ValueError) as e:
            raise JobEventsError(f"line {lineno}: malformed job event {row}") from e
        if event.start > event.end:
            raise JobEventsError(f"line {lineno}: job {event.job_id} starts after it ends")
        events.append(event)
    return events


def write_job_events(events: Iterable[JobEvent], stream: TextIO) -> None:
    """Write job events as CSV"""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(JOB_EVENT_FIELDS)
    for event in events:
        writer.writerow([event.job_id, event.node_id, event.start, event.end])


def window_to_json(window: UsageWindow) -> dict:
    """Checkpoint form of a window; data is base64 of little-endian float64 in canonical layout"""
    payload = np.ascontiguousarray(window.tensor.data, dtype="<f8").tobytes()
    return {
        "start": window.start,
        "period": window.period,
        "nodes": list(window.nodes),
        "dims": list(window.tensor.dims),
        "missing": window.missing,
        "degraded": window.degraded,
        "encoding": "base64-f64le",
        "data": base64.b64encode(payload).decode("ascii"),
    }


def window_from_json(data: dict) -> UsageWindow:
    if data.get("encoding") != "base64-f64le":
        raise IngestError(f"Unsupported window encoding {data.get('encoding')!r}")
    values = np.frombuffer(base64.b64decode(data["data"]), dtype="<f8")
    return UsageWindow(
        start=int(data["start"]),
        nodes=tuple(data["nodes"]),
        tensor=Tensor3.from_flat(values, data["dims"]),
        period=int(data["period"]),
        missing=int(data["missing"]),
        degraded=bool(data["degraded"]),
    )


def job_matrix_to_json(jm: JobMatrix) -> dict:
    return {
        "nodes": list(jm.nodes),
        "jobs": list(jm.jobs),
        "entries": jm.entries.tolist(),
    }


def job_matrix_from_json(data: dict) -> JobMatrix:
    nodes = tuple(data["nodes"])
    jobs = tuple(data["jobs"])
    entries = np.array(data["entries"], dtype=np.int8).reshape(len(nodes), len(jobs))
    return JobMatrix(nodes=nodes, jobs=jobs, entries=entries)
