"""Parse syslog lines and report how critical log errors co-occur with anomalous windows"""

from __future__ import annotations

import bisect
import csv
import datetime
import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

from datetime_tzutils import datetime_naive_to_utc

from .detect import AnomalyEvent
from .errorstat import ErrorSeries, format_float
from .plugins import plugin_manager

__all__ = [
    "BUILTIN_RULES",
    "DEFAULT_CRITICAL",
    "CorrelationReport",
    "LogEvent",
    "SeverityClass",
    "SyslogParser",
    "WindowLogCounts",
    "classify",
    "correlate",
    "correlation_to_csv",
    "correlation_to_json",
    "parse_syslog",
    "severity_rules",
]

logger = logging.getLogger(__name__)


class SeverityClass(str, enum.Enum):
    """Class of a syslog message, assigned by the first matching rule"""

    CRITICAL_UNREACHABLE = "critical_unreachable"
    LUSTRE_INODE_FAILURE = "lustre_inode_failure"
    LUSTRE_WRITE_ERROR = "lustre_write_error"
    LUSTRE_COMM_ERROR = "lustre_comm_error"
    SEGFAULT = "segfault"
    OTHER = "other"


# (case-insensitive substring, class); checked in order, first match wins
BUILTIN_RULES: Tuple[Tuple[str, SeverityClass], ...] = (
    ("host unreachable", SeverityClass.CRITICAL_UNREACHABLE),
    ("ll_inode_revalidate_fini", SeverityClass.LUSTRE_INODE_FAILURE),
    ("write error", SeverityClass.LUSTRE_WRITE_ERROR),
    ("ptlrpc_expire_one_request", SeverityClass.LUSTRE_COMM_ERROR),
    ("segfault", SeverityClass.SEGFAULT),
)

DEFAULT_CRITICAL = frozenset(
    {
        SeverityClass.CRITICAL_UNREACHABLE,
        SeverityClass.LUSTRE_WRITE_ERROR,
        SeverityClass.LUSTRE_COMM_ERROR,
    }
)

MONTHS = {
    name: number
    for number, name in enumerate(
        ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"),
        start=1,
    )
}

# Feb 16 04:30:50 c318-116 kernel: message
SYSLOG_RE = re.compile(
    r"^(?P<month>[A-Z][a-z]{2})\s+(?P<day>\d{1,2})\s+"
    r"(?P<hour>\d{2}):(?P<minute>\d{2}):(?P<second>\d{2})\s+"
    r"(?P<host>\S+)\s+(?P<facility>[^\s:]+):\s?(?P<message>.*)$"
)


@dataclass(frozen=True)
class LogEvent:
    """One syslog message"""

    timestamp: int
    host: str
    facility: str
    message: str
    severity_class: SeverityClass


def severity_rules() -> List[Tuple[str, SeverityClass]]:
    """Built-in rules followed by the rules contributed by plugins"""
    rules = list(BUILTIN_RULES)
    for plugin_rules in plugin_manager().hook.get_severity_rules():
        for pattern, severity in plugin_rules:
            rules.append((pattern, SeverityClass(severity)))
    return rules


def classify(message: str, rules: Optional[Sequence[Tuple[str, SeverityClass]]] = None) -> SeverityClass:
    """Class of the first rule whose pattern occurs in message, ignoring case"""
    rules = BUILTIN_RULES if rules is None else rules
    lowered = message.lower()
    for pattern, severity in rules:
        if pattern.lower() in lowered:
            return severity
    return SeverityClass.OTHER


class SyslogParser:
    """Parse "Mon DD HH:MM:SS host facility: message" lines

    Syslog omits the year so it must be supplied; times are taken as UTC.
    Lines that do not parse are skipped and counted in skipped.
    """

    def __init__(self, year: int, rules: Optional[Sequence[Tuple[str, SeverityClass]]] = None):
        self.year = year
        self.rules = severity_rules() if rules is None else list(rules)
        self.skipped = 0

    def parse_line(self, line: str) -> Optional[LogEvent]:
        match = SYSLOG_RE.match(line.strip())
        if not match or match["month"] not in MONTHS:
            return None
        try:
            naive = datetime.datetime(
                self.year,
                MONTHS[match["month"]],
                int(match["day"]),
                int(match["hour"]),
                int(match["minute"]),
                int(match["second"]),
            )
        except ValueError:
            return None
        message = match["message"]
        return LogEvent(
            timestamp=int(datetime_naive_to_utc(naive).timestamp()),
            host=match["host"],
            facility=match["facility"],
            message=message,
            severity_class=classify(message, self.rules),
        )

    def parse(self, lines: Union[str, Iterable[str]]) -> List[LogEvent]:
        if isinstance(lines, str):
            lines = lines.splitlines()
        events = []
        for line in lines:
            if not line.strip():
                continue
            event = self.parse_line(line)
            if event is None:
                self.skipped += 1
                continue
            events.append(event)
        if self.skipped:
            logger.warning("skipped %d unparseable syslog lines", self.skipped)
        return events


def parse_syslog(lines: Union[str, Iterable[str]], year: int) -> List[LogEvent]:
    """Parse syslog lines into LogEvents, skipping lines that do not parse"""
    return SyslogParser(year).parse(lines)


@dataclass(frozen=True)
class WindowLogCounts:
    """Per-class message counts of one window"""

    window_start: int
    anomalous: bool
    counts: Dict[SeverityClass, int]

    def has_any(self, classes: Iterable[SeverityClass]) -> bool:
        return any(self.counts.get(c, 0) > 0 for c in classes)


@dataclass(frozen=True)
class CorrelationReport:
    """Log class counts per window and the share of windows holding a critical message"""

    windows: Tuple[WindowLogCounts, ...]
    anomalous_critical_fraction: float
    normal_critical_fraction: float
    critical: Tuple[SeverityClass, ...] = field(default_factory=tuple)
    unassigned: int = 0

    @property
    def n_anomalous(self) -> int:
        return sum(1 for w in self.windows if w.anomalous)


def _fraction(rows: List[WindowLogCounts], critical) -> float:
    if not rows:
        return 0.0
    return sum(1 for r in rows if r.has_any(critical)) / len(rows)


def correlate(
    events: Iterable[LogEvent],
    series: ErrorSeries,
    anomalies: Iterable[AnomalyEvent],
    window_len_secs: int,
    critical: Iterable[SeverityClass] = DEFAULT_CRITICAL,
) -> CorrelationReport:
    """Bucket log events into the series' windows and compare anomalous with normal windows

    A message belongs to the window with start <= timestamp < start +
    window_len_secs. Messages outside every window are counted in unassigned.
    """
    if window_len_secs <= 0:
        raise ValueError(f"window_len_secs must be > 0, got {window_len_secs}")
    critical = tuple(sorted({SeverityClass(c) for c in critical}, key=lambda c: c.value))
    anomalous = {a.window_start for a in anomalies}
    starts = series.window_starts
    counts = [{c: 0 for c in SeverityClass} for _ in starts]

    unassigned = 0
    for event in events:
        slot = _window_slot(event.timestamp, starts, window_len_secs)
        if slot is None:
            unassigned += 1
            continue
        counts[slot][event.severity_class] += 1
    if unassigned:
        logger.debug("%d log events fall outside every window", unassigned)

    rows = tuple(
        WindowLogCounts(start, start in anomalous, counts[i]) for i, start in enumerate(starts)
    )
    return CorrelationReport(
        windows=rows,
        anomalous_critical_fraction=_fraction([r for r in rows if r.anomalous], critical),
        normal_critical_fraction=_fraction([r for r in rows if not r.anomalous], critical),
        critical=critical,
        unassigned=unassigned,
    )


def _window_slot(timestamp: int, starts: List[int], window_len_secs: int) -> Optional[int]:
    """Index of the window containing timestamp; windows may be separated by gaps"""
    i = bisect.bisect_right(starts, timestamp) - 1
    if i >= 0 and timestamp < starts[i] + window_len_secs:
        return i
    return None


def correlation_to_csv(report: CorrelationReport, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["window_start", "anomalous", *[c.value for c in SeverityClass]])
    for row in report.windows:
        writer.writerow(
            [row.window_start, "true" if row.anomalous else "false", *[row.counts[c] for c in SeverityClass]]
        )


def correlation_to_json(report: CorrelationReport) -> dict:
    return {
        "windows": [
            {
                "window_start": row.window_start,
                "anomalous": row.anomalous,
                "counts": {c.value: row.counts[c] for c in SeverityClass},
            }
            for row in report.windows
        ],
        "summary": {
            "critical": [c.value for c in report.critical],
            "anomalous_windows": report.n_anomalous,
            "normal_windows": len(report.windows) - report.n_anomalous,
            "anomalous_critical_fraction": float(format_float(report.anomalous_critical_fraction)),
            "normal_critical_fraction": float(format_float(report.normal_critical_fraction)),
            "unassigned_events": report.unassigned,
        },
    }
