"""Run the tracking pipeline: ingest, window, error statistic, detection, log correlation"""

from __future__ import annotations

import contextlib
import dataclasses
import datetime
import glob
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from ._version import __version__
from .constants import APP_NAME, DEFAULT_THRESHOLD, DEFAULT_WARMUP, TensorTrackError
from .detect import AnomalyEvent, calibrate_threshold, events_to_json, run_detector, write_events_csv
from .errorstat import (
    ErrorSeries,
    Variant,
    compute_series,
    format_float,
    series_to_json,
    write_series_csv,
)
from .config import RunConfig
from .ingest import (
    IngestError,
    InsufficientSamplesError,
    JobEvent,
    JobMatrix,
    MetricSchema,
    SchemaMismatchError,
    StatsRecord,
    UsageWindow,
    assemble_windows,
    build_job_matrix,
    diff_counters,
    group_by_host,
    job_events_from_records,
    normalize_records,
    parse_stats_file,
    read_job_events,
    read_schema,
    zscore_fit,
)
from .logcorr import (
    DEFAULT_CRITICAL,
    CorrelationReport,
    SeverityClass,
    SyslogParser,
    correlate,
    correlation_to_csv,
    correlation_to_json,
)
from .utils import convert_to_json, sha256_file

__all__ = [
    "MANIFEST",
    "NoInputFilesError",
    "PreparedRun",
    "SWEEP_AXES",
    "TrackResult",
    "VALIDATE_MANIFEST",
    "detect",
    "expand_inputs",
    "prepare",
    "run_sweep",
    "run_track",
    "run_validate",
    "stage",
    "write_manifest",
    "write_report",
    "write_sweep_csv",
    "write_track_outputs",
]

logger = logging.getLogger(__name__)

SWEEP_AXES = ("time_rank", "metric_rank", "node_rank", "window_len")

MANIFEST = "manifest.json"

# validate usually writes next to a track run and keeps its manifest intact
VALIDATE_MANIFEST = "validate_manifest.json"


class NoInputFilesError(IngestError):
    """Raised when the input globs match no files"""

    pass


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag errors raised inside the block with the pipeline stage name"""
    try:
        yield
    except (TensorTrackError, np.linalg.LinAlgError) as e:
        if getattr(e, "stage", None) is None:
            e.stage = name
        raise


def expand_inputs(patterns: Iterable[str]) -> List[pathlib.Path]:
    """Files matched by the glob patterns, sorted and de-duplicated

    Raises:
        NoInputFilesError if nothing matches
    """
    files = set()
    for pattern in patterns:
        files.update(p for p in glob.glob(str(pattern), recursive=True) if pathlib.Path(p).is_file())
    if not files:
        raise NoInputFilesError(f"no input files match {', '.join(patterns) or '(no patterns)'}")
    return [pathlib.Path(f) for f in sorted(files)]


@dataclass(eq=False)
class PreparedRun:
    """Normalized rate records and job events ready to be windowed"""

    schema: MetricSchema
    roster: Tuple[str, ...]
    records: List[StatsRecord]
    job_events: List[JobEvent]
    origin: int
    counts: Dict[str, int] = field(default_factory=dict)

    def windows(self, window_len: int, period: int) -> List[UsageWindow]:
        return assemble_windows(self.records, window_len, self.roster, period, start=self.origin)

    def job_matrices(self, windows: Sequence[UsageWindow]) -> List[JobMatrix]:
        return [build_job_matrix(self.job_events, w) for w in windows]


def _check_schema(expected: MetricSchema, found: MetricSchema, source: pathlib.Path):
    if found.keys != expected.keys:
        missing = sorted(set(expected.keys) - set(found.keys))
        extra = sorted(set(found.keys) - set(expected.keys))
        detail = []
        if missing:
            detail.append(f"missing {', '.join(missing)}")
        if extra:
            detail.append(f"unexpected {', '.join(extra)}")
        raise SchemaMismatchError(
            f"{source}: schema differs from the expected schema ({'; '.join(detail) or 'metric order differs'})"
        )


def prepare(cfg: RunConfig) -> PreparedRun:
    """Parse, difference and normalize every input file"""
    counts: Dict[str, int] = {}
    with stage("ingest"):
        paths = expand_inputs(cfg.inputs)
        expected = read_schema(cfg.schema) if cfg.schema else None
        records: List[StatsRecord] = []
        unknown = 0
        for path in paths:
            parsed = parse_stats_file(path)
            if expected is None:
                expected = parsed.schema
            _check_schema(expected, parsed.schema, path)
            records.extend(parsed.records)
            unknown += parsed.unknown_components
        counts.update(files=len(paths), records=len(records), unknown_component_lines=unknown)

        if cfg.jobs:
            job_events = []
            for path in expand_inputs(cfg.jobs):
                job_events.extend(read_job_events(path))
        else:
            job_events = job_events_from_records(records)
        counts["job_events"] = len(job_events)

        rates: List[StatsRecord] = []
        resets = 0
        by_host = group_by_host(r for r in records if r.mark is None)
        for host_records in by_host.values():
            diff = diff_counters(host_records, expected)
            rates.extend(diff.records)
            resets += diff.resets
        counts.update(hosts=len(by_host), rate_records=len(rates), counter_resets=resets)
        if not rates:
            raise IngestError("inputs hold fewer than two periodic records per host")

        roster = tuple(cfg.roster) if cfg.roster else tuple(sorted(by_host))
        origin = min(r.timestamp for r in rates)
        training = rates
        if cfg.train_windows is not None:
            horizon = origin + cfg.train_windows * cfg.window_len * cfg.period
            training = [r for r in rates if r.timestamp < horizon]
        if len(training) < 2:
            raise InsufficientSamplesError(
                f"Need at least 2 rate records to fit the normalization, got {len(training)}"
            )
        params = zscore_fit(np.stack([r.values for r in training]))
        counts["constant_metrics"] = int(params.constant.sum())
        normalized = normalize_records(rates, params)

    logger.debug("prepared %d rate records from %d hosts", len(normalized), len(by_host))
    return PreparedRun(expected, roster, normalized, job_events, origin, counts)


@dataclass(eq=False)
class TrackResult:
    series: ErrorSeries
    events: List[AnomalyEvent]
    theta: Optional[float]
    counts: Dict[str, int]


def _score(cfg: RunConfig, prepared: PreparedRun, window_len: int, **overrides) -> Tuple[List[UsageWindow], ErrorSeries]:
    with stage("window"):
        windows = prepared.windows(window_len, cfg.period)
        if not windows:
            raise IngestError(
                f"inputs span fewer than {window_len} slices of {cfg.period} seconds; no complete window"
            )
        job_matrices = prepared.job_matrices(windows) if cfg.variant is Variant.CLUSTERED else None
    ranks = dataclasses.replace(cfg.ranks, **overrides) if overrides else cfg.ranks
    with stage("statistic"):
        series = compute_series(
            windows,
            job_matrices,
            variant=cfg.variant,
            ranks=ranks,
            k=cfg.clusters,
            seed=cfg.seed,
            cp_rank=cfg.cp_rank,
            rho=cfg.rho,
            opts=cfg.decomp_options,
            workers=cfg.workers,
        )
    return windows, series


def detect(cfg: RunConfig, series: ErrorSeries) -> Tuple[List[AnomalyEvent], Optional[float]]:
    """Run the configured detector; a calibrated threshold replaces theta when theta_sigmas is set"""
    params = dict(cfg.detector_params)
    theta = None
    with stage("detect"):
        if cfg.theta_sigmas is not None and cfg.detector == "threshold":
            warmup = int(params.pop("warmup", DEFAULT_WARMUP))
            theta = calibrate_threshold(series, warmup, cfg.theta_sigmas)
            params["theta"] = theta
            logger.info("calibrated threshold %.6g over %d warmup windows", theta, warmup)
        elif cfg.detector == "threshold":
            theta = float(params.get("theta", DEFAULT_THRESHOLD))
        elif cfg.theta_sigmas is not None:
            logger.warning(
                "theta_sigmas calibrates only the threshold detector; ignored for %s", cfg.detector
            )
        events = run_detector(cfg.detector, series, params)
    return events, theta


def run_track(cfg: RunConfig) -> TrackResult:
    """Full pipeline: ingest, window, statistic, detect"""
    prepared = prepare(cfg)
    windows, series = _score(cfg, prepared, cfg.window_len)
    events, theta = detect(cfg, series)
    counts = dict(prepared.counts)
    counts.update(
        windows=len(windows),
        degraded_windows=sum(1 for w in windows if w.degraded),
        events=len(events),
    )
    return TrackResult(series, events, theta, counts)


def write_track_outputs(result: TrackResult, outdir: pathlib.Path) -> Dict[str, pathlib.Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "series.csv": outdir / "series.csv",
        "series.json": outdir / "series.json",
        "events.csv": outdir / "events.csv",
        "events.json": outdir / "events.json",
    }
    with open(outputs["series.csv"], "w", newline="") as fd:
        write_series_csv(result.series, fd)
    outputs["series.json"].write_text(convert_to_json(series_to_json(result.series)))
    with open(outputs["events.csv"], "w", newline="") as fd:
        write_events_csv(result.events, fd)
    outputs["events.json"].write_text(convert_to_json(events_to_json(result.events)))
    return outputs


def run_sweep(cfg: RunConfig, axis: str, values: Sequence[int]) -> List[Tuple[int, float]]:
    """Mean epsilon over all windows for each value of axis, sorted by value"""
    if axis not in SWEEP_AXES:
        raise ValueError(f"Unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    if not values:
        raise ValueError("Sweep needs at least one value")
    prepared = prepare(cfg)
    rows = []
    for value in sorted(set(int(v) for v in values)):
        if value < 1 or (axis == "window_len" and value < 2):
            raise ValueError(f"Sweep value {value} is out of range for {axis}")
        if axis == "window_len":
            _, series = _score(cfg, prepared, value)
        else:
            _, series = _score(cfg, prepared, cfg.window_len, **{axis: value})
        mean = float(series.epsilons.mean())
        logger.debug("sweep %s=%d mean epsilon %.6g", axis, value, mean)
        rows.append((value, mean))
    return rows


def write_sweep_csv(rows: Sequence[Tuple[int, float]], path: pathlib.Path) -> None:
    lines = ["value,mean_epsilon"]
    lines.extend(f"{value},{format_float(mean)}" for value, mean in rows)
    path.write_text("\n".join(lines) + "\n")


def run_validate(
    series: ErrorSeries,
    events: List[AnomalyEvent],
    syslog_paths: Sequence[pathlib.Path],
    year: int,
    window_len_secs: int,
    critical: Iterable[SeverityClass] = DEFAULT_CRITICAL,
) -> Tuple[CorrelationReport, int]:
    """Correlate syslog files with a finished run; returns the report and the skipped line count"""
    with stage("correlate"):
        parser = SyslogParser(year)
        log_events = []
        for path in syslog_paths:
            with open(path, "r", errors="replace") as fd:
                log_events.extend(parser.parse(fd))
        report = correlate(log_events, series, events, window_len_secs, critical)
    return report, parser.skipped


def write_report(report: CorrelationReport, outdir: pathlib.Path) -> Dict[str, pathlib.Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = {"report.csv": outdir / "report.csv", "report.json": outdir / "report.json"}
    with open(outputs["report.csv"], "w", newline="") as fd:
        correlation_to_csv(report, fd)
    outputs["report.json"].write_text(convert_to_json(correlation_to_json(report)))
    return outputs


def write_manifest(
    outdir: pathlib.Path,
    command: str,
    config: Dict[str, Any],
    outputs: Dict[str, pathlib.Path],
    counts: Optional[Dict[str, Any]] = None,
    seeds: Optional[Dict[str, int]] = None,
    name: str = MANIFEST,
) -> pathlib.Path:
    """Record what produced the outputs in outdir, with the SHA-256 of each output file"""
    manifest = {
        "tool": APP_NAME,
        "command": command,
        "versions": {APP_NAME: __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config,
        "seeds": seeds or {},
        "counts": counts or {},
        "outputs": {name: sha256_file(path) for name, path in sorted(outputs.items())},
    }
    path = outdir / name
    path.write_text(convert_to_json(manifest))
    return path
