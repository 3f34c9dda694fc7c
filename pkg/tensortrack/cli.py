"""Command line interface for tensortrack"""

from __future__ import annotations

import contextlib
import dataclasses
import io
import json
import logging
import pathlib
import sys
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import click
import numpy as np
import yaml
from cloup import (
    Command,
    HelpFormatter,
    HelpTheme,
    Style,
    argument,
    constraint,
    group,
    option,
    option_group,
    version_option,
)
from cloup.constraints import mutually_exclusive
from rich.console import Console
from rich.logging import RichHandler
from rich.markdown import Markdown

from ._version import __version__
from .config import ConfigError, RunConfig, load_config_file
from .constants import (
    DEFAULT_PERIOD,
    DEFAULT_WINDOW_LEN,
    EXIT_CONFIG_ERROR,
    EXIT_INPUT_ERROR,
    EXIT_NUMERICAL_ERROR,
    TensorTrackError,
)
from .decompose import DecompositionError
from .detect import (
    DetectorError,
    InsufficientWarmupError,
    get_detector_help,
    read_events_csv,
)
from .errorstat import Variant, read_series_csv
from .ingest import IngestError
from .logcorr import DEFAULT_CRITICAL, SeverityClass
from .pipeline import (
    MANIFEST,
    SWEEP_AXES,
    VALIDATE_MANIFEST,
    run_sweep,
    run_track,
    run_validate,
    stage,
    write_manifest,
    write_report,
    write_sweep_csv,
    write_track_outputs,
)
from .synth import (
    AnomalyKind,
    SynthConfig,
    SynthConfigError,
    gen_feed,
    plant_anomalies,
    write_feed,
)
from .tensor import NonFiniteError, ShapeError
from .utils import bold, pluralize

# Set up rich console
_global_console = Console()
_global_console_stderr = Console(stderr=True)

# if True, shows verbose output, turned off via --quiet flag
_global_verbose = True


def verbose(message_str, **kwargs):
    if not _global_verbose:
        return
    _global_console.print(message_str, **kwargs)


def print_error(message):
    """Print error message to stderr with rich"""
    _global_console_stderr.print(message, style="bold red")


def print_warning(message):
    """Print warning message to stdout with rich"""
    _global_console.print(message, style="bold yellow")


def echo(message):
    """print to stdout using rich"""
    _global_console.print(message)


def setup_logging(level: int):
    """Send library log records through rich on stderr"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(RichHandler(console=_global_console_stderr, show_path=False, markup=False))
    root.setLevel(level)


def exit_code(error: BaseException) -> int:
    """Exit code for an error raised by a pipeline stage"""
    if isinstance(error, InsufficientWarmupError):
        return EXIT_INPUT_ERROR
    if isinstance(error, (ConfigError, SynthConfigError, DetectorError)):
        return EXIT_CONFIG_ERROR
    if isinstance(error, (DecompositionError, np.linalg.LinAlgError, ShapeError, NonFiniteError)):
        return EXIT_NUMERICAL_ERROR
    if isinstance(error, (IngestError, OSError)):
        return EXIT_INPUT_ERROR
    if isinstance(error, ValueError):
        return EXIT_CONFIG_ERROR
    return EXIT_INPUT_ERROR


@contextlib.contextmanager
def report_errors() -> Iterator[None]:
    """Print a diagnostic naming the failed stage and exit with its code"""
    try:
        yield
    except (TensorTrackError, np.linalg.LinAlgError, OSError, ValueError) as e:
        where = getattr(e, "stage", None)
        prefix = f"{where} failed: " if where else "Error: "
        print_error(f"{prefix}{e}")
        sys.exit(exit_code(e))


class TrackCommand(Command):
    """Custom cloup.command that overrides get_help() to list the detector plugins"""

    def get_help(self, ctx):
        help_text = super().get_help(ctx)
        formatter = HelpFormatter()

        formatter.write("\n\n")
        formatter.write(rich_text(bold("Detectors"), width=formatter.width))
        formatter.write("\n\n")
        for help_item in get_detector_help():
            # items are either markdown strings or lists of lists
            if type(help_item) is str:
                formatter.write(format_markdown_str(help_item, width=formatter.width))
                formatter.write("\n")
            elif isinstance(help_item, (tuple, list)):
                help_list = [tuple(rich_text(bold(col)) for col in help_item[0])]
                help_list.extend(tuple(h) for h in help_item[1:])
                formatter.write_dl(help_list)
                formatter.write("\n")
        formatter.write_text("")
        help_text += formatter.getvalue()
        return help_text


formatter_settings = HelpFormatter.settings(
    theme=HelpTheme(
        invoked_command=Style(fg="bright_yellow"),
        heading=Style(fg="bright_white", bold=True),
        constraint=Style(fg="magenta"),
        col1=Style(fg="bright_yellow"),
    )
)


def parse_params(values: Sequence[str]) -> Dict[str, Any]:
    """KEY=VALUE pairs to a dict; values are read as YAML scalars"""
    params = {}
    for item in values:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--param")
        params[key.strip()] = yaml.safe_load(value)
    return params


def parse_values(text: str) -> List[int]:
    """Sweep values: comma separated integers or START:STOP (inclusive) ranges"""
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ":" in part:
                first, last = (int(p) for p in part.split(":", 1))
                values.extend(range(first, last + 1))
            else:
                values.append(int(part))
        except ValueError as e:
            raise click.BadParameter(f"invalid sweep value {part!r}", param_hint="--values") from e
    if not values:
        raise click.BadParameter("no sweep values given", param_hint="--values")
    return values


def run_options(f):
    """Options shared by the track and sweep commands; each maps to a RunConfig field"""
    decorators = [
        option_group(
            "Inputs",
            option(
                "--config",
                "-c",
                "config_file",
                metavar="YAML",
                type=click.Path(exists=True, dir_okay=False),
                help="YAML file of run settings. Command line options override its values.",
            ),
            option("--schema", metavar="FILE", help="File whose schema every input must match."),
            option(
                "--jobs",
                "-j",
                metavar="GLOB",
                multiple=True,
                help="CSV file(s) of job events (job_id,node_id,start_ts,end_ts). "
                "Without --jobs, job events are read from %begin/%end marks in the inputs.",
            ),
            option(
                "--roster",
                metavar="HOST",
                multiple=True,
                help="Node order of the tensor; may be repeated. Default: sorted host names.",
            ),
        ),
        option_group(
            "Window",
            option("--window-len", "-T", type=int, help="Slices per window (default 18)."),
            option("--period", type=int, help="Sampling period in seconds (default 600)."),
            option(
                "--train-windows",
                type=int,
                help="Fit the per-metric normalization on the first N windows only.",
            ),
        ),
        option_group(
            "Statistic",
            option(
                "--statistic",
                type=click.Choice([v.value for v in Variant]),
                help="Error statistic (default clustered).",
            ),
            option("--node-rank", type=int, help="Node rank N' (default 50)."),
            option("--time-rank", type=int, help="Time rank T' (default 18)."),
            option("--metric-rank", type=int, help="Metric rank M' (default 30)."),
            option("--clusters", "-k", type=int, help="Job clusters K (default 5)."),
            option("--cp-rank", type=int, help="CP rank for the cp_forecast statistic (default 10)."),
            option("--rho", type=float, help="Temporal decay for the cp_forecast statistic (default 0.5)."),
            option("--tol", type=float, help="Relative change that stops HOOI / CP-ALS (default 1e-6)."),
            option("--max-iter", type=int, help="Iteration cap for HOOI / CP-ALS (default 50)."),
            option("--workers", type=int, help="Windows scored in parallel (default 1)."),
            option("--seed", type=int, help="Seed for clustering and CP initialization (default 0)."),
        ),
        option_group(
            "Output",
            option("--output", "-o", metavar="DIR", help="Output directory (default tensortrack_out)."),
        ),
        argument("inputs", nargs=-1),
    ]
    for decorator in reversed(decorators):
        f = decorator(f)
    return f


def _overrides(**kwargs) -> Dict[str, Any]:
    return {key: value for key, value in kwargs.items() if value is not None and value != ()}


@group(formatter_settings=formatter_settings)
@option("--verbose", "-V", "verbose_flag", is_flag=True, help="Print debug output from every stage.")
@option("--quiet", "-q", is_flag=True, help="Print errors only.")
@version_option(version=__version__)
def cli(verbose_flag: bool, quiet: bool):
    """Track HPC system behavior with tensor decompositions of resource usage telemetry"""
    global _global_verbose
    if verbose_flag and quiet:
        raise click.UsageError("--verbose and --quiet are mutually exclusive")
    _global_verbose = not quiet
    if verbose_flag:
        setup_logging(logging.DEBUG)
    elif quiet:
        setup_logging(logging.ERROR)
    else:
        setup_logging(logging.WARNING)


@cli.command(cls=TrackCommand, formatter_settings=formatter_settings)
@run_options
@option_group(
    "Detection",
    option("--detector", "-d", metavar="NAME", help="Detector plugin (default threshold)."),
    option(
        "--param",
        "-p",
        "params",
        metavar="KEY=VALUE",
        multiple=True,
        help="Detector parameter, e.g. -p theta=2.5 or -p lambda=0.2; may be repeated.",
    ),
    option("--theta", type=float, help="Threshold for the threshold detector (default 3.0)."),
    option(
        "--theta-sigmas",
        type=float,
        help="Calibrate the threshold as the warmup mean plus this many standard deviations. "
        "The warmup length is the warmup detector parameter (default 56).",
    ),
)
@constraint(mutually_exclusive, ["theta", "theta_sigmas"])
def track(
    config_file: Optional[str],
    schema: Optional[str],
    jobs: Tuple[str, ...],
    roster: Tuple[str, ...],
    window_len: Optional[int],
    period: Optional[int],
    train_windows: Optional[int],
    statistic: Optional[str],
    node_rank: Optional[int],
    time_rank: Optional[int],
    metric_rank: Optional[int],
    clusters: Optional[int],
    cp_rank: Optional[int],
    rho: Optional[float],
    tol: Optional[float],
    max_iter: Optional[int],
    workers: Optional[int],
    seed: Optional[int],
    output: Optional[str],
    inputs: Tuple[str, ...],
    detector: Optional[str],
    params: Tuple[str, ...],
    theta: Optional[float],
    theta_sigmas: Optional[float],
):
    """Compute the error series of INPUTS (stats files or globs) and flag anomalous windows"""
    detector_params = parse_params(params)
    if theta is not None:
        detector_params["theta"] = theta
    with report_errors():
        cfg = RunConfig.from_sources(
            config_file,
            _overrides(
                schema=schema,
                inputs=inputs,
                jobs=jobs,
                roster=roster,
                window_len=window_len,
                period=period,
                train_windows=train_windows,
                statistic=statistic,
                node_rank=node_rank,
                time_rank=time_rank,
                metric_rank=metric_rank,
                clusters=clusters,
                cp_rank=cp_rank,
                rho=rho,
                tol=tol,
                max_iter=max_iter,
                workers=workers,
                seed=seed,
                output=output,
                detector=detector,
                detector_params=detector_params or None,
                theta_sigmas=theta_sigmas,
            ),
        )
        if cfg.detector != "threshold":
            for flag, value in (("--theta", theta), ("--theta-sigmas", theta_sigmas)):
                if value is not None:
                    raise click.BadParameter(
                        f"applies only to the threshold detector, not {cfg.detector}", param_hint=flag
                    )
        result = run_track(cfg)
        outdir = pathlib.Path(cfg.output)
        outputs = write_track_outputs(result, outdir)
        write_manifest(
            outdir,
            "track",
            cfg.to_dict(),
            outputs,
            counts=result.counts,
            seeds={"seed": cfg.seed},
        )
    if result.theta is not None:
        verbose(f"Threshold: {result.theta:.6g}")
    n_events = len(result.events)
    echo(
        f"Scored {len(result.series)} {pluralize(len(result.series), 'window', 'windows')}, "
        f"{n_events} {pluralize(n_events, 'anomaly', 'anomalies')}; results in {outdir}"
    )


@cli.command(formatter_settings=formatter_settings)
@run_options
@option_group(
    "Sweep",
    option("--axis", "-a", required=True, type=click.Choice(SWEEP_AXES), help="Parameter to sweep."),
    option(
        "--values",
        "-v",
        "values_str",
        metavar="VALUES",
        required=True,
        help="Comma separated values or START:STOP ranges, e.g. 1:18 or 10,20,30.",
    ),
)
def sweep(
    config_file: Optional[str],
    schema: Optional[str],
    jobs: Tuple[str, ...],
    roster: Tuple[str, ...],
    window_len: Optional[int],
    period: Optional[int],
    train_windows: Optional[int],
    statistic: Optional[str],
    node_rank: Optional[int],
    time_rank: Optional[int],
    metric_rank: Optional[int],
    clusters: Optional[int],
    cp_rank: Optional[int],
    rho: Optional[float],
    tol: Optional[float],
    max_iter: Optional[int],
    workers: Optional[int],
    seed: Optional[int],
    output: Optional[str],
    inputs: Tuple[str, ...],
    axis: str,
    values_str: str,
):
    """Mean error statistic of INPUTS for each value of one rank or the window length"""
    values = parse_values(values_str)
    with report_errors():
        cfg = RunConfig.from_sources(
            config_file,
            _overrides(
                schema=schema,
                inputs=inputs,
                jobs=jobs,
                roster=roster,
                window_len=window_len,
                period=period,
                train_windows=train_windows,
                statistic=statistic,
                node_rank=node_rank,
                time_rank=time_rank,
                metric_rank=metric_rank,
                clusters=clusters,
                cp_rank=cp_rank,
                rho=rho,
                tol=tol,
                max_iter=max_iter,
                workers=workers,
                seed=seed,
                output=output,
            ),
        )
        rows = run_sweep(cfg, axis, values)
        outdir = pathlib.Path(cfg.output)
        outdir.mkdir(parents=True, exist_ok=True)
        path = outdir / "sweep.csv"
        write_sweep_csv(rows, path)
        config = cfg.to_dict()
        config["sweep"] = {"axis": axis, "values": [value for value, _ in rows]}
        write_manifest(outdir, "sweep", config, {"sweep.csv": path}, seeds={"seed": cfg.seed})
    echo(f"Swept {axis} over {len(rows)} {pluralize(len(rows), 'value', 'values')}; results in {path}")


@cli.command(formatter_settings=formatter_settings)
@option_group(
    "Feed",
    option(
        "--config",
        "-c",
        "config_file",
        metavar="YAML",
        type=click.Path(exists=True, dir_okay=False),
        help="YAML file whose synth: section holds the feed settings.",
    ),
    option("--nodes", "-n", "n_nodes", type=int, help="Number of nodes (default 16)."),
    option("--slices", "-s", "n_slices_total", type=int, help="Number of time slices (default 720)."),
    option("--metrics", "-m", "n_metrics", type=int, help="Number of metrics (default 12)."),
    option("--window-len", "-T", type=int, help="Slices per window (default 18)."),
    option(
        "--ranks",
        type=int,
        nargs=3,
        metavar="N T M",
        help="Planted node, time and metric ranks (default 2 2 2).",
    ),
    option("--noise", "noise_sigma", type=float, help="Noise standard deviation (default 0.1)."),
    option("--job-groups", "n_job_groups", type=int, help="Nodes are split into this many job groups (default 2)."),
    option("--seed", type=int, help="Random seed (default 0)."),
    option("--period", type=int, help="Sampling period in seconds (default 600)."),
    option("--start", type=int, help="Unix time of the first slice."),
)
@option_group(
    "Anomalies",
    option("--anomalies", "count", type=int, help="Number of anomalies spread evenly over the windows."),
    option("--magnitude", type=float, default=5.0, show_default=True, help="Anomaly magnitude."),
    option(
        "--kind",
        type=click.Choice([k.value for k in AnomalyKind]),
        default=AnomalyKind.NODE_SPIKE.value,
        show_default=True,
        help="Anomaly kind.",
    ),
    option(
        "--first-window",
        type=int,
        default=0,
        show_default=True,
        help="No anomalies before this window, e.g. to keep a clean warmup.",
    ),
)
@option("--output", "-o", metavar="DIR", default="synth_feed", show_default=True, help="Output directory.")
def synth(
    config_file: Optional[str],
    n_nodes: Optional[int],
    n_slices_total: Optional[int],
    n_metrics: Optional[int],
    window_len: Optional[int],
    ranks: Optional[Tuple[int, int, int]],
    noise_sigma: Optional[float],
    n_job_groups: Optional[int],
    seed: Optional[int],
    period: Optional[int],
    start: Optional[int],
    count: Optional[int],
    magnitude: float,
    kind: str,
    first_window: int,
    output: str,
):
    """Write a synthetic stats feed with planted structure, jobs and anomalies"""
    with report_errors(), stage("synth"):
        settings: Dict[str, Any] = {}
        if config_file:
            section = load_config_file(config_file).get("synth") or {}
            if not isinstance(section, dict):
                raise ConfigError(f"synth section of {config_file} must be a mapping")
            settings.update(section)
        settings.update(
            _overrides(
                n_nodes=n_nodes,
                n_slices_total=n_slices_total,
                n_metrics=n_metrics,
                window_len=window_len,
                ranks=ranks,
                noise_sigma=noise_sigma,
                n_job_groups=n_job_groups,
                seed=seed,
                period=period,
                start=start,
            )
        )
        cfg = SynthConfig.from_dict(settings)
        if count is not None:
            anomalies = plant_anomalies(cfg.n_windows, count, magnitude, kind, first_window)
            cfg = dataclasses.replace(cfg, anomalies=anomalies)
        feed = gen_feed(cfg)
        outdir = pathlib.Path(output)
        written = write_feed(feed, outdir)
        write_manifest(
            outdir,
            "synth",
            cfg.to_dict(),
            {path.name: path for path in written},
            counts={"hosts": len(feed.hosts), "windows": cfg.n_windows, "anomalies": len(feed.truth)},
            seeds={"seed": cfg.seed},
        )
    echo(
        f"Wrote {len(feed.hosts)} {pluralize(len(feed.hosts), 'host', 'hosts')} with "
        f"{len(feed.truth)} planted {pluralize(len(feed.truth), 'anomaly', 'anomalies')} to {outdir}"
    )


@cli.command(formatter_settings=formatter_settings)
@option_group(
    "Run",
    option(
        "--series",
        "series_path",
        required=True,
        type=click.Path(exists=True, dir_okay=False),
        help="series.csv written by track.",
    ),
    option(
        "--events",
        "events_path",
        required=True,
        type=click.Path(exists=True, dir_okay=False),
        help="events.csv written by track.",
    ),
    option("--window-len", "-T", type=int, help="Slices per window; default read from the run manifest."),
    option("--period", type=int, help="Sampling period in seconds; default read from the run manifest."),
)
@option_group(
    "Logs",
    option(
        "--syslog",
        "-l",
        required=True,
        multiple=True,
        type=click.Path(exists=True, dir_okay=False),
        help="Syslog file; may be repeated.",
    ),
    option("--year", "-y", required=True, type=int, help="Year of the syslog timestamps."),
    option(
        "--critical",
        multiple=True,
        type=click.Choice([c.value for c in SeverityClass]),
        help="Severity class counted as critical; may be repeated. "
        f"Default: {', '.join(sorted(c.value for c in DEFAULT_CRITICAL))}.",
    ),
)
@option("--output", "-o", metavar="DIR", help="Output directory (default: the directory of --series).")
def validate(
    series_path: str,
    events_path: str,
    window_len: Optional[int],
    period: Optional[int],
    syslog: Tuple[str, ...],
    year: int,
    critical: Tuple[str, ...],
    output: Optional[str],
):
    """Count syslog message classes per window and compare anomalous with normal windows"""
    with report_errors():
        series_path = pathlib.Path(series_path)
        run_config = _manifest_config(series_path.parent)
        window_len = window_len or run_config.get("window_len") or DEFAULT_WINDOW_LEN
        period = period or run_config.get("period") or DEFAULT_PERIOD
        with stage("correlate"):
            with open(series_path, "r") as fd:
                series = read_series_csv(fd)
            with open(events_path, "r") as fd:
                try:
                    events = read_events_csv(fd)
                except DetectorError as e:
                    raise IngestError(f"{events_path}: {e}") from e
        report, skipped = run_validate(
            series,
            events,
            [pathlib.Path(p) for p in syslog],
            year,
            window_len * period,
            [SeverityClass(c) for c in critical] or DEFAULT_CRITICAL,
        )
        outdir = pathlib.Path(output) if output else series_path.parent
        outputs = write_report(report, outdir)
        write_manifest(
            outdir,
            "validate",
            {
                "series": str(series_path),
                "events": str(events_path),
                "syslog": list(syslog),
                "year": year,
                "window_len": window_len,
                "period": period,
                "critical": [c.value for c in report.critical],
            },
            outputs,
            counts={"windows": len(report.windows), "skipped_lines": skipped, "unassigned": report.unassigned},
            name=VALIDATE_MANIFEST,
        )
    echo(
        f"Critical messages in {report.anomalous_critical_fraction:.0%} of anomalous and "
        f"{report.normal_critical_fraction:.0%} of normal windows; report in {outdir}"
    )


def _manifest_config(run_dir: pathlib.Path) -> Dict[str, Any]:
    """config section of run_dir/manifest.json, or {} if there is none"""
    path = run_dir / MANIFEST
    if not path.is_file():
        return {}
    try:
        return json.loads(path.read_text()).get("config") or {}
    except (json.JSONDecodeError, AttributeError):
        print_warning(f"Ignoring unreadable manifest {path}")
        return {}


def rich_text(text, width=78):
    """Return rich formatted text"""
    sio = io.StringIO()
    console = Console(file=sio, force_terminal=True, width=width)
    console.print(text)
    rich_text = sio.getvalue()
    rich_text = rich_text.rstrip()
    sio.close()
    return rich_text


def format_markdown_str(string, width=78):
    """Return formatted markdown str for terminal"""
    sio = io.StringIO()
    console = Console(file=sio, force_terminal=True, width=width)
    console.print(Markdown(string))
    help_str = sio.getvalue()
    sio.close()
    return help_str
