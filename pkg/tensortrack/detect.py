"""Turn an error series into anomaly events with a fixed threshold or EWMA/CUSUM control charts"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, TextIO, Tuple

import numpy as np

from .constants import (
    DEFAULT_CUSUM_H,
    DEFAULT_CUSUM_K,
    DEFAULT_EWMA_L,
    DEFAULT_EWMA_LAMBDA,
    DEFAULT_WARMUP,
    TensorTrackError,
)
from .errorstat import ErrorSeries, format_float
from .plugins import plugin_manager

__all__ = [
    "AnomalyEvent",
    "DetectorError",
    "InsufficientWarmupError",
    "UnknownDetectorError",
    "calibrate_threshold",
    "centered",
    "cusum_detect",
    "events_from_json",
    "events_to_json",
    "ewma_detect",
    "get_detector_help",
    "read_events_csv",
    "run_detector",
    "standardized",
    "threshold_detect",
    "warmup_baseline",
    "write_events_csv",
]

logger = logging.getLogger(__name__)

EVENT_FIELDS = ("window_start", "detector", "score", "limit", "epsilon")

# spreads below this (relative to the mean) are treated as zero
SIGMA_FLOOR = 1e-12


class DetectorError(TensorTrackError):
    """Raised when a detector cannot run with the given parameters"""

    pass


class InsufficientWarmupError(DetectorError):
    """Raised when a series is too short for the requested warmup"""

    pass


class UnknownDetectorError(DetectorError):
    """Raised when no plugin handles the requested detector"""

    pass


@dataclass(frozen=True)
class AnomalyEvent:
    """A window whose detector statistic exceeded its limit"""

    window_start: int
    epsilon: float
    detector: str
    score: float
    limit: float


def warmup_baseline(series: ErrorSeries, warmup: int) -> Tuple[float, float]:
    """Mean and sample standard deviation of the first warmup points

    Raises:
        InsufficientWarmupError unless 2 <= warmup < len(series)
    """
    if warmup < 2:
        raise InsufficientWarmupError(f"Warmup must be at least 2 windows, got {warmup}")
    if len(series) <= warmup:
        raise InsufficientWarmupError(
            f"Series has {len(series)} windows; need more than the warmup of {warmup}"
        )
    baseline = series.epsilons[:warmup]
    return float(baseline.mean()), float(baseline.std(ddof=1))


def calibrate_threshold(series: ErrorSeries, warmup: int, n_sigma: float) -> float:
    """Threshold n_sigma sample standard deviations above the warmup mean"""
    mean, std = warmup_baseline(series, warmup)
    return mean + n_sigma * std


def run_detector(detector: str, series: ErrorSeries, params: Optional[Dict[str, Any]] = None) -> List[AnomalyEvent]:
    """Run the named detector plugin over series

    Raises:
        UnknownDetectorError if no plugin handles detector
    """
    events = plugin_manager().hook.detect_anomalies(
        detector=detector, series=series, params=dict(params or {})
    )
    if events is None:
        raise UnknownDetectorError(f"Unknown detector: {detector}")
    logger.debug("%s detector flagged %d of %d windows", detector, len(events), len(series))
    return list(events)


def threshold_detect(s: ErrorSeries, theta: float) -> List[AnomalyEvent]:
    """One event per point whose epsilon exceeds theta"""
    return run_detector("threshold", s, {"theta": theta})


def ewma_detect(
    s: ErrorSeries,
    lam: float = DEFAULT_EWMA_LAMBDA,
    L: float = DEFAULT_EWMA_L,
    warmup: int = DEFAULT_WARMUP,
) -> List[AnomalyEvent]:
    """EWMA control chart over the points after warmup"""
    return run_detector("ewma", s, {"lambda": lam, "L": L, "warmup": warmup})


def cusum_detect(
    s: ErrorSeries,
    k_ref: float = DEFAULT_CUSUM_K,
    h: float = DEFAULT_CUSUM_H,
    warmup: int = DEFAULT_WARMUP,
) -> List[AnomalyEvent]:
    """One-sided upper CUSUM over the points after warmup"""
    return run_detector("cusum", s, {"k_ref": k_ref, "h": h, "warmup": warmup})


def get_detector_help() -> List:
    """Help items from every detector plugin"""
    help_items = []
    for items in plugin_manager().hook.get_detector_help():
        help_items.extend(items)
    return help_items


def write_events_csv(events: Iterable[AnomalyEvent], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(EVENT_FIELDS)
    for e in events:
        writer.writerow(
            [e.window_start, e.detector, format_float(e.score), format_float(e.limit), format_float(e.epsilon)]
        )


def read_events_csv(stream: TextIO) -> List[AnomalyEvent]:
    events = []
    for lineno, row in enumerate(csv.DictReader(stream), start=2):
        try:
            events.append(
                AnomalyEvent(
                    window_start=int(row["window_start"]),
                    epsilon=float(row["epsilon"]),
                    detector=row["detector"],
                    score=float(row["score"]),
                    limit=float(row["limit"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DetectorError(f"line {lineno}: malformed event row {row}") from e
    return events


def events_to_json(events: Iterable[AnomalyEvent]) -> List[dict]:
    return [
        {
            "window_start": e.window_start,
            "detector": e.detector,
            "score": float(format_float(e.score)),
            "limit": float(format_float(e.limit)),
            "epsilon": float(format_float(e.epsilon)),
        }
        for e in events
    ]


def events_from_json(data: Iterable[dict]) -> List[AnomalyEvent]:
    return [
        AnomalyEvent(
            window_start=int(d["window_start"]),
            epsilon=float(d["epsilon"]),
            detector=d["detector"],
            score=float(d["score"]),
            limit=float(d["limit"]),
        )
        for d in data
    ]


def _floor(mean: float) -> float:
    return SIGMA_FLOOR * max(1.0, abs(mean))


def centered(values: np.ndarray, mean: float) -> np.ndarray:
    """values - mean, with deviations inside the floor set to exactly 0

    A constant series centers to all zeros even when its mean carries
    rounding error.
    """
    deviations = np.asarray(values, dtype=np.float64) - mean
    deviations[np.abs(deviations) <= _floor(mean)] = 0.0
    return deviations


def standardized(values: np.ndarray, mean: float, std: float) -> np.ndarray:
    """(values - mean) / std; a zero spread leaves points equal to the mean at 0"""
    return centered(values, mean) / max(std, _floor(mean))

