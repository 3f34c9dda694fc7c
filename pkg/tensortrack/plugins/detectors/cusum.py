"""One-sided upper CUSUM detector plugin for tensortrack"""

from typing import Any, Dict, Iterable, List, Optional

import tensortrack
from tensortrack.constants import DEFAULT_CUSUM_H, DEFAULT_CUSUM_K, DEFAULT_WARMUP
from tensortrack.detect import AnomalyEvent, DetectorError, standardized, warmup_baseline

DETECTOR = "cusum"

PARAMS = {
    "k_ref": f"Allowed slack per window in standard deviations (default {DEFAULT_CUSUM_K})",
    "h": f"Decision interval in standard deviations (default {DEFAULT_CUSUM_H})",
    "warmup": f"Leading windows used to estimate the baseline (default {DEFAULT_WARMUP})",
}


@tensortrack.hookimpl
def get_detector_help() -> Iterable:
    params = [["Parameter", "Description"], *[[k, v] for k, v in PARAMS.items()]]
    return [
        "**cusum**: cumulative sum of standardized excess over the warmup mean; resets after each event",
        params,
    ]


@tensortrack.hookimpl
def detect_anomalies(
    detector: str, series: "ErrorSeries", params: Dict[str, Any]
) -> Optional[List[AnomalyEvent]]:
    if detector != DETECTOR:
        return None

    k_ref = float(params.get("k_ref", DEFAULT_CUSUM_K))
    h = float(params.get("h", DEFAULT_CUSUM_H))
    warmup = int(params.get("warmup", DEFAULT_WARMUP))
    if k_ref < 0:
        raise DetectorError(f"k_ref must be >= 0, got {k_ref}")
    if not h > 0:
        raise DetectorError(f"h must be > 0, got {h}")

    mean, std = warmup_baseline(series, warmup)
    monitored = series.points[warmup:]
    deviations = standardized([p.epsilon for p in monitored], mean, std)
    events = []
    total = 0.0
    for point, deviation in zip(monitored, deviations):
        total = max(0.0, total + float(deviation) - k_ref)
        if total > h:
            events.append(AnomalyEvent(point.window_start, point.epsilon, DETECTOR, total, h))
            total = 0.0
    return events
