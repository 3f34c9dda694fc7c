"""Fixed threshold detector plugin for tensortrack"""

from typing import Any, Dict, Iterable, List, Optional

import tensortrack
from tensortrack.constants import DEFAULT_THRESHOLD
from tensortrack.detect import AnomalyEvent, DetectorError

DETECTOR = "threshold"

PARAMS = {
    "theta": f"Flag windows whose error statistic exceeds theta (default {DEFAULT_THRESHOLD})",
}


@tensortrack.hookimpl
def get_detector_help() -> Iterable:
    params = [["Parameter", "Description"], *[[k, v] for k, v in PARAMS.items()]]
    return ["**threshold**: flag every window above a fixed limit", params]


@tensortrack.hookimpl
def detect_anomalies(
    detector: str, series: "ErrorSeries", params: Dict[str, Any]
) -> Optional[List[AnomalyEvent]]:
    if detector != DETECTOR:
        return None

    theta = float(params.get("theta", DEFAULT_THRESHOLD))
    if not theta > 0:
        raise DetectorError(f"theta must be > 0, got {theta}")

    return [
        AnomalyEvent(p.window_start, p.epsilon, DETECTOR, p.epsilon, theta)
        for p in series
        if p.epsilon > theta
    ]
