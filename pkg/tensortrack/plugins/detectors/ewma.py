"""EWMA control chart detector plugin for tensortrack"""

import math
from typing import Any, Dict, Iterable, List, Optional

import tensortrack
from tensortrack.constants import DEFAULT_EWMA_L, DEFAULT_EWMA_LAMBDA, DEFAULT_WARMUP
from tensortrack.detect import AnomalyEvent, DetectorError, centered, warmup_baseline

DETECTOR = "ewma"

PARAMS = {
    "lambda": f"Weight of the newest window, in (0, 1] (default {DEFAULT_EWMA_LAMBDA})",
    "L": f"Control limit width in standard deviations (default {DEFAULT_EWMA_L})",
    "warmup": f"Leading windows used to estimate the baseline (default {DEFAULT_WARMUP})",
}


@tensortrack.hookimpl
def get_detector_help() -> Iterable:
    params = [["Parameter", "Description"], *[[k, v] for k, v in PARAMS.items()]]
    return [
        "**ewma**: exponentially weighted moving average chart against a baseline frozen after warmup",
        params,
    ]


@tensortrack.hookimpl
def detect_anomalies(
    detector: str, series: "ErrorSeries", params: Dict[str, Any]
) -> Optional[List[AnomalyEvent]]:
    if detector != DETECTOR:
        return None

    lam = float(params.get("lambda", DEFAULT_EWMA_LAMBDA))
    width = float(params.get("L", DEFAULT_EWMA_L))
    warmup = int(params.get("warmup", DEFAULT_WARMUP))
    if not 0 < lam <= 1:
        raise DetectorError(f"lambda must be in (0, 1], got {lam}")
    if not width > 0:
        raise DetectorError(f"L must be > 0, got {width}")

    mean, std = warmup_baseline(series, warmup)
    monitored = series.points[warmup:]
    deviations = centered([p.epsilon for p in monitored], mean)
    events = []
    # the chart runs on deviations from the baseline mean; events report it in epsilon units
    z = 0.0
    for i, (point, deviation) in enumerate(zip(monitored, deviations), start=1):
        z = lam * float(deviation) + (1 - lam) * z
        spread = width * std * math.sqrt(lam / (2 - lam) * (1 - (1 - lam) ** (2 * i)))
        if z > spread:
            events.append(AnomalyEvent(point.window_start, point.epsilon, DETECTOR, mean + z, mean + spread))
    return events
