""" pluggy hookimpl specification for tensortrack detectors and log rules """

from __future__ import annotations

from typing import Any, Dict, Iterable, List, Optional, Tuple

from pluggy import HookspecMarker

hookspec = HookspecMarker("tensortrack")


@hookspec(firstresult=True)
def detect_anomalies(
    detector: str,
    series: "ErrorSeries",
    params: Dict[str, Any],
) -> Optional[List["AnomalyEvent"]]:
    """Called by detect.py to run the named detector over an error series

    Return: None if detector is not handled by this plugin otherwise list of AnomalyEvent"""

    # return value of None means that detector is not handled by this plugin
    # return value of [] means the detector ran and flagged nothing


@hookspec
def get_detector_help() -> Iterable:
    """Return iterable of one or more help elements. Each element may be a str or a list of lists"""


@hookspec
def get_severity_rules() -> Iterable[Tuple[str, str]]:
    """Return iterable of (pattern, severity_class) pairs checked after the built-in syslog rules"""
