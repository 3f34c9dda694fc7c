"""Run configuration for tensortrack: defaults, YAML file, command line overrides"""

from __future__ import annotations

import dataclasses
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import yaml

from .constants import (
    DEFAULT_CLUSTERS,
    DEFAULT_CP_RANK,
    DEFAULT_MAX_ITER,
    DEFAULT_METRIC_RANK,
    DEFAULT_NODE_RANK,
    DEFAULT_PERIOD,
    DEFAULT_RHO,
    DEFAULT_THRESHOLD,
    DEFAULT_TIME_RANK,
    DEFAULT_TOL,
    DEFAULT_WINDOW_LEN,
    TensorTrackError,
)
from .decompose import DecompOptions
from .errorstat import RankSpec, Variant
from .synth import SynthConfig, SynthConfigError

__all__ = ["ConfigError", "RunConfig", "load_config_file"]

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT = "tensortrack_out"
DEFAULT_DETECTOR = "threshold"

SYNTH_SECTION = "synth"


class ConfigError(TensorTrackError, ValueError):
    """Raised when a run configuration is invalid"""

    pass


@dataclass
class RunConfig:
    """Every setting of a tracking run

    Defaults reproduce the reference deployment: 3-hour windows of 10-minute
    slices, ranks (50, 18, 30), 5 job clusters and a threshold of 3.
    """

    schema: Optional[str] = None
    inputs: List[str] = field(default_factory=list)
    jobs: List[str] = field(default_factory=list)
    roster: Optional[List[str]] = None
    window_len: int = DEFAULT_WINDOW_LEN
    period: int = DEFAULT_PERIOD
    node_rank: int = DEFAULT_NODE_RANK
    time_rank: int = DEFAULT_TIME_RANK
    metric_rank: int = DEFAULT_METRIC_RANK
    clusters: int = DEFAULT_CLUSTERS
    statistic: str = Variant.CLUSTERED.value
    cp_rank: int = DEFAULT_CP_RANK
    rho: float = DEFAULT_RHO
    train_windows: Optional[int] = None
    detector: str = DEFAULT_DETECTOR
    detector_params: Dict[str, Any] = field(default_factory=lambda: {"theta": DEFAULT_THRESHOLD})
    theta_sigmas: Optional[float] = None
    workers: int = 1
    seed: int = 0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    output: str = DEFAULT_OUTPUT
    synth: Optional[SynthConfig] = None

    def __post_init__(self):
        self.validate()

    @property
    def ranks(self) -> RankSpec:
        return RankSpec(self.node_rank, self.time_rank, self.metric_rank)

    @property
    def variant(self) -> Variant:
        return Variant(self.statistic)

    @property
    def decomp_options(self) -> DecompOptions:
        return DecompOptions(tol=self.tol, max_iter=self.max_iter, seed=self.seed)

    def validate(self):
        """Raise ConfigError naming the first invalid setting"""
        positive = (
            "window_len",
            "period",
            "node_rank",
            "time_rank",
            "metric_rank",
            "clusters",
            "cp_rank",
            "workers",
            "max_iter",
        )
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.window_len < 2:
            raise ConfigError(f"window_len must be >= 2, got {self.window_len}")
        if self.statistic not in {v.value for v in Variant}:
            raise ConfigError(
                f"statistic must be one of {', '.join(v.value for v in Variant)}, got {self.statistic!r}"
            )
        if self.statistic == Variant.CP_FORECAST.value and self.window_len < 3:
            raise ConfigError("The cp_forecast statistic needs window_len >= 3")
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.train_windows is not None and self.train_windows < 1:
            raise ConfigError(f"train_windows must be >= 1, got {self.train_windows}")
        if self.theta_sigmas is not None and self.theta_sigmas <= 0:
            raise ConfigError(f"theta_sigmas must be > 0, got {self.theta_sigmas}")
        if not isinstance(self.detector_params, Mapping):
            raise ConfigError(f"detector_params must be a mapping, got {self.detector_params!r}")
        if isinstance(self.inputs, str):
            self.inputs = [self.inputs]
        if isinstance(self.jobs, str):
            self.jobs = [self.jobs]

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        unknown = set(data) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}")
        values = dict(data)
        if values.get(SYNTH_SECTION) is not None and not isinstance(values[SYNTH_SECTION], SynthConfig):
            try:
                values[SYNTH_SECTION] = SynthConfig.from_dict(values[SYNTH_SECTION])
            except SynthConfigError as e:
                raise ConfigError(f"Invalid {SYNTH_SECTION} section: {e}") from e
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_sources(
        cls,
        config_file: Optional[Union[str, pathlib.Path]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> RunConfig:
        """Defaults, then the config file, then overrides whose value is not None"""
        values: Dict[str, Any] = {}
        if config_file is not None:
            values.update(load_config_file(config_file))
        for key, value in (overrides or {}).items():
            if value is None or value == ():
                continue
            if key == "detector_params":
                params = dict(values.get("detector_params") or {})
                params.update(value)
                value = params
            values[key] = list(value) if isinstance(value, tuple) else value
        return cls.from_dict(values)

    def to_dict(self) -> Dict[str, Any]:
        """Serializable form, as written to the run manifest"""
        data = {}
        for name in self.field_names():
            value = getattr(self, name)
            if isinstance(value, SynthConfig):
                value = value.to_dict()
            elif isinstance(value, dict):
                value = dict(value)
            elif isinstance(value, list):
                value = list(value)
            data[name] = value
        return data


def load_config_file(path: Union[str, pathlib.Path]) -> Dict[str, Any]:
    """Read a YAML mapping of RunConfig settings"""
    path = pathlib.Path(path)
    try:
        with open(path, "r") as fd:
            data = yaml.safe_load(fd)
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a mapping, got {type(data).__name__}")
    logger.debug("loaded %d settings from %s", len(data), path)
    return data
