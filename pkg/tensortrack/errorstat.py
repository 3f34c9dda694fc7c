"""Per-window error statistics: Tucker prediction error, clustered Tucker error, CP forecast error"""

from __future__ import annotations

import csv
import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import numpy.typing as npt

from .cluster import kmeans_cosine
from .constants import (
    DEFAULT_CLUSTERS,
    DEFAULT_CP_RANK,
    DEFAULT_METRIC_RANK,
    DEFAULT_NODE_RANK,
    DEFAULT_RHO,
    DEFAULT_TIME_RANK,
    SIGNIFICANT_DIGITS,
)
from .decompose import (
    DecompOptions,
    RankError,
    cp_als,
    hooi,
    tucker_reconstruct,
)
from .ingest import IngestError, JobMatrix, UsageWindow
from .tensor import Dims, ShapeError, Tensor3, as_matrix, frob_norm

__all__ = [
    "ErrorPoint",
    "ErrorSeries",
    "RankSpec",
    "Variant",
    "compute_series",
    "cp_forecast_error",
    "cp_forecast_window",
    "forecast_weights",
    "format_float",
    "normalize_series",
    "read_series_csv",
    "reconstruction_error",
    "series_from_json",
    "series_to_json",
    "tucker_error",
    "tucker_error_cluster",
    "write_series_csv",
]

logger = logging.getLogger(__name__)

SERIES_FIELDS = ("window_start", "epsilon", "variant", "k_used", "degraded")


class Variant(str, enum.Enum):
    """Which statistic produced an error point"""

    PLAIN = "plain"
    CLUSTERED = "clustered"
    CP_FORECAST = "cp_forecast"
    RECONSTRUCTION = "reconstruction"


@dataclass(frozen=True)
class RankSpec:
    """Requested Tucker n-rank (N', T', M')"""

    node_rank: int = DEFAULT_NODE_RANK
    time_rank: int = DEFAULT_TIME_RANK
    metric_rank: int = DEFAULT_METRIC_RANK

    def __post_init__(self):
        for name in ("node_rank", "time_rank", "metric_rank"):
            if getattr(self, name) < 1:
                raise RankError(f"{name} must be >= 1, got {getattr(self, name)}")

    def as_tuple(self) -> Dims:
        return (self.node_rank, self.time_rank, self.metric_rank)

    def clamp(self, dims: Sequence[int]) -> RankSpec:
        """Limit each rank to the matching dimension"""
        return RankSpec(*(min(r, int(d)) for r, d in zip(self.as_tuple(), dims)))


@dataclass(frozen=True)
class ErrorPoint:
    """Error statistic of one window"""

    window_start: int
    epsilon: float
    variant: Variant
    k_used: int = 1
    degraded: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        object.__setattr__(self, "variant", Variant(self.variant))


class ErrorSeries:
    """Error points ordered by strictly increasing window_start"""

    def __init__(self, points: Iterable[ErrorPoint] = ()):
        self._points = tuple(points)
        for earlier, later in zip(self._points, self._points[1:]):
            if later.window_start <= earlier.window_start:
                raise ValueError(
                    f"Error series must be strictly increasing in time: "
                    f"{earlier.window_start} then {later.window_start}"
                )

    @property
    def points(self) -> Tuple[ErrorPoint, ...]:
        return self._points

    @property
    def epsilons(self) -> npt.NDArray[np.float64]:
        return np.array([p.epsilon for p in self._points], dtype=np.float64)

    @property
    def window_starts(self) -> List[int]:
        return [p.window_start for p in self._points]

    def __len__(self) -> int:
        return len(self._points)

    def __iter__(self) -> Iterator[ErrorPoint]:
        return iter(self._points)

    def __getitem__(self, index: int) -> ErrorPoint:
        return self._points[index]

    def __repr__(self) -> str:
        return f"ErrorSeries({len(self)} points)"


def _mean_filled(w: UsageWindow) -> Tensor3:
    """Window with the last slice replaced by the per-metric mean of the first T-1 slices"""
    data = w.tensor.data
    if w.tensor.n_time < 2:
        raise ShapeError(f"Window needs at least 2 slices, got {w.tensor.n_time}")
    means = data[:, :-1, :].mean(axis=(0, 1))
    filled = np.broadcast_to(means, (w.tensor.n_nodes, w.tensor.n_metrics))
    return w.tensor.replace_time_slice(w.tensor.n_time - 1, filled)


def _last_slice_error(w: UsageWindow, ranks: RankSpec, opts: DecompOptions) -> float:
    dummy = _mean_filled(w)
    predicted = tucker_reconstruct(hooi(dummy, ranks.as_tuple(), opts))
    last = w.tensor.n_time - 1
    return float(np.linalg.norm(predicted.data[:, last, :] - w.tensor.data[:, last, :]))


def tucker_error(
    w: UsageWindow, ranks: RankSpec, opts: DecompOptions = DecompOptions()
) -> ErrorPoint:
    """How well the last slice of a window is predicted from the rest

    The last slice is replaced by the mean of each metric over all nodes and
    the first T-1 slices; the window is Tucker-decomposed at ranks and epsilon
    is the Frobenius distance between the reconstructed and observed last slice.
    """
    epsilon = _last_slice_error(w, ranks, opts)
    return ErrorPoint(w.start, epsilon, Variant.PLAIN, 1, w.degraded)


def tucker_error_cluster(
    w: UsageWindow,
    jm: JobMatrix,
    ranks: RankSpec,
    k: int = DEFAULT_CLUSTERS,
    seed: int = 0,
    opts: DecompOptions = DecompOptions(),
) -> ErrorPoint:
    """Tucker prediction error with nodes grouped by the jobs they ran

    Nodes are clustered by cosine k-means on their job vectors; idle nodes
    form one extra group. Each group's sub-window is scored with ranks clamped
    to its dimensions and epsilon is the root of the summed squared group
    errors, accumulated in group order. A window without jobs is scored as a
    single group.
    """
    if tuple(jm.nodes) != tuple(w.nodes):
        raise IngestError("Job matrix nodes do not match the window's nodes")

    if jm.n_jobs == 0:
        epsilon = _last_slice_error(w, ranks.clamp(w.tensor.dims), opts)
        return ErrorPoint(w.start, epsilon, Variant.CLUSTERED, 1, w.degraded)

    assignment = kmeans_cosine(jm, k, seed)
    groups = assignment.groups()
    errors = []
    for members in groups:
        sub = w.select_nodes(members)
        errors.append(_last_slice_error(sub, ranks.clamp(sub.tensor.dims), opts))

    if len(errors) == 1:
        epsilon = errors[0]
    else:
        epsilon = math.sqrt(math.fsum(e * e for e in errors))
    logger.debug(
        "window %d: %d groups, group errors %s", w.start, len(groups), [f"{e:.4g}" for e in errors]
    )
    return ErrorPoint(w.start, epsilon, Variant.CLUSTERED, len(groups), w.degraded)


def reconstruction_error(
    w: UsageWindow, ranks: RankSpec, opts: DecompOptions = DecompOptions()
) -> ErrorPoint:
    """Frobenius error of the rank-ranks Tucker reconstruction of the whole window

    Zero at full ranks, non-increasing as ranks grow.
    """
    f = hooi(w.tensor, ranks.as_tuple(), opts)
    epsilon = frob_norm(w.tensor - tucker_reconstruct(f))
    return ErrorPoint(w.start, epsilon, Variant.RECONSTRUCTION, 1, w.degraded)


def forecast_weights(a_time: npt.ArrayLike, rho: float) -> npt.NDArray[np.float64]:
    """Recency-weighted mean of each temporal factor column

    Row k of a_time (K x R) gets weight exp(-rho * (K - k - 1)), normalized to
    sum to 1; rho = 0 is the plain temporal mean, large rho uses the last row.
    """
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    a_time = as_matrix(a_time)
    n = a_time.shape[0]
    decay = np.exp(-rho * (n - 1 - np.arange(n)))
    return (decay @ a_time) / decay.sum()


def cp_forecast_error(
    history: Tensor3,
    rank: int,
    rho: float,
    observed: npt.ArrayLike,
    window_start: int = 0,
    degraded: bool = False,
    opts: DecompOptions = DecompOptions(),
) -> ErrorPoint:
    """Predict the next slice from a CP decomposition of history and compare to observed"""
    if history.n_time < 2:
        raise ShapeError(f"CP forecast needs at least 2 history slices, got {history.n_time}")
    observed = as_matrix(observed)
    expected = (history.n_nodes, history.n_metrics)
    if observed.shape != expected:
        raise ShapeError(f"Observed slice has shape {observed.shape}, expected {expected}")

    f = cp_als(history, rank, opts)
    gamma = forecast_weights(f.a_time, rho)
    predicted = np.einsum("r,nr,mr->nm", gamma * f.weights, f.a_node, f.a_metric)
    epsilon = float(np.linalg.norm(predicted - observed))
    return ErrorPoint(window_start, epsilon, Variant.CP_FORECAST, 1, degraded)


def cp_forecast_window(
    w: UsageWindow,
    rank: int = DEFAULT_CP_RANK,
    rho: float = DEFAULT_RHO,
    opts: DecompOptions = DecompOptions(),
) -> ErrorPoint:
    """CP forecast of a window's last slice from its first T-1 slices"""
    data = w.tensor.data
    history = Tensor3(data[:, :-1, :])
    return cp_forecast_error(
        history, rank, rho, data[:, -1, :], window_start=w.start, degraded=w.degraded, opts=opts
    )


def compute_series(
    windows: Sequence[UsageWindow],
    job_matrices: Optional[Sequence[JobMatrix]] = None,
    variant: Variant = Variant.CLUSTERED,
    ranks: RankSpec = RankSpec(),
    k: int = DEFAULT_CLUSTERS,
    seed: int = 0,
    cp_rank: int = DEFAULT_CP_RANK,
    rho: float = DEFAULT_RHO,
    opts: DecompOptions = DecompOptions(),
    workers: int = 1,
) -> ErrorSeries:
    """Evaluate the statistic for every window, ordered by window start

    Tucker ranks are clamped to each window's dimensions. Windows are scored
    on a pool of workers threads.
    """
    variant = Variant(variant)
    if variant is Variant.CLUSTERED:
        if job_matrices is None or len(job_matrices) != len(windows):
            raise ValueError("Clustered statistic needs one job matrix per window")

    def score(index: int) -> ErrorPoint:
        w = windows[index]
        clamped = ranks.clamp(w.tensor.dims)
        if variant is Variant.PLAIN:
            return tucker_error(w, clamped, opts)
        if variant is Variant.CLUSTERED:
            return tucker_error_cluster(w, job_matrices[index], clamped, k, seed, opts)
        if variant is Variant.RECONSTRUCTION:
            return reconstruction_error(w, clamped, opts)
        return cp_forecast_window(w, cp_rank, rho, opts)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="tensortrack") as executor:
            points = list(executor.map(score, range(len(windows))))
    else:
        points = [score(i) for i in range(len(windows))]
    logger.debug("scored %d windows with the %s statistic", len(points), variant.value)
    return ErrorSeries(sorted(points, key=lambda p: p.window_start))


def normalize_series(series: ErrorSeries) -> npt.NDArray[np.float64]:
    """Epsilon z-scored over the series (all zeros for a constant series)"""
    eps = series.epsilons
    if len(eps) < 2:
        return np.zeros_like(eps)
    std = eps.std(ddof=1)
    if std == 0:
        return np.zeros_like(eps)
    return (eps - eps.mean()) / std


def format_float(value: float) -> str:
    """Decimal form with 12 significant digits"""
    return f"{value:.{SIGNIFICANT_DIGITS}g}"


def _format_bool(value: bool) -> str:
    return "true" if value else "false"


def _parse_bool(value: str) -> bool:
    if value.lower() in ("true", "1"):
        return True
    if value.lower() in ("false", "0"):
        return False
    raise ValueError(f"Not a boolean: {value!r}")


def write_series_csv(series: ErrorSeries, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SERIES_FIELDS)
    for p in series:
        writer.writerow(
            [p.window_start, format_float(p.epsilon), p.variant.value, p.k_used, _format_bool(p.degraded)]
        )


def read_series_csv(stream: TextIO) -> ErrorSeries:
    reader = csv.DictReader(stream)
    points = []
    for lineno, row in enumerate(reader, start=2):
        try:
            points.append(
                ErrorPoint(
                    window_start=int(row["window_start"]),
                    epsilon=float(row["epsilon"]),
                    variant=Variant(row["variant"]),
                    k_used=int(row["k_used"]),
                    degraded=_parse_bool(row["degraded"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise IngestError(f"line {lineno}: malformed error series row {row}: {e}") from e
    return ErrorSeries(points)


def series_to_json(series: ErrorSeries) -> List[dict]:
    return [
        {
            "window_start": p.window_start,
            "epsilon": float(format_float(p.epsilon)),
            "variant": p.variant.value,
            "k_used": p.k_used,
            "degraded": p.degraded,
        }
        for p in series
    ]


def series_from_json(data: Iterable[dict]) -> ErrorSeries:
    return ErrorSeries(
        ErrorPoint(
            window_start=int(d["window_start"]),
            epsilon=float(d["epsilon"]),
            variant=Variant(d["variant"]),
            k_used=int(d["k_used"]),
            degraded=bool(d["degraded"]),
        )
        for d in data
    )
