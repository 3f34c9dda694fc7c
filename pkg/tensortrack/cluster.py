"""K-means with cosine distance over job-matrix rows"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import numpy.typing as npt
from scipy.spatial.distance import cdist

from .constants import TensorTrackError
from .ingest import JobMatrix

__all__ = [
    "ClusterAssignment",
    "ZeroVectorError",
    "cosine_distance",
    "kmeans_cosine",
]

logger = logging.getLogger(__name__)

IDLE = -1
"""Assignment of nodes that ran no job in the window"""

DEFAULT_KMEANS_ITER = 100


class ZeroVectorError(TensorTrackError, ValueError):
    """Raised when a cosine distance involves an all-zero vector"""

    pass


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Per-node cluster index of one window

    assignments holds a value in [0, k) for every node with at least one job
    and IDLE (-1) for idle nodes; history is the inertia after every iteration.
    """

    assignments: npt.NDArray[np.int64]
    k: int
    inertia: float
    idle_nodes: Tuple[int, ...] = ()
    history: Tuple[float, ...] = ()

    @property
    def n_iter(self) -> int:
        return len(self.history)

    def members(self, cluster: int) -> npt.NDArray[np.int64]:
        return np.flatnonzero(self.assignments == cluster)

    def groups(self) -> List[npt.NDArray[np.int64]]:
        """Node indices of each non-empty cluster in index order, then the idle group"""
        groups = [self.members(c) for c in range(self.k)]
        groups = [g for g in groups if len(g)]
        if self.idle_nodes:
            groups.append(np.array(self.idle_nodes, dtype=np.int64))
        return groups


def cosine_distance(u: npt.ArrayLike, v: npt.ArrayLike) -> float:
    """1 - cos(u, v), in [0, 2]

    Raises:
        ZeroVectorError if either vector is all zeros
        ValueError if the vectors differ in length
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"Vectors differ in length: {u.size} and {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("Cosine distance is undefined for an all-zero vector")
    return float(np.clip(1.0 - (u @ v) / (nu * nv), 0.0, 2.0))


def _distances(rows: npt.NDArray, centroids: npt.NDArray) -> npt.NDArray:
    return np.clip(cdist(rows, centroids, metric="cosine"), 0.0, 2.0)


def _centroids(unit: npt.NDArray, labels: npt.NDArray, centroids: npt.NDArray) -> npt.NDArray:
    """Normalized mean of the unit rows assigned to each cluster"""
    updated = np.array(centroids)
    for c in range(len(centroids)):
        members = unit[labels == c]
        if not len(members):
            continue
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm > 0:
            updated[c] = mean / norm
    return updated


def _farthest_point_init(unit: npt.NDArray, k: int, rng: np.random.Generator) -> npt.NDArray:
    chosen = [int(rng.integers(len(unit)))]
    nearest = _distances(unit, unit[chosen])[:, 0]
    while len(chosen) < k:
        # argmax returns the lowest index among ties
        pick = int(np.argmax(nearest))
        chosen.append(pick)
        nearest = np.minimum(nearest, _distances(unit, unit[[pick]])[:, 0])
    return np.array(unit[chosen])


def _repair_empty(
    unit: npt.NDArray, labels: npt.NDArray, dist: npt.NDArray, centroids: npt.NDArray
) -> None:
    """Reseed each empty cluster with the row farthest from its current centroid

    Only rows whose cluster keeps at least one other member are eligible.
    Updates labels, dist and centroids in place.
    """
    k = centroids.shape[0]
    for cluster in range(k):
        if np.any(labels == cluster):
            continue
        sizes = np.bincount(labels, minlength=k)
        own = dist[np.arange(len(labels)), labels]
        own = np.where(sizes[labels] > 1, own, -1.0)
        row = int(np.argmax(own))
        centroids[cluster] = unit[row]
        dist[:, cluster] = _distances(unit, unit[[row]])[:, 0]
        labels[row] = cluster
        logger.debug("reseeded empty cluster %d from row %d", cluster, row)


def kmeans_cosine(
    jm: JobMatrix, k: int, seed: int = 0, max_iter: int = DEFAULT_KMEANS_ITER
) -> ClusterAssignment:
    """Cluster the non-idle rows of a job matrix by cosine distance

    Idle rows (no job) are excluded and reported in idle_nodes. The initial
    centroids are a seeded row followed by greedy farthest points; the
    effective k is reduced to the number of distinct row directions when
    there are fewer. Nearest-centroid ties go to the lowest cluster index.
    Iterates until the assignment stops changing or max_iter is reached.

    Raises:
        ValueError if k < 1 or max_iter < 1, or if every row is idle
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")

    rows = np.asarray(jm.entries, dtype=np.float64)
    active = np.flatnonzero(rows.any(axis=1)) if rows.size else np.array([], dtype=np.int64)
    idle = tuple(int(i) for i in np.setdiff1d(np.arange(rows.shape[0]), active))
    if not len(active):
        raise ValueError("Cannot cluster a job matrix with no active rows")

    unit = rows[active] / np.linalg.norm(rows[active], axis=1, keepdims=True)
    distinct = len(np.unique(np.round(unit, 12), axis=0))
    k_eff = min(k, distinct)
    if k_eff < k:
        logger.debug("reduced k from %d to %d distinct job vectors", k, k_eff)

    rng = np.random.default_rng(seed)
    centroids = _farthest_point_init(unit, k_eff, rng)
    previous = None
    history = []
    for _ in range(max_iter):
        dist = _distances(unit, centroids)
        labels = np.argmin(dist, axis=1)
        _repair_empty(unit, labels, dist, centroids)
        history.append(float(dist[np.arange(len(labels)), labels].sum()))
        if previous is not None and np.array_equal(labels, previous):
            break
        previous = labels
        centroids = _centroids(unit, labels, centroids)

    assignments = np.full(rows.shape[0], IDLE, dtype=np.int64)
    assignments[active] = labels
    return ClusterAssignment(
        assignments=assignments,
        k=k_eff,
        inertia=history[-1],
        idle_nodes=idle,
        history=tuple(history),
    )
