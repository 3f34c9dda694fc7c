"""Tucker decomposition via HOOI and CP decomposition via ALS"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import numpy.typing as npt
import scipy.linalg

from .constants import DEFAULT_MAX_ITER, DEFAULT_TOL, TensorTrackError
from .tensor import (
    Dims,
    Matrix,
    ShapeError,
    Tensor3,
    as_matrix,
    frob_norm,
    mode_product,
    other_modes,
    unfold,
)

__all__ = [
    "CpFactors",
    "DecompOptions",
    "DecompositionError",
    "DegenerateError",
    "RankError",
    "TuckerFactors",
    "cp_als",
    "cp_reconstruct",
    "hooi",
    "leading_left_singular_vectors",
    "tucker_fit_error",
    "tucker_reconstruct",
]

logger = logging.getLogger(__name__)

# least-squares Gram matrices with a larger condition number are treated as singular
MAX_CONDITION = 1.0 / np.finfo(np.float64).eps

# relative-change denominator floor for the stopping rule
_FIT_FLOOR = 1e-12

# einsum subscripts for the matricized-tensor-times-Khatri-Rao product of each mode
_MTTKRP = {
    0: "ntm,tr,mr->nr",
    1: "ntm,nr,mr->tr",
    2: "ntm,nr,tr->mr",
}


class DecompositionError(TensorTrackError):
    """Raised when a decomposition cannot be computed"""

    pass


class RankError(DecompositionError, ValueError):
    """Raised when a requested rank is not supported by the input dimensions"""

    pass


class DegenerateError(DecompositionError):
    """Raised when an ALS least-squares subproblem is numerically singular"""

    pass


@dataclass(frozen=True)
class DecompOptions:
    """Stopping rule and seed for HOOI and CP-ALS

    tol: stop when |fit_k - fit_k-1| / max(fit_k-1, 1e-12) < tol
    max_iter: maximum number of iterations (HOOI) or sweeps (ALS)
    seed: seed for the randomized CP-ALS initialization (HOOI ignores it)
    """

    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.seed < 0:
            raise ValueError(f"seed must be unsigned, got {self.seed}")


@dataclass(frozen=True, eq=False)
class TuckerFactors:
    """Core tensor and orthonormal factor matrices of a Tucker decomposition

    history holds the fit error ||t - reconstruction||_F after initialization
    and after every HOOI iteration.
    """

    core: Tensor3
    a_node: Matrix
    a_time: Matrix
    a_metric: Matrix
    history: Tuple[float, ...] = ()

    def __post_init__(self):
        cols = tuple(f.shape[1] for f in self.factors)
        if cols != self.core.dims:
            raise ShapeError(
                f"Core dims {self.core.dims} do not match factor columns {cols}"
            )

    @property
    def factors(self) -> Tuple[Matrix, Matrix, Matrix]:
        return (self.a_node, self.a_time, self.a_metric)

    @property
    def ranks(self) -> Dims:
        return self.core.dims

    @property
    def dims(self) -> Dims:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def n_iter(self) -> int:
        return max(len(self.history) - 1, 0)


@dataclass(frozen=True, eq=False)
class CpFactors:
    """Weights and unit-norm rank-one factors of a CP decomposition

    weights are non-negative and sorted non-increasing; history holds the fit
    error after initialization and after every ALS sweep.
    """

    weights: npt.NDArray[np.float64]
    a_node: Matrix
    a_time: Matrix
    a_metric: Matrix
    history: Tuple[float, ...] = ()

    @property
    def rank(self) -> int:
        return len(self.weights)

    @property
    def factors(self) -> Tuple[Matrix, Matrix, Matrix]:
        return (self.a_node, self.a_time, self.a_metric)

    @property
    def dims(self) -> Dims:
        return tuple(f.shape[0] for f in self.factors)


def _column_signs(vectors: Matrix) -> npt.NDArray[np.float64]:
    """Sign of the largest-magnitude entry of each column (zero columns count as positive)"""
    if vectors.size == 0:
        return np.ones(vectors.shape[1])
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def _fix_signs(vectors: Matrix) -> Matrix:
    """Flip columns so the entry of largest magnitude in each is non-negative"""
    return vectors * _column_signs(vectors)


def _leading_subspace(matrix: Matrix, k: int) -> Matrix:
    """Leading k left singular vectors of matrix for any 1 <= k <= rows

    Uses the symmetric eigendecomposition of the smaller Gram matrix; when
    k exceeds the column count the full rows x rows Gram matrix is used so the
    basis is completed with null-space directions.
    """
    rows, cols = matrix.shape
    basis = None
    if rows <= cols or k > cols:
        gram = matrix @ matrix.T
    else:
        basis, upper = np.linalg.qr(matrix)
        gram = upper @ upper.T
    _, eigvecs = scipy.linalg.eigh(gram)
    # eigh returns eigenvalues in ascending order
    vectors = eigvecs[:, ::-1][:, :k]
    if basis is not None:
        vectors = basis @ vectors
    return _fix_signs(np.ascontiguousarray(vectors))


def leading_left_singular_vectors(m: npt.ArrayLike, k: int) -> Matrix:
    """Return a rows x k matrix with orthonormal columns spanning the dominant left singular subspace of m

    Raises:
        RankError if k is not in [1, min(rows, cols)]
    """
    matrix = as_matrix(m)
    rows, cols = matrix.shape
    if not 1 <= k <= min(rows, cols):
        raise RankError(
            f"Cannot take {k} singular vectors of a {rows} x {cols} matrix"
        )
    return _leading_subspace(matrix, k)


def _check_ranks(t: Tensor3, ranks: Sequence[int]) -> Dims:
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 3:
        raise RankError(f"Expected three ranks (node, time, metric), got {ranks}")
    for mode, (rank, dim) in enumerate(zip(ranks, t.dims)):
        if not 1 <= rank <= dim:
            raise RankError(
                f"Rank {rank} for mode {mode} must be between 1 and the dimension {dim}"
            )
    return ranks


def _project(t: Tensor3, factors: Sequence[Matrix], skip: int = -1) -> Tensor3:
    """Multiply t by the transpose of every factor except the one for mode skip"""
    projected = t
    for mode, factor in enumerate(factors):
        if mode != skip:
            projected = mode_product(projected, factor.T, mode)
    return projected


def _expand(core: Tensor3, factors: Sequence[Matrix]) -> Tensor3:
    expanded = core
    for mode, factor in enumerate(factors):
        expanded = mode_product(expanded, factor, mode)
    return expanded


def _converged(history: List[float], tol: float) -> bool:
    previous, current = history[-2], history[-1]
    return abs(current - previous) / max(previous, _FIT_FLOOR) < tol


def hooi(
    t: Tensor3, ranks: Sequence[int], opts: DecompOptions = DecompOptions()
) -> TuckerFactors:
    """Rank-(N',T',M') Tucker decomposition by higher order orthogonal iteration

    Initialized with the truncated HOSVD, so the result does not depend on
    opts.seed. Each iteration updates every factor to the leading left
    singular vectors of the tensor projected on the other two factors.
    """
    ranks = _check_ranks(t, ranks)
    factors = [_leading_subspace(unfold(t, mode), ranks[mode]) for mode in range(3)]
    core = _project(t, factors)
    history = [frob_norm(t - _expand(core, factors))]

    for iteration in range(opts.max_iter):
        for mode in range(3):
            partial = _project(t, factors, skip=mode)
            factors[mode] = _leading_subspace(unfold(partial, mode), ranks[mode])
        core = _project(t, factors)
        history.append(frob_norm(t - _expand(core, factors)))
        if _converged(history, opts.tol):
            break

    logger.debug(
        "hooi dims=%s ranks=%s iterations=%d error=%.6g",
        t.dims,
        ranks,
        len(history) - 1,
        history[-1],
    )
    return TuckerFactors(core, *factors, history=tuple(history))


def tucker_reconstruct(f: TuckerFactors) -> Tensor3:
    """Core multiplied along each mode by its factor matrix"""
    return _expand(f.core, f.factors)


def tucker_fit_error(t: Tensor3, f: TuckerFactors) -> float:
    """Unsquared Frobenius norm of t - tucker_reconstruct(f)"""
    if t.dims != f.dims:
        raise ShapeError(f"Tensor dims {t.dims} do not match factor dims {f.dims}")
    return frob_norm(t - tucker_reconstruct(f))


def _cp_tensor(weights: npt.NDArray, factors: Sequence[Matrix]) -> npt.NDArray:
    return np.einsum("r,nr,tr,mr->ntm", weights, *factors)


def _canonical_cp(
    weights: npt.NDArray, factors: List[Matrix]
) -> Tuple[npt.NDArray, List[Matrix]]:
    """Sort components by weight and fix signs on the node and time factors

    A sign flip on a node or time column is compensated on the metric column,
    leaving every rank-one term unchanged.
    """
    order = np.argsort(-weights, kind="stable")
    weights = weights[order]
    factors = [f[:, order] for f in factors]
    for mode in (0, 1):
        signs = _column_signs(factors[mode])
        factors[mode] = factors[mode] * signs
        factors[2] = factors[2] * signs
    return weights, factors


def cp_als(t: Tensor3, rank: int, opts: DecompOptions = DecompOptions()) -> CpFactors:
    """Rank-R CP decomposition by alternating least squares

    Factors start from a seeded uniform(-1, 1) draw with unit-norm columns.
    Each sweep solves the least-squares problem for one factor at a time,
    absorbs column norms into the weights, then orders components by weight.

    Raises:
        RankError if rank < 1
        DegenerateError if a least-squares Gram matrix is numerically singular
    """
    rank = int(rank)
    if rank < 1:
        raise RankError(f"CP rank must be >= 1, got {rank}")

    rng = np.random.default_rng(opts.seed)
    factors = [rng.uniform(-1.0, 1.0, size=(dim, rank)) for dim in t.dims]
    factors = [f / np.linalg.norm(f, axis=0) for f in factors]
    x = t.data

    if frob_norm(t) == 0.0:
        return CpFactors(np.zeros(rank), *factors, history=(0.0,))

    weights = np.ones(rank)
    history = [float(np.linalg.norm(x - _cp_tensor(weights, factors)))]

    for sweep in range(opts.max_iter):
        for mode in range(3):
            first, second = other_modes(mode)
            gram = (factors[first].T @ factors[first]) * (
                factors[second].T @ factors[second]
            )
            if np.linalg.cond(gram) > MAX_CONDITION:
                raise DegenerateError(
                    f"Singular least-squares subproblem for mode {mode} in sweep {sweep}"
                )
            mttkrp = np.einsum(_MTTKRP[mode], x, factors[first], factors[second])
            try:
                solved = scipy.linalg.solve(gram, mttkrp.T, assume_a="pos").T
            except np.linalg.LinAlgError as e:
                raise DegenerateError(
                    f"Least-squares subproblem for mode {mode} failed in sweep {sweep}: {e}"
                ) from e
            norms = np.linalg.norm(solved, axis=0)
            dead = norms <= np.finfo(np.float64).tiny
            # a collapsed component keeps its previous direction with zero weight
            solved[:, dead] = factors[mode][:, dead]
            norms[dead] = 0.0
            solved[:, ~dead] /= norms[~dead]
            factors[mode] = solved
            weights = norms
        weights, factors = _canonical_cp(weights, factors)
        history.append(float(np.linalg.norm(x - _cp_tensor(weights, factors))))
        if _converged(history, opts.tol):
            break

    logger.debug(
        "cp_als dims=%s rank=%d sweeps=%d error=%.6g",
        t.dims,
        rank,
        len(history) - 1,
        history[-1],
    )
    return CpFactors(weights, *factors, history=tuple(history))


def cp_reconstruct(f: CpFactors) -> Tensor3:
    """Sum of the weighted outer products of the factor columns"""
    return Tensor3(_cp_tensor(np.asarray(f.weights, dtype=np.float64), f.factors))
