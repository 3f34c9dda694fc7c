"""Dense 3-way tensor (node x time x metric) with unfold, fold, mode product and norm"""

from __future__ import annotations

import enum
from typing import Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from .constants import TensorTrackError

__all__ = [
    "Dims",
    "Matrix",
    "Mode",
    "NonFiniteError",
    "ShapeError",
    "Tensor3",
    "as_matrix",
    "fold",
    "frob_norm",
    "mode_product",
    "other_modes",
    "unfold",
]

Matrix = npt.NDArray[np.float64]
"""Dense 2-D float64 array, row-major"""

Dims = Tuple[int, int, int]


class ShapeError(TensorTrackError, ValueError):
    """Raised when array shapes are incompatible"""

    pass


class NonFiniteError(TensorTrackError, ValueError):
    """Raised when a tensor would contain NaN or Inf"""

    pass


class Mode(enum.IntEnum):
    """Tensor axes: nodes, time slices, metrics"""

    NODE = 0
    TIME = 1
    METRIC = 2

    @property
    def axis(self) -> int:
        return int(self)


def other_modes(mode: Union[Mode, int]) -> Tuple[int, int]:
    """Return the two remaining axes of mode in increasing order"""
    mode = int(mode)
    return tuple(axis for axis in range(3) if axis != mode)


class Tensor3:
    """Immutable dense N x T x M tensor

    Canonical layout is node-major, then time, then metric: entry (n, t, m)
    lives at flat offset (n * T + t) * M + m.
    """

    __slots__ = ("_data",)

    def __init__(self, data: npt.ArrayLike):
        array = np.array(data, dtype=np.float64, order="C")
        if array.ndim != 3:
            raise ShapeError(f"Tensor3 requires a 3-way array, got shape {array.shape}")
        if not np.isfinite(array).all():
            raise NonFiniteError("Tensor3 entries must be finite (no NaN or Inf)")
        array.flags.writeable = False
        self._data = array

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> Tensor3:
        return cls(np.zeros(tuple(dims)))

    @classmethod
    def from_flat(cls, values: npt.ArrayLike, dims: Sequence[int]) -> Tensor3:
        """Build a tensor from values listed in canonical layout"""
        values = np.asarray(values, dtype=np.float64).ravel()
        dims = tuple(int(d) for d in dims)
        if values.size != int(np.prod(dims)):
            raise ShapeError(
                f"{values.size} values cannot fill a tensor of dims {dims}"
            )
        return cls(values.reshape(dims))

    @property
    def data(self) -> npt.NDArray[np.float64]:
        """Read-only N x T x M array"""
        return self._data

    @property
    def dims(self) -> Dims:
        return tuple(int(d) for d in self._data.shape)

    @property
    def n_nodes(self) -> int:
        return self._data.shape[0]

    @property
    def n_time(self) -> int:
        return self._data.shape[1]

    @property
    def n_metrics(self) -> int:
        return self._data.shape[2]

    def flat(self) -> npt.NDArray[np.float64]:
        """Entries in canonical layout"""
        return self._data.ravel()

    def time_slice(self, index: int) -> Matrix:
        """Return the N x M usage matrix at time index (a copy)"""
        return np.array(self._data[:, index, :])

    def select_nodes(self, indices: Sequence[int]) -> Tensor3:
        """Return the sub-tensor of the given node indices, in the order given"""
        return Tensor3(self._data[np.asarray(indices, dtype=int), :, :])

    def replace_time_slice(self, index: int, values: npt.ArrayLike) -> Tensor3:
        """Return a copy with the N x M slice at time index replaced"""
        data = np.array(self._data)
        data[:, index, :] = values
        return Tensor3(data)

    def __sub__(self, other: Tensor3) -> Tensor3:
        if self.dims != other.dims:
            raise ShapeError(f"Cannot subtract dims {other.dims} from {self.dims}")
        return Tensor3(self._data - other._data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor3):
            return NotImplemented
        return np.array_equal(self._data, other._data)

    def __repr__(self) -> str:
        return f"Tensor3(dims={self.dims})"


def as_matrix(values: npt.ArrayLike) -> Matrix:
    """Return values as a 2-D float64 array; raise ShapeError otherwise"""
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError(f"Expected a matrix, got shape {matrix.shape}")
    return matrix


def unfold(t: Tensor3, mode: Union[Mode, int]) -> Matrix:
    """Mode-n matricization of t

    Rows are indexed by mode; columns by the two remaining axes with the
    lower-numbered axis varying fastest (column = i_low + dims[low] * i_high).
    """
    mode = int(mode)
    moved = np.moveaxis(t.data, mode, 0)
    return np.array(np.reshape(moved, (t.dims[mode], -1), order="F"))


def fold(m: npt.ArrayLike, mode: Union[Mode, int], dims: Sequence[int]) -> Tensor3:
    """Inverse of unfold under the same column ordering"""
    mode = int(mode)
    dims = tuple(int(d) for d in dims)
    matrix = as_matrix(m)
    remaining = [dims[axis] for axis in other_modes(mode)]
    expected = (dims[mode], remaining[0] * remaining[1])
    if matrix.shape != expected:
        raise ShapeError(
            f"Cannot fold a {matrix.shape} matrix along mode {mode} into dims {dims}; "
            f"expected shape {expected}"
        )
    array = np.reshape(matrix, (dims[mode], *remaining), order="F")
    return Tensor3(np.moveaxis(array, 0, mode))


def mode_product(t: Tensor3, m: npt.ArrayLike, mode: Union[Mode, int]) -> Tensor3:
    """Multiply t along mode by matrix m (m.cols must equal t.dims[mode])

    Equivalent to fold(m @ unfold(t, mode), mode, new_dims).
    """
    mode = int(mode)
    matrix = as_matrix(m)
    if matrix.shape[1] != t.dims[mode]:
        raise ShapeError(
            f"Matrix with {matrix.shape[1]} columns cannot multiply mode {mode} "
            f"of size {t.dims[mode]}"
        )
    product = np.tensordot(matrix, t.data, axes=(1, mode))
    return Tensor3(np.moveaxis(product, 0, mode))


def frob_norm(t: Tensor3) -> float:
    """Frobenius norm: square root of the sum of squared entries"""
    return float(np.linalg.norm(t.data.ravel()))
