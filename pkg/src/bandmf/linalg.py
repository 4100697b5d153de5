"""Banded lower-triangular matrices and the kernels built on them.

Bandwidth convention: ``bands`` is the number of nonzero diagonals of a
lower-triangular factor, so a matrix is ``bands``-banded when every entry
with ``|i - j| >= bands`` is zero.  A diagonal matrix has ``bands == 1``;
the conventional "bandwidth" is ``bands - 1``.

Compact storage is an ``(n, bands)`` row-major array.  Row ``i`` holds
``C[i, i - bands + 1 .. i]`` left-padded with zeros, so the diagonal lives
in the last column.
"""

from __future__ import annotations

import dataclasses
import re
from typing import Iterable, Optional

import numpy as np
import scipy.linalg

# Pivot threshold for the banded Cholesky, relative to the largest diagonal.
PIVOT_RTOL = 1e-12


class BandViolationError(ValueError):
    """A matrix has nonzeros outside the declared band."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky failed; ``index`` is the 0-based leading minor that failed."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class ZeroDiagonalError(ZeroDivisionError):
    def __init__(self, index: int):
        super().__init__(f'zero diagonal entry at row {index}')
        self.index = index


def bandwidth(values: np.ndarray, atol: float = 0.0) -> int:
    """Smallest ``b`` such that ``values`` is ``b``-banded (at least 1)."""
    values = np.asarray(values)
    n = values.shape[0]
    for offset in range(n - 1, 0, -1):
        if (np.any(np.abs(np.diagonal(values, -offset)) > atol)
                or np.any(np.abs(np.diagonal(values, offset)) > atol)):
            return offset + 1
    return 1


@dataclasses.dataclass(frozen=True)
class BandedLowerTriangular:
    """A ``bands``-banded lower-triangular ``n x n`` matrix in compact form."""

    n: int
    bands: int
    data: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f'n must be positive, got {self.n}')
        if not 1 <= self.bands <= self.n:
            raise ValueError(f'bands must be in [1, {self.n}], got {self.bands}')
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.shape != (self.n, self.bands):
            raise ValueError(
                f'data must have shape {(self.n, self.bands)}, got {data.shape}')
        pad = self.bands - 1 - np.arange(self.n)
        for i in np.nonzero(pad > 0)[0]:
            if np.any(data[i, :pad[i]] != 0.0):
                raise ValueError(f'row {i} has nonzero padding')
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @classmethod
    def from_dense(cls, dense: np.ndarray,
                   bands: Optional[int] = None) -> 'BandedLowerTriangular':
        dense = np.asarray(dense, dtype=np.float64)
        n = dense.shape[0]
        if dense.shape != (n, n):
            raise ValueError(f'expected a square matrix, got {dense.shape}')
        if np.any(np.triu(dense, 1) != 0.0):
            raise BandViolationError('matrix is not lower triangular')
        actual = bandwidth(dense)
        if bands is None:
            bands = actual
        elif actual > bands:
            raise BandViolationError(
                f'matrix has {actual} bands, more than the requested {bands}')
        data = np.zeros((n, bands))
        for offset in range(bands):
            data[offset:, bands - 1 - offset] = np.diagonal(dense, -offset)
        return cls(n, bands, data)

    @classmethod
    def identity(cls, n: int) -> 'BandedLowerTriangular':
        return cls(n, 1, np.ones((n, 1)))

    def diagonal(self, offset: int = 0) -> np.ndarray:
        """Entries ``C[i, i - offset]`` for ``i >= offset``."""
        if not 0 <= offset < self.bands:
            return np.zeros(max(self.n - offset, 0))
        return self.data[offset:, self.bands - 1 - offset].copy()

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for offset in range(self.bands):
            idx = np.arange(offset, self.n)
            out[idx, idx - offset] = self.data[offset:, self.bands - 1 - offset]
        return out

    def column_norms(self) -> np.ndarray:
        sq = np.zeros(self.n)
        for offset in range(self.bands):
            sq[:self.n - offset] += self.diagonal(offset) ** 2
        return np.sqrt(sq)

    def __matmul__(self, x):
        return band_matvec(self, x)


@dataclasses.dataclass(frozen=True)
class GramMatrix:
    """Dense symmetric ``X = C^T C``; ``bands`` is set when known to be banded."""

    values: np.ndarray
    bands: Optional[int] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f'expected a square matrix, got {values.shape}')
        scale = max(1.0, float(np.max(np.abs(values)))) if values.size else 1.0
        if np.max(np.abs(values - values.T), initial=0.0) > 1e-12 * scale:
            raise ValueError('Gram matrix is not symmetric')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        if self.bands is not None:
            if not 1 <= self.bands <= values.shape[0]:
                raise ValueError(f'bands out of range: {self.bands}')
            if bandwidth(values) > self.bands:
                raise BandViolationError(
                    f'matrix is not {self.bands}-banded')

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def effective_bands(self) -> int:
        return self.bands if self.bands is not None else bandwidth(self.values)

    def diag(self) -> np.ndarray:
        return np.diagonal(self.values).copy()


def as_gram(X) -> GramMatrix:
    if isinstance(X, GramMatrix):
        return X
    return GramMatrix(np.asarray(X, dtype=np.float64))


def gram(C: BandedLowerTriangular) -> GramMatrix:
    """``C^T C``, which keeps the band count of ``C``."""
    dense = C.to_dense()
    return GramMatrix(dense.T @ dense, bands=C.bands)


def _check_vector(C: BandedLowerTriangular, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != C.n:
        raise ValueError(f'dimension mismatch: matrix is {C.n}x{C.n}, '
                         f'input has leading dimension {x.shape[0]}')
    return x


# Both the batch and streaming paths accumulate over the band columns in the
# same order with separate multiply and add, so their outputs agree bitwise.


def band_matvec(C: BandedLowerTriangular, x) -> np.ndarray:
    """``C @ x`` in ``O(n * bands)``; ``x`` may be a vector or ``(n, d)``."""
    x = _check_vector(C, x)
    pad = np.zeros((C.bands - 1,) + x.shape[1:])
    xpad = np.concatenate([pad, x])
    out = np.zeros_like(x)
    for c in range(C.bands):
        coeff = C.data[:, c].reshape((C.n,) + (1,) * (x.ndim - 1))
        out += coeff * xpad[c:c + C.n]
    return out


def _solve_row(coeffs: np.ndarray, window: np.ndarray, y_i, index: int):
    acc = np.zeros_like(np.asarray(y_i, dtype=np.float64))
    for c in range(coeffs.shape[0] - 1):
        acc += coeffs[c] * window[c]
    diag = coeffs[-1]
    if diag == 0.0:
        raise ZeroDiagonalError(index)
    return (y_i - acc) / diag


def band_inv_matvec(C: BandedLowerTriangular, y) -> np.ndarray:
    """Solve ``C x = y`` by forward substitution over the band."""
    y = _check_vector(C, y)
    zero = np.flatnonzero(C.data[:, -1] == 0.0)
    if zero.size:
        raise ZeroDiagonalError(int(zero[0]))
    b = C.bands
    xpad = np.zeros((C.n + b - 1,) + y.shape[1:])
    for i in range(C.n):
        xpad[i + b - 1] = _solve_row(C.data[i], xpad[i:i + b - 1], y[i], i)
    return xpad[b - 1:]


class _Ring:
    """Fixed-capacity history of the last ``capacity`` rows, oldest first."""

    def __init__(self, capacity: int, shape: tuple):
        self.capacity = capacity
        self.buf = np.zeros((capacity,) + shape)
        self.head = 0  # slot holding the oldest row
        self.count = 0

    def window(self) -> np.ndarray:
        if self.capacity == 0:
            return self.buf
        order = (self.head + np.arange(self.capacity)) % self.capacity
        return self.buf[order]

    def push(self, row) -> None:
        if self.capacity == 0:
            return
        self.buf[self.head] = row
        self.head = (self.head + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)


class StreamingMatvec:
    """Emits ``y_i = (C x)_i`` as soon as ``x_i`` is pushed.

    Keeps only the last ``bands - 1`` inputs.
    """

    def __init__(self, C: BandedLowerTriangular, shape: tuple = ()):
        self.C = C
        self.step = 0
        self._ring = _Ring(C.bands - 1, tuple(shape))

    def push(self, x_i) -> np.ndarray:
        if self.step >= self.C.n:
            raise IndexError('stream exhausted')
        x_i = np.asarray(x_i, dtype=np.float64)
        window = self._ring.window()
        coeffs = self.C.data[self.step]
        acc = np.zeros_like(x_i)
        for c in range(self.C.bands - 1):
            acc += coeffs[c] * window[c]
        acc += coeffs[-1] * x_i
        self._ring.push(x_i)
        self.step += 1
        return acc


class StreamingInverse:
    """Emits ``x_i = (C^{-1} y)_i`` as soon as ``y_i`` is pushed.

    Keeps only the last ``bands - 1`` outputs.
    """

    def __init__(self, C: BandedLowerTriangular, shape: tuple = ()):
        zero = np.flatnonzero(C.data[:, -1] == 0.0)
        if zero.size:
            raise ZeroDiagonalError(int(zero[0]))
        self.C = C
        self.step = 0
        self._ring = _Ring(C.bands - 1, tuple(shape))

    @property
    def history_rows(self) -> int:
        return self._ring.count

    @property
    def state_capacity(self) -> int:
        return self._ring.capacity

    def push(self, y_i) -> np.ndarray:
        if self.step >= self.C.n:
            raise IndexError('stream exhausted')
        x_i = _solve_row(self.C.data[self.step], self._ring.window(),
                         np.asarray(y_i, dtype=np.float64), self.step)
        self._ring.push(x_i)
        self.step += 1
        return x_i


def stream_matvec(C: BandedLowerTriangular,
                  xs: Iterable) -> Iterable[np.ndarray]:
    stream = None
    for x_i in xs:
        if stream is None:
            stream = StreamingMatvec(C, np.shape(x_i))
        yield stream.push(x_i)


def stream_inv_matvec(C: BandedLowerTriangular,
                      ys: Iterable) -> Iterable[np.ndarray]:
    stream = None
    for y_i in ys:
        if stream is None:
            stream = StreamingInverse(C, np.shape(y_i))
        yield stream.push(y_i)


def banded_cholesky(X, bands: Optional[int] = None) -> BandedLowerTriangular:
    """Lower-triangular banded ``C`` with ``C^T C = X``.

    Reverses the index order (``Y = J X J``), takes the standard banded
    Cholesky ``Y = L L^T`` and maps back: ``C = J L^T J``.
    """
    if isinstance(X, GramMatrix):
        if bands is None:
            bands = X.effective_bands
        values = X.values
    else:
        values = np.asarray(X, dtype=np.float64)
        if bands is None:
            bands = bandwidth(values)
    n = values.shape[0]
    if bandwidth(values) > bands:
        raise BandViolationError(f'input is not {bands}-banded')
    Y = values[::-1, ::-1]
    # LAPACK lower band storage: ab[d, j] = Y[j + d, j].
    ab = np.zeros((bands, n))
    for d in range(bands):
        ab[d, :n - d] = np.diagonal(Y, -d)
    try:
        L_band = scipy.linalg.cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError as err:
        # Leading minor k of Y is the trailing minor n-k of X.
        index = _failed_minor(str(err))
        raise NotPositiveDefiniteError(
            f'matrix is not positive definite (pivot failed at row '
            f'{n - index if index is not None else "?"} of X)',
            n - index if index is not None else -1) from err
    pivots = L_band[0] ** 2
    threshold = PIVOT_RTOL * np.max(np.abs(np.diagonal(values)))
    bad = np.flatnonzero(pivots <= threshold)
    if bad.size:
        raise NotPositiveDefiniteError(
            f'pivot below threshold at row {n - 1 - bad[0]} of X',
            int(n - 1 - bad[0]))
    # L[j + d, j] = L_band[d, j]; C = J L^T J gives
    # C[i, i - d] = L[n-1-i+d, n-1-i] = L_band[d, n-1-i].
    data = np.zeros((n, bands))
    for d in range(bands):
        rows = np.arange(d, n)
        data[rows, bands - 1 - d] = L_band[d, n - 1 - rows]
    return BandedLowerTriangular(n, bands, data)


def _failed_minor(message: str) -> Optional[int]:
    match = re.search(r'(\d+)', message)
    return int(match.group(1)) if match else None
