"""Seeded streaming generation of correlated noise rows ``[C^{-1} z]_i``.

Raw draws come from numpy's ``Philox`` counter-based bit generator (64-bit
seed) through the ziggurat ``standard_normal`` transform.  Row ``i``
consumes exactly ``d`` draws, so ``default_rng(Philox(seed))
.standard_normal((n, d))`` replays the full raw matrix ``Z``.  Streams are
bit-reproducible within this implementation only.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Iterable, Iterator

import numpy as np

from bandmf.linalg import BandedLowerTriangular, StreamingInverse


class StreamExhausted(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def replay_raw(seed: int, n: int, d: int, sigma: float = 1.0) -> np.ndarray:
    """The raw draw matrix ``Z`` (``n x d``) a stream with ``seed`` consumes."""
    return sigma * make_rng(seed).standard_normal((n, d))


@dataclasses.dataclass(frozen=True)
class PrivatizedStep:
    index: int
    x_hat: np.ndarray


class NoiseStream:
    """Emits ``x_i = (z_i - sum_j C[i, j] x_j) / C[i, i]`` one row at a time.

    Only the last ``bands - 1`` output rows are kept, in a ring.
    """

    def __init__(self, C: BandedLowerTriangular, d: int, sigma: float,
                 seed: int):
        if d < 1:
            raise ValueError('dimension must be positive')
        if sigma < 0:
            raise ValueError('sigma must be nonnegative')
        if C.bands == C.n and C.n > 1:
            warnings.warn(f'C is not banded; noise state holds {C.n - 1} rows '
                          f'of dimension {d}', RuntimeWarning, stacklevel=2)
        self.C = C
        self.d = d
        self.sigma = float(sigma)
        self._rng = make_rng(seed)
        self._solver = StreamingInverse(C, (d,))

    @property
    def step(self) -> int:
        return self._solver.step

    @property
    def ring_capacity(self) -> int:
        return self._solver.state_capacity

    @property
    def history_rows(self) -> int:
        return self._solver.history_rows

    def next_row(self) -> np.ndarray:
        if self.step >= self.C.n:
            raise StreamExhausted(f'noise stream of length {self.C.n} is used up')
        return self._solver.push(self.sigma * self._rng.standard_normal(self.d))

    def __iter__(self) -> Iterator[np.ndarray]:
        while self.step < self.C.n:
            yield self.next_row()


def noise_matrix(C: BandedLowerTriangular, d: int, sigma: float,
                 seed: int) -> np.ndarray:
    stream = NoiseStream(C, d, sigma, seed)
    return np.stack([stream.next_row() for _ in range(C.n)])


def privatize_stream(C: BandedLowerTriangular, sigma: float, zeta: float,
                     xs: Iterable, seed: int) -> Iterator[PrivatizedStep]:
    """``x_hat_i = x_i + zeta * [C^{-1} z]_i``.

    Each ``x_i`` is the already clipped and summed contribution for step
    ``i``; clipping to norm ``zeta`` is the caller's job.
    """
    stream = None
    for i, x in enumerate(xs):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError('each step must be a 1-D vector')
        if stream is None:
            stream = NoiseStream(C, x.shape[0], sigma, seed)
        elif x.shape[0] != stream.d:
            raise ValueError(f'step {i} has dimension {x.shape[0]}, '
                             f'expected {stream.d}')
        yield PrivatizedStep(i, x + zeta * stream.next_row())
