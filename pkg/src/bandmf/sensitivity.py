"""L2 sensitivity of ``x -> C x`` under participation schemas.

Everything works on the Gram matrix ``X = C^T C`` with the per-step
contribution bound (clip norm) normalized to 1.

Two min-separation routines are provided: an exact one for Gram matrices
whose band count is at most the separation ``b``, and an upper bound for
arbitrary Gram matrices.  The bound is tight when every principal submatrix
restricted to a pattern is elementwise nonnegative.
"""

from __future__ import annotations

import dataclasses
import functools
import itertools
import math
from typing import Optional

import numpy as np

from bandmf.linalg import BandViolationError, GramMatrix, as_gram, bandwidth

SCHEMA_KINDS = ('single', 'every_step', 'fixed_kb', 'min_sep')

# Exhaustive pattern enumeration is exponential in n.
BRUTEFORCE_MAX_N = 16


def max_participations(n: int, b: int) -> int:
    """Worst-case participations in ``n`` steps with separation ``b``."""
    if n < 1 or b < 1:
        raise ValueError(f'n and b must be positive, got n={n}, b={b}')
    return -(-n // b)


@dataclasses.dataclass(frozen=True)
class ParticipationSchema:
    kind: str
    n: int
    k: Optional[int] = None
    b: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SCHEMA_KINDS:
            raise ValueError(f'unknown schema kind {self.kind!r}')
        if self.n < 1:
            raise ValueError('n must be positive')
        if self.kind in ('fixed_kb', 'min_sep'):
            if self.k is None or self.b is None or self.k < 1 or self.b < 1:
                raise ValueError(f'{self.kind} needs positive k and b')
        if self.kind == 'fixed_kb' and (self.k - 1) * self.b >= self.n:
            raise ValueError(
                f'(k={self.k}, b={self.b}) participation does not fit in '
                f'n={self.n} steps')
        if self.kind == 'min_sep' and self.k > max_participations(self.n, self.b):
            raise ValueError(
                f'k_cap={self.k} exceeds ceil(n/b)='
                f'{max_participations(self.n, self.b)}')

    @classmethod
    def single(cls, n: int) -> 'ParticipationSchema':
        return cls('single', n)

    @classmethod
    def every_step(cls, n: int) -> 'ParticipationSchema':
        return cls('every_step', n)

    @classmethod
    def fixed_kb(cls, n: int, k: int, b: int) -> 'ParticipationSchema':
        return cls('fixed_kb', n, k, b)

    @classmethod
    def min_sep(cls, n: int, b: int,
                k_cap: Optional[int] = None) -> 'ParticipationSchema':
        if k_cap is None:
            k_cap = max_participations(n, b)
        return cls('min_sep', n, k_cap, b)

    def to_dict(self) -> dict:
        out = {'kind': self.kind, 'n': self.n}
        if self.k is not None:
            out['k'] = self.k
        if self.b is not None:
            out['b'] = self.b
        return out


@dataclasses.dataclass(frozen=True)
class SensitivityReport:
    value: float
    exact: bool
    schema: ParticipationSchema

    def to_dict(self) -> dict:
        return {'value': self.value, 'exact': self.exact,
                'schema': self.schema.to_dict()}


def vec_sens(b: int, v, k: int) -> float:
    """Max of ``sum(v[pi])`` over index sets with gaps ``>= b`` and ``|pi| <= k``.

    ``F[i, m] = max(v[i] + F[i + b, m - 1], F[i + 1, m])`` with zero outside
    the table; each column is a suffix maximum, so the table fills in
    ``O(n k)`` with ``k`` vectorized passes.  ``v`` may be 2-D, in which case
    each row is solved independently.
    """
    if b < 1 or k < 1:
        raise ValueError(f'b and k must be positive, got b={b}, k={k}')
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    V = np.atleast_2d(v)
    rows, n = V.shape
    prev = np.zeros((rows, n + b))  # F[:, m - 1], zero-padded past the end
    for _ in range(min(k, n)):
        take = V + prev[:, b:b + n]
        cur = np.maximum.accumulate(take[:, ::-1], axis=1)[:, ::-1]
        np.maximum(cur, 0.0, out=cur)
        prev = np.zeros((rows, n + b))
        prev[:, :n] = cur
    result = prev[:, 0] if n else np.zeros(rows)
    return float(result[0]) if squeeze else result


def _gram_values(X) -> np.ndarray:
    return as_gram(X).values


def sens_minsep_banded(X, b: int, k_cap: Optional[int] = None
                       ) -> SensitivityReport:
    """Exact min-separation sensitivity for a ``b``-banded Gram matrix."""
    X = as_gram(X)
    n = X.n
    if k_cap is None:
        k_cap = max_participations(n, b)
    schema = ParticipationSchema.min_sep(n, b, k_cap)
    if bandwidth(X.values) > b:
        raise BandViolationError(
            f'Gram matrix has {bandwidth(X.values)} bands but separation is '
            f'{b}; use sens_minsep_general for an upper bound')
    diag = X.diag()
    if np.all(diag == diag[0]):
        value = math.sqrt(diag[0]) * math.sqrt(k_cap)
    else:
        value = math.sqrt(vec_sens(b, diag, k_cap))
    return SensitivityReport(value, True, schema)


def sens_minsep_general(X, b: int, k_cap: Optional[int] = None
                        ) -> SensitivityReport:
    """Upper bound on min-separation sensitivity for any Gram matrix.

    Row ``i`` contributes ``vec_sens(b, |X[i, :]|, k_cap)``; the outer
    ``vec_sens`` picks the rows.
    """
    values = _gram_values(X)
    n = values.shape[0]
    if k_cap is None:
        k_cap = max_participations(n, b)
    schema = ParticipationSchema.min_sep(n, b, k_cap)
    row_values = vec_sens(b, np.abs(values), k_cap)
    return SensitivityReport(math.sqrt(vec_sens(b, row_values, k_cap)),
                             False, schema)


def _offset_patterns(n: int, k: int, b: int) -> list[np.ndarray]:
    return [np.arange(i, min(i + k * b, n), b) for i in range(min(b, n))]


def sens_fixed_kb(X, k: int, b: int) -> SensitivityReport:
    """Sensitivity under ``(k, b)`` participation (exactly ``b`` steps apart).

    Exact for ``b``-banded ``X``; otherwise the absolute-value bound over the
    ``b`` offset patterns, which is exact when each pattern's block is
    elementwise nonnegative.
    """
    values = _gram_values(X)
    n = values.shape[0]
    schema = ParticipationSchema.fixed_kb(n, k, b)
    patterns = _offset_patterns(n, k, b)
    if bandwidth(values) <= b:
        diag = np.diagonal(values)
        best = max(float(diag[p].sum()) for p in patterns)
        return SensitivityReport(math.sqrt(best), True, schema)
    best = 0.0
    exact = True
    for p in patterns:
        block = values[np.ix_(p, p)]
        best = max(best, float(np.abs(block).sum()))
        exact = exact and bool(np.all(block >= 0.0))
    return SensitivityReport(math.sqrt(best), exact, schema)


def sens_single(X) -> SensitivityReport:
    """Single participation: the largest column norm of ``C``."""
    values = _gram_values(X)
    value = math.sqrt(float(np.max(np.diagonal(values))))
    return SensitivityReport(value, True,
                             ParticipationSchema.single(values.shape[0]))


def sens_every_step(X) -> SensitivityReport:
    values = _gram_values(X)
    value = math.sqrt(float(np.abs(values).sum()))
    return SensitivityReport(value, bool(np.all(values >= 0.0)),
                             ParticipationSchema.every_step(values.shape[0]))


def sensitivity(X, schema: ParticipationSchema) -> SensitivityReport:
    """Dispatch on the schema kind, choosing the exact route when it applies."""
    X = as_gram(X)
    if X.n != schema.n:
        raise ValueError(f'schema is for n={schema.n}, matrix is {X.n}x{X.n}')
    if schema.kind == 'single':
        return sens_single(X)
    if schema.kind == 'every_step':
        return sens_every_step(X)
    if schema.kind == 'fixed_kb':
        return sens_fixed_kb(X, schema.k, schema.b)
    if bandwidth(X.values) <= schema.b:
        return sens_minsep_banded(X, schema.b, schema.k)
    return sens_minsep_general(X, schema.b, schema.k)


@functools.lru_cache(maxsize=64)
def _minsep_indicators(n: int, b: int, k_cap: int) -> np.ndarray:
    rows = []
    for size in range(1, min(k_cap, n) + 1):
        for combo in itertools.combinations(range(n), size):
            if all(j - i >= b for i, j in zip(combo, combo[1:])):
                row = np.zeros(n)
                row[list(combo)] = 1.0
                rows.append(row)
    out = np.array(rows).reshape(len(rows), n)
    out.setflags(write=False)
    return out


def sens_bruteforce(X, b: int, k_cap: int) -> float:
    """``sqrt(max_pi sum_{i,j in pi} |X[i,j]|)`` by enumerating every pattern."""
    values = _gram_values(X)
    n = values.shape[0]
    if n > BRUTEFORCE_MAX_N:
        raise ValueError(f'brute force limited to n <= {BRUTEFORCE_MAX_N}, '
                         f'got {n}')
    P = _minsep_indicators(n, b, k_cap)
    # Each pattern's block sum is u^T |X| u with u its 0/1 indicator.
    totals = np.einsum('pi,ij,pj->p', P, np.abs(values), P)
    return math.sqrt(max(0.0, float(totals.max(initial=0.0))))
