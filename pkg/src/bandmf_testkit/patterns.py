"""Exhaustive participation patterns (0-based step indices)."""

from __future__ import annotations

import functools

MAX_N = 20


def enumerate_patterns(n: int, b: int, k_cap: int) -> list[tuple[int, ...]]:
    """Every index set with consecutive gaps ``>= b`` and size ``<= k_cap``,
    including the empty set."""
    if n > MAX_N:
        raise ValueError(f'pattern enumeration limited to n <= {MAX_N}')
    if b < 1 or k_cap < 0:
        raise ValueError('b must be positive and k_cap nonnegative')
    out: list[tuple[int, ...]] = []

    def extend(prefix: tuple[int, ...], start: int) -> None:
        out.append(prefix)
        if len(prefix) == k_cap:
            return
        for nxt in range(start, n):
            extend(prefix + (nxt,), nxt + b)

    extend((), 0)
    return out


@functools.lru_cache(maxsize=None)
def count_patterns(n: int, b: int, k: int) -> int:
    """``P(n, b, k) = P(n-1, b, k) + P(n-b, b, k-1)``; the empty set counts."""
    if n <= 0 or k == 0:
        return 1
    return count_patterns(n - 1, b, k) + count_patterns(n - b, b, k - 1)


def fixed_kb_patterns(n: int, k: int, b: int) -> list[tuple[int, ...]]:
    """The ``b`` patterns of ``(k, b)`` participation: ``i, i+b, ...``."""
    return [tuple(range(i, min(i + k * b, n), b)) for i in range(min(b, n))]
