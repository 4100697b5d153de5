"""Random instance builders shared by the tests."""

import numpy as np

from bandmf.linalg import BandedLowerTriangular


def random_banded(rng, n, bands, low=-1.0, high=1.0, min_diag=0.1):
    """Off-diagonal band entries uniform in [low, high], diagonal in
    [min_diag, 1]."""
    dense = np.tril(rng.uniform(low, high, (n, n)))
    idx = np.arange(n)
    dense[np.subtract.outer(idx, idx) >= bands] = 0.0
    dense[idx, idx] = rng.uniform(min_diag, 1.0, n)
    return BandedLowerTriangular.from_dense(dense, bands)


def random_spd(rng, n, nonneg=False):
    G = rng.uniform(0.0 if nonneg else -1.0, 1.0, (n + 2, n))
    return G.T @ G + 0.1 * np.eye(n)


def inverse_growth(C) -> float:
    """``max |C^{-1}|``, the factor by which input rounding can grow."""
    return float(np.max(np.abs(np.linalg.inv(C.to_dense()))))
