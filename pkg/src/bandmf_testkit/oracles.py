"""Dense references for the banded kernels, sensitivity and gradients."""

from __future__ import annotations

import itertools
import math

import numpy as np

from bandmf_testkit.patterns import enumerate_patterns

MAX_SIGN_N = 14


def dense_band_matvec(C_dense: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.asarray(C_dense) @ np.asarray(x)


def dense_band_inv_matvec(C_dense: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.solve(np.asarray(C_dense), np.asarray(y))


def dense_loss(T: np.ndarray, X: np.ndarray) -> float:
    """``sum_i e_i^T T X^{-1} e_i`` with one linear solve per column."""
    n = X.shape[0]
    total = 0.0
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        total += float(T[i] @ np.linalg.solve(X, e))
    return total


def finite_difference_gradient(f, X: np.ndarray, h: float = 1e-5
                               ) -> np.ndarray:
    """Central differences of ``f`` w.r.t. each entry of ``X`` separately."""
    X = np.array(X, dtype=np.float64)
    G = np.zeros_like(X)
    for idx in np.ndindex(*X.shape):
        up = X.copy()
        dn = X.copy()
        up[idx] += h
        dn[idx] -= h
        G[idx] = (f(up) - f(dn)) / (2.0 * h)
    return G


def bruteforce_eq3(X: np.ndarray, patterns) -> float:
    """``sqrt(max_pi sum_{i,j in pi} |X[i,j]|)`` over the given patterns."""
    A = np.abs(np.asarray(X))
    best = 0.0
    for p in patterns:
        if p:
            idx = list(p)
            best = max(best, float(A[np.ix_(idx, idx)].sum()))
    return math.sqrt(best)


def true_l2_sensitivity_small(C_dense: np.ndarray, patterns) -> float:
    """``max ||C u||`` over sign vectors ``u`` supported on a pattern (d=1)."""
    C_dense = np.asarray(C_dense, dtype=np.float64)
    n = C_dense.shape[1]
    if n > MAX_SIGN_N:
        raise ValueError(f'sign enumeration limited to n <= {MAX_SIGN_N}')
    best = 0.0
    for p in patterns:
        if not p:
            continue
        cols = C_dense[:, list(p)]
        for signs in itertools.product((1.0, -1.0), repeat=len(p) - 1):
            # Global sign flip leaves the norm unchanged; pin the first sign.
            u = np.array((1.0,) + signs)
            best = max(best, float(np.linalg.norm(cols @ u)))
    return best


def minsep_true_sensitivity(C_dense: np.ndarray, b: int, k_cap: int) -> float:
    return true_l2_sensitivity_small(
        C_dense, enumerate_patterns(C_dense.shape[1], b, k_cap))
