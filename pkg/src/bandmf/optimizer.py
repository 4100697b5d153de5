"""Optimize banded Gram matrices ``X`` for a workload, then factor ``X = C^T C``.

The objective is ``tr[T X^{-1}]`` with ``T = A^T A``.  The feasible set is
affine: entries outside the band are pinned to zero and, in ``equal_norm``
mode, the diagonal is pinned to one.  In ``kb_projected`` mode the diagonal is
free but its sums over each offset class ``{i, i+b, i+2b, ...}`` are held
fixed, which keeps the banded ``(k, b)`` sensitivity constant.  L-BFGS runs
over the free entries with a backtracking Armijo line search that also
rejects any trial point that is not positive definite.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections import deque
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from bandmf import sensitivity as sens
from bandmf.linalg import (BandedLowerTriangular, GramMatrix, as_gram,
                           banded_cholesky)
from bandmf.workloads import Workload

logger = logging.getLogger(__name__)

MODES = ('equal_norm', 'kb_projected')


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 1000
    grad_tol: float = 1e-8
    rel_loss_tol: float = 1e-10
    lbfgs_memory: int = 10
    backtrack: float = 0.5
    armijo_c1: float = 1e-4
    mode: str = 'equal_norm'
    k: Optional[int] = None
    b: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f'unknown mode {self.mode!r}')
        for name in ('grad_tol', 'rel_loss_tol', 'armijo_c1'):
            if getattr(self, name) <= 0:
                raise ValueError(f'{name} must be positive')
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError('backtrack must be in (0, 1)')
        if self.max_iters < 0 or self.lbfgs_memory < 1:
            raise ValueError('max_iters must be >= 0 and lbfgs_memory >= 1')
        if self.mode == 'kb_projected' and (self.k is None or self.b is None):
            raise ValueError('kb_projected mode needs k and b')


@dataclasses.dataclass(frozen=True)
class FactorizationResult:
    X: GramMatrix
    C: BandedLowerTriangular
    loss: float
    sensitivity: sens.SensitivityReport
    iterations: int
    converged: bool
    loss_history: tuple = ()
    grad_norm: float = 0.0
    wall_time: float = 0.0
    # 'grad_tol', 'rel_loss', 'max_iters', 'line_search' or 'trivial'
    stop_reason: str = 'trivial'

    def report(self) -> dict:
        return {
            'loss': self.loss,
            'sensitivity': self.sensitivity.to_dict(),
            'iterations': self.iterations,
            'converged': self.converged,
            'grad_norm': self.grad_norm,
            'stop_reason': self.stop_reason,
            'bands': self.C.bands,
            'n': self.C.n,
        }


def _cholesky(X: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.cholesky(X, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f'X is not positive definite: {err}') from err


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, GramMatrix) else np.asarray(
        X, dtype=np.float64)


def loss(T, X) -> float:
    """``tr[T X^{-1}]`` via a Cholesky solve."""
    factor = scipy.linalg.cho_factor(_values(X), lower=True)
    return float(np.trace(scipy.linalg.cho_solve(factor, np.asarray(T))))


def loss_grad(T, X) -> np.ndarray:
    """Gradient of ``tr[T X^{-1}]``: ``-X^{-1} T X^{-1}``, symmetrized."""
    factor = scipy.linalg.cho_factor(_values(X), lower=True)
    Z = scipy.linalg.cho_solve(factor, np.asarray(T))
    G = -scipy.linalg.cho_solve(factor, Z.T)
    return 0.5 * (G + G.T)


def _band_mask(n: int, bands: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) < bands


def mask_gradient_equal_norm(G, bands: int) -> np.ndarray:
    """Zero entries outside the band and on the diagonal."""
    G = np.array(G, dtype=np.float64)
    G[~_band_mask(G.shape[0], bands)] = 0.0
    np.fill_diagonal(G, 0.0)
    return G


def project_gradient_kb(G, k: int, b: int, bands: Optional[int] = None
                        ) -> np.ndarray:
    """Band-mask ``G`` and remove the mean of its diagonal per offset class.

    Offset class ``i`` is ``{i, i+b, ..., i+(k-1)b}`` (clipped to ``n``).
    After projection each class's diagonal sum is zero, so stepping along
    the result leaves the banded ``(k, b)`` sensitivity unchanged.  Only the
    first ``k`` entries of a class take part.
    """
    G = np.array(G, dtype=np.float64)
    n = G.shape[0]
    if (k - 1) * b >= n:
        raise ValueError(f'(k={k}, b={b}) does not fit in n={n}')
    G[~_band_mask(n, b if bands is None else bands)] = 0.0
    diag = np.diagonal(G).copy()
    for i in range(min(b, n)):
        cls = np.arange(i, min(i + k * b, n), b)
        diag[cls] -= diag[cls].mean()
    np.fill_diagonal(G, diag)
    return G


class _Objective:
    """``tr[A X^{-1} A^T]`` over the packed free entries of a banded ``X``.

    Free entries are the strict lower diagonals ``1 .. bands-1`` and, when
    ``free_diag`` is set, the main diagonal.  The gradient with respect to an
    off-diagonal parameter counts both symmetric positions.
    """

    def __init__(self, A: np.ndarray, bands: int, free_diag: bool):
        self.A = np.asarray(A)
        self.n = self.A.shape[0]
        self.bands = bands
        # Banded kernels win until the band covers a sizable part of X.
        self.banded = bands <= max(1, self.n // 4)
        self.At = (np.asfortranarray(self.A.T) if self.banded
                   else np.ascontiguousarray(self.A.T))
        self.offsets = list(range(0 if free_diag else 1, bands))
        self.sizes = [self.n - d for d in self.offsets]
        self.splits = np.cumsum(self.sizes)[:-1]
        self.weights = np.concatenate(
            [np.full(s, 1.0 if d == 0 else 2.0)
             for d, s in zip(self.offsets, self.sizes)]) if self.sizes else np.zeros(0)

    def pack(self, M: np.ndarray) -> np.ndarray:
        if not self.offsets:
            return np.zeros(0)
        return np.concatenate([np.diagonal(M, -d) for d in self.offsets])

    def unpack(self, theta: np.ndarray, base: np.ndarray) -> np.ndarray:
        X = base.copy()
        idx = np.arange(self.n)
        for d, part in zip(self.offsets, np.split(theta, self.splits)):
            X[idx[d:], idx[:self.n - d]] = part
            X[idx[:self.n - d], idx[d:]] = part
        return X

    def value(self, X: np.ndarray):
        """Returns ``(loss, state)``; raises ``LinAlgError`` when not PD.

        ``loss = ||L^{-1} A^T||_F^2`` for the Cholesky factor ``L`` of ``X``,
        computed with banded LAPACK kernels when the band is narrow.
        """
        if self.banded:
            ab = np.zeros((self.bands, self.n), order='F')
            for d in range(self.bands):
                ab[d, :self.n - d] = np.diagonal(X, -d)
            L, info = lapack.dpbtrf(ab, lower=1, overwrite_ab=1)
            if info != 0:
                raise np.linalg.LinAlgError(
                    f'X is not positive definite (pivot {info})')
            V, info = lapack.dtbtrs(L, self.At, uplo='L')
        else:
            L = _cholesky(X)
            V = scipy.linalg.solve_triangular(L, self.At, lower=True,
                                              check_finite=False)
        return float(np.einsum('ij,ij->', V, V)), (L, V)

    def gradient(self, state) -> np.ndarray:
        """``-W W^T`` with ``W = X^{-1} A^T``, filled only inside the band."""
        L, V = state
        if self.banded:
            W, _ = lapack.dtbtrs(L, V, uplo='L', trans='T')
        else:
            W = scipy.linalg.solve_triangular(L, V, lower=True, trans='T',
                                              check_finite=False)
        return -_band_of_outer(W, self.bands)


def _band_of_outer(W: np.ndarray, bands: int, block: int = 128) -> np.ndarray:
    """Entries of ``W W^T`` with ``|i - j| < bands``; others may be zero.

    Narrow bands take one row-wise dot product per diagonal.  Wider bands
    multiply row blocks against the rows they overlap within the band, which
    costs ``O(n^2 (block + bands))`` instead of ``O(n^3)``.
    """
    n = W.shape[0]
    G = np.zeros((n, n))
    if bands <= 8:
        idx = np.arange(n)
        for d in range(bands):
            diag = np.einsum('ij,ij->i', W[d:], W[:n - d])
            G[idx[d:], idx[:n - d]] = diag
            G[idx[:n - d], idx[d:]] = diag
        return G
    step = max(bands, block)
    for i in range(0, n, step):
        j = max(0, i - bands + 1)
        end = min(i + step, n)
        prod = W[i:end] @ W[j:end].T
        G[i:end, j:end] = prod
        G[j:end, i:end] = prod.T
    return G


def _two_loop(g: np.ndarray, history: deque) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    s, y, _ = history[-1]
    q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(history, reversed(alphas)):
        q += (a - rho * np.dot(y, q)) * s
    return q


def optimize_banded(workload: Workload, bands: int,
                    config: Optional[OptimizerConfig] = None,
                    schema: Optional[sens.ParticipationSchema] = None,
                    callback: Optional[Callable[[int, np.ndarray], None]] = None,
                    ) -> FactorizationResult:
    """Minimize ``tr[A^T A X^{-1}]`` over ``bands``-banded feasible ``X``.

    Starts from ``X = I``.  Non-convergence is reported through
    ``converged=False`` with the best iterate, never raised.  ``callback``
    sees ``(iteration, X)`` after every accepted step.
    """
    cfg = config or OptimizerConfig()
    n = workload.n
    if not 1 <= bands <= n:
        raise ValueError(f'bands must be in [1, {n}], got {bands}')
    if cfg.mode == 'kb_projected':
        if (cfg.k - 1) * cfg.b >= n:
            raise ValueError(f'(k={cfg.k}, b={cfg.b}) does not fit in n={n}')
        if bands > cfg.b:
            raise ValueError(
                f'kb_projected needs bands <= b ({bands} > {cfg.b}); the '
                'diagonal constraint only controls sensitivity for banded X')
    if schema is None:
        schema = (sens.ParticipationSchema.fixed_kb(n, cfg.k, cfg.b)
                  if cfg.mode == 'kb_projected'
                  else sens.ParticipationSchema.min_sep(n, bands))

    start = time.perf_counter()
    free_diag = cfg.mode == 'kb_projected'
    obj = _Objective(workload.A, bands, free_diag)
    base = np.eye(n)

    def masked_gradient(G: np.ndarray) -> np.ndarray:
        if free_diag:
            G = project_gradient_kb(G, cfg.k, cfg.b, bands)
        else:
            G = mask_gradient_equal_norm(G, bands)
        return obj.weights * obj.pack(G)

    theta = obj.pack(base)
    X = base
    f, state = obj.value(X)
    history_f = [f]
    iterations = 0
    converged = obj.weights.size == 0
    stop_reason = 'trivial' if converged else 'max_iters'
    g = masked_gradient(obj.gradient(state)) if not converged else np.zeros(0)
    gnorm = float(np.max(np.abs(g), initial=0.0))
    memory: deque = deque(maxlen=cfg.lbfgs_memory)

    while not converged and iterations < cfg.max_iters:
        if gnorm <= cfg.grad_tol:
            converged, stop_reason = True, 'grad_tol'
            break
        if memory:
            direction = -_two_loop(g, memory)
            step = 1.0
        else:
            direction = -g
            step = min(1.0, 1.0 / gnorm)
        slope = float(np.dot(g, direction))
        if slope >= 0.0:
            memory.clear()
            direction, slope = -g, -float(np.dot(g, g))
            step = min(1.0, 1.0 / gnorm)

        accepted = False
        while step > 1e-20:
            trial = theta + step * direction
            X_trial = obj.unpack(trial, base)
            try:
                f_trial, state_trial = obj.value(X_trial)
            except np.linalg.LinAlgError:
                step *= cfg.backtrack
                continue
            if f_trial <= f + cfg.armijo_c1 * step * slope:
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            logger.info('line search failed at iteration %d', iterations)
            stop_reason = 'line_search'
            break

        g_new = masked_gradient(obj.gradient(state_trial))
        s_vec = trial - theta
        y_vec = g_new - g
        sy = float(np.dot(s_vec, y_vec))
        if sy > 1e-12 * float(np.dot(y_vec, y_vec)):
            memory.append((s_vec, y_vec, 1.0 / sy))
        assert f_trial <= f, 'accepted step increased the loss'
        rel_change = (f - f_trial) / max(abs(f), 1e-300)
        theta, X, f, g = trial, X_trial, f_trial, g_new
        gnorm = float(np.max(np.abs(g), initial=0.0))
        history_f.append(f)
        iterations += 1
        if callback is not None:
            callback(iterations, X)
        if gnorm <= cfg.grad_tol:
            converged, stop_reason = True, 'grad_tol'
        elif rel_change <= cfg.rel_loss_tol:
            converged, stop_reason = True, 'rel_loss'

    if not free_diag:
        np.fill_diagonal(X, 1.0)
    Xg = GramMatrix(X, bands=bands)
    C = banded_cholesky(Xg, bands)
    report = sens.sensitivity(Xg, schema)
    wall = time.perf_counter() - start
    logger.info('bands=%d mode=%s loss=%.6g iters=%d converged=%s (%.1fs)',
                bands, cfg.mode, f, iterations, converged, wall)
    return FactorizationResult(Xg, C, f, report, iterations, converged,
                               tuple(history_f), gnorm, wall, stop_reason)


def rmse(workload: Workload, C: BandedLowerTriangular, sensitivity: float,
         sigma: float = 1.0) -> float:
    """``sigma * sensitivity * ||A C^{-1}||_F / sqrt(n)``."""
    if sensitivity <= 0 or sigma <= 0:
        raise ValueError('sensitivity and sigma must be positive')
    dense = C.to_dense()
    if np.any(np.diagonal(dense) == 0.0):
        raise np.linalg.LinAlgError('C is singular')
    # (A C^{-1})^T = C^{-T} A^T: one upper-triangular solve per column of A^T.
    Bt = scipy.linalg.solve_triangular(dense, workload.A.T, lower=True,
                                       trans='T')
    return sigma * sensitivity * math.sqrt(
        float(np.einsum('ij,ij->', Bt, Bt)) / workload.n)


def loss_from_C(workload: Workload, C: BandedLowerTriangular) -> float:
    """``||A C^{-1}||_F^2``, which equals ``tr[T X^{-1}]`` for ``X = C^T C``."""
    return rmse(workload, C, 1.0, 1.0) ** 2 * workload.n


def identity_result(workload: Workload,
                    schema: Optional[sens.ParticipationSchema] = None
                    ) -> FactorizationResult:
    n = workload.n
    X = GramMatrix(np.eye(n), bands=1)
    schema = schema or sens.ParticipationSchema.min_sep(n, 1)
    return FactorizationResult(X, BandedLowerTriangular.identity(n),
                               float(np.trace(workload.T)),
                               sens.sensitivity(X, schema), 0, True,
                               (float(np.trace(workload.T)),))
