"""Lower-triangular query workloads and their Gram matrices."""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Optional

import numpy as np


@dataclasses.dataclass(frozen=True)
class Workload:
    """A workload matrix ``A`` with its cached Gram ``T = A^T A``.

    ``kind`` is ``'prefix'`` or ``'sgdm'``; ``params`` records how the matrix
    was built so it can be re-created or hashed.
    """

    A: np.ndarray
    T: np.ndarray
    kind: str
    params: dict = dataclasses.field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def descriptor(self) -> dict:
        return {'kind': self.kind, 'n': self.n, **self.params}

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.A).tobytes())
        return h.hexdigest()[:16]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def prefix_workload(n: int) -> Workload:
    if n < 1:
        raise ValueError(f'n must be positive, got {n}')
    A = np.tril(np.ones((n, n)))
    idx = np.arange(n)
    T = (n - np.maximum.outer(idx, idx)).astype(np.float64)
    return Workload(_frozen(A), _frozen(T), 'prefix')


def cooldown_schedule(n: int, floor_fraction: float = 0.05,
                      tail_fraction: float = 0.25,
                      warmup_fraction: float = 0.0) -> np.ndarray:
    """Learning-rate multipliers: constant 1, then linear decay to ``floor``.

    With ``t0 = floor((1 - tail) * n)``, steps ``t <= t0`` get 1 and the rate
    falls linearly to ``floor_fraction`` at ``t = n`` (1-based steps).  An
    optional linear warmup ramps the first ``warmup_fraction * n`` steps up
    from ``1 / w`` to 1.
    """
    if not 0.0 < tail_fraction < 1.0:
        raise ValueError('tail_fraction must be in (0, 1)')
    if not 0.0 < floor_fraction <= 1.0:
        raise ValueError('floor_fraction must be in (0, 1]')
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValueError('warmup_fraction must be in [0, 1)')
    t = np.arange(1, n + 1, dtype=np.float64)
    t0 = int(np.floor((1.0 - tail_fraction) * n))
    eta = np.ones(n)
    if t0 < n:
        tail = t > t0
        eta[tail] = 1.0 + (floor_fraction - 1.0) * (t[tail] - t0) / (n - t0)
    warm = int(np.floor(warmup_fraction * n))
    if warm > 0:
        eta[:warm] *= t[:warm] / warm
    return eta


def sgdm_workload(n: int, momentum: float,
                  lr_schedule: Optional[np.ndarray] = None) -> Workload:
    """Workload mapping gradients to SGD-with-momentum parameter displacement.

    With ``m_s = momentum * m_{s-1} + x_s`` and ``theta_t = -sum_{s<=t}
    eta_s m_s``, ``A[t, j] = sum_{s=j}^{t} eta_s * momentum**(s - j)``.
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f'momentum must be in [0, 1), got {momentum}')
    eta = np.ones(n) if lr_schedule is None else np.asarray(
        lr_schedule, dtype=np.float64)
    if eta.shape != (n,):
        raise ValueError(f'lr_schedule must have length {n}')
    if np.any(eta <= 0.0):
        raise ValueError('learning rates must be strictly positive')
    idx = np.arange(n)
    lag = idx[:, None] - idx[None, :]
    M = np.where(lag >= 0, momentum ** np.maximum(lag, 0), 0.0)
    A = np.tril(np.ones((n, n))) @ (eta[:, None] * M)
    params = {'beta': momentum}
    if lr_schedule is not None:
        params['lr_schedule'] = [float(v) for v in eta]
    return Workload(_frozen(A), _frozen(A.T @ A), 'sgdm', params)


def workload_from_config(cfg: dict) -> Workload:
    """Build a workload from a descriptor such as ``{"kind": "prefix", "n": 8}``."""
    kind = cfg.get('kind')
    n = cfg.get('n')
    if not isinstance(n, int) or n < 1:
        raise ValueError(f'workload needs a positive integer "n", got {n!r}')
    if kind == 'prefix':
        extra = set(cfg) - {'kind', 'n'}
        if extra:
            raise ValueError(f'unknown workload keys: {sorted(extra)}')
        return prefix_workload(n)
    if kind == 'sgdm':
        extra = set(cfg) - {'kind', 'n', 'beta', 'cooldown'}
        if extra:
            raise ValueError(f'unknown workload keys: {sorted(extra)}')
        beta = float(cfg.get('beta', 0.0))
        cooldown = cfg.get('cooldown')
        eta = None
        if cooldown is not None:
            unknown = set(cooldown) - {'tail', 'floor', 'warmup'}
            if unknown:
                raise ValueError(f'unknown cooldown keys: {sorted(unknown)}')
            eta = cooldown_schedule(n, cooldown.get('floor', 0.05),
                                    cooldown.get('tail', 0.25),
                                    cooldown.get('warmup', 0.0))
        w = sgdm_workload(n, beta, eta)
        params = {'beta': beta}
        if cooldown is not None:
            params['cooldown'] = dict(cooldown)
        return dataclasses.replace(w, params=params)
    raise ValueError(f'unknown workload kind {kind!r}')
