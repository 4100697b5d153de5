"""Reference subsampled-Gaussian RDP by direct high-precision summation."""

from __future__ import annotations

import mpmath


def reference_rdp_subsampled(q: float, sigma: float, alpha: int,
                             dps: int = 60) -> float:
    """``log(sum_i C(a,i) (1-q)^(a-i) q^i exp((i^2-i)/(2 sigma^2))) / (a-1)``."""
    if int(alpha) != alpha or alpha < 2:
        raise ValueError('reference evaluator needs an integer order >= 2')
    alpha = int(alpha)
    if not 0.0 <= q <= 1.0 or sigma <= 0:
        raise ValueError('need q in [0, 1] and sigma > 0')
    with mpmath.workdps(dps):
        q_m = mpmath.mpf(q)
        s2 = mpmath.mpf(sigma) ** 2
        total = mpmath.mpf(0)
        for i in range(alpha + 1):
            total += (mpmath.binomial(alpha, i) * (1 - q_m) ** (alpha - i)
                      * q_m ** i * mpmath.exp(mpmath.mpf(i * i - i) / (2 * s2)))
        value = mpmath.log(total) / (alpha - 1)
        if not mpmath.isfinite(value):
            raise OverflowError('reference sum overflowed')
        return float(value)


def reference_gaussian_delta(mu: float, eps: float, dps: int = 50) -> float:
    """Exact Gaussian-mechanism ``delta(eps)`` in high precision."""
    with mpmath.workdps(dps):
        mu_m = mpmath.mpf(mu)
        e = mpmath.mpf(eps)
        phi = lambda x: mpmath.ncdf(x)
        return float(phi(-e / mu_m + mu_m / 2)
                     - mpmath.exp(e) * phi(-e / mu_m - mu_m / 2))
