"""Privacy accounting for banded matrix mechanisms.

A ``b``-banded mechanism run with Poisson sampling inside a partition of the
data into ``b`` groups is as private as ``k = ceil(n/b)`` adaptive
Poisson-subsampled Gaussian queries, each with sensitivity equal to the
largest column norm of ``C``.  Without sampling the release is a plain
Gaussian mechanism whose sensitivity comes from the participation schema.

The numerical accountant is Renyi DP.  Results are valid (epsilon, delta)
guarantees but slightly looser than privacy-loss-distribution accounting.
For events with no effective subsampling the exact Gaussian-mechanism
tradeoff is also evaluated and the smaller epsilon is returned.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.optimize
import scipy.special

from bandmf.linalg import BandedLowerTriangular, as_gram

logger = logging.getLogger(__name__)

DEFAULT_ORDERS = tuple([1.25, 1.5] + list(range(2, 257)))

SIGMA_BRACKET = (1e-3, 1e3)


class AccountingError(ValueError):
    pass


class CalibrationError(AccountingError):
    pass


class UnsupportedEventError(AccountingError):
    pass


# ---------------------------------------------------------------- events

@dataclasses.dataclass(frozen=True)
class Gaussian:
    """One Gaussian query; ``noise_multiplier`` is noise stddev over sensitivity."""
    noise_multiplier: float

    def __post_init__(self):
        if not self.noise_multiplier > 0:
            raise AccountingError('noise_multiplier must be positive')


@dataclasses.dataclass(frozen=True)
class PoissonSampled:
    q: float
    child: 'Event'

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise AccountingError(f'sampling probability {self.q} not in [0, 1]')


@dataclasses.dataclass(frozen=True)
class Composed:
    child: 'Event'
    count: int = 1

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 1:
            raise AccountingError('count must be a positive integer')


@dataclasses.dataclass(frozen=True)
class Shuffled:
    """Queries over batches taken by shuffling ``m / b`` records per partition.

    Kept as a structural record only; the accountant refuses to convert it.
    """
    queries: int
    partition_size: int
    batch: int
    noise_multiplier: float

    def statement(self) -> str:
        return (
            f'Shuffled participation: the banded mechanism is as private as '
            f'{self.queries} adaptive Gaussian queries (noise multiplier '
            f'{self.noise_multiplier:g}, sensitivity = max column norm of C), '
            f'each over batches of {self.batch} taken by cyclically iterating '
            f'a shuffled dataset of {self.partition_size} records.  Only '
            f'asymptotic shuffling bounds apply; use Poisson accounting for '
            f'numbers.')


Event = Union[Gaussian, PoissonSampled, Composed, Shuffled]


def event_to_dict(event: Event) -> dict:
    if isinstance(event, Gaussian):
        return {'kind': 'gaussian', 'noise_multiplier': event.noise_multiplier}
    if isinstance(event, PoissonSampled):
        return {'kind': 'poisson_sampled', 'q': event.q,
                'child': event_to_dict(event.child)}
    if isinstance(event, Composed):
        return {'kind': 'composed', 'count': event.count,
                'child': event_to_dict(event.child)}
    if isinstance(event, Shuffled):
        return {'kind': 'shuffled', **dataclasses.asdict(event)}
    raise TypeError(f'not an accounting event: {event!r}')


@dataclasses.dataclass(frozen=True)
class PrivacyBudget:
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    rho: Optional[float] = None

    def __post_init__(self):
        if self.rho is not None:
            if self.epsilon is not None or self.delta is not None:
                raise AccountingError('give either rho or (epsilon, delta)')
            if not self.rho > 0:
                raise AccountingError('rho must be positive')
            return
        if self.epsilon is None or self.delta is None:
            raise AccountingError('budget needs epsilon and delta, or rho')
        if not self.epsilon > 0:
            raise AccountingError('epsilon must be positive')
        if not 0.0 < self.delta < 1.0:
            raise AccountingError('delta must be in (0, 1)')


@dataclasses.dataclass(frozen=True)
class AmplifiedSetup:
    """``n`` steps over ``m`` records, per-step batch ``batch``, ``bands`` = b."""
    n: int
    m: int
    batch: int
    bands: int
    sampling: str = 'poisson'

    def __post_init__(self):
        if min(self.n, self.m, self.batch, self.bands) < 1:
            raise AccountingError('n, m, batch and bands must be positive')
        if self.sampling not in ('poisson', 'shuffle', 'none'):
            raise AccountingError(f'unknown sampling mode {self.sampling!r}')
        if self.bands > self.n:
            raise AccountingError(f'bands={self.bands} exceeds n={self.n}')
        if self.batch > self.m // self.bands:
            raise AccountingError(
                f'batch {self.batch} exceeds partition size '
                f'floor(m/b)={self.m // self.bands}')

    @property
    def queries(self) -> int:
        return -(-self.n // self.bands)

    @property
    def sampling_probability(self) -> float:
        return self.batch / (self.m // self.bands)


def sensitivity_for_amplification(C) -> float:
    """Largest column norm of ``C`` (from ``C`` or from its Gram matrix)."""
    if isinstance(C, BandedLowerTriangular):
        return float(np.max(C.column_norms()))
    return math.sqrt(float(np.max(np.diagonal(as_gram(C).values))))


def build_amplified_event(setup: AmplifiedSetup,
                          noise_multiplier: float) -> Event:
    if setup.sampling == 'shuffle':
        return Shuffled(setup.queries, setup.m // setup.bands, setup.batch,
                        noise_multiplier)
    if setup.sampling == 'none':
        return Composed(Gaussian(noise_multiplier), setup.queries)
    q = setup.sampling_probability
    if q > 1.0:
        raise AccountingError(f'sampling probability {q} exceeds 1')
    return Composed(PoissonSampled(q, Gaussian(noise_multiplier)),
                    setup.queries)


def zcdp_of(event: Event, sensitivity: float = 1.0) -> float:
    """rho-zCDP of a composition of unsampled Gaussian queries."""
    if isinstance(event, Gaussian):
        return sensitivity ** 2 / (2.0 * event.noise_multiplier ** 2)
    if isinstance(event, Composed):
        return event.count * zcdp_of(event.child, sensitivity)
    if isinstance(event, PoissonSampled):
        raise UnsupportedEventError(
            'zCDP is only reported for unsampled Gaussian compositions')
    raise UnsupportedEventError(Shuffled.statement(event))


# ------------------------------------------------------------------- RDP

def _log_sub(a: float, b: float) -> float:
    """``log(exp(a) - exp(b))`` for ``a >= b``."""
    if b == -math.inf:
        return a
    if a <= b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_a_int(q: float, sigma: float, alphas: np.ndarray) -> np.ndarray:
    """Binomial-expansion ``log A_alpha`` for a vector of integer orders."""
    alphas = np.asarray(alphas, dtype=np.float64)
    i = np.arange(int(alphas.max()) + 1, dtype=np.float64)
    a = alphas[:, None]
    valid = i[None, :] <= a
    with np.errstate(invalid='ignore'):
        terms = (scipy.special.gammaln(a + 1) - scipy.special.gammaln(i + 1)
                 - scipy.special.gammaln(np.maximum(a - i, 0.0) + 1)
                 + i * math.log(q) + (a - i) * math.log1p(-q)
                 + (i * i - i) / (2.0 * sigma ** 2))
    terms = np.where(valid, terms, -np.inf)
    top = terms.max(axis=1)
    return top + np.log(np.exp(terms - top[:, None]).sum(axis=1))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Two-sided series split at the crossing point z0 of the two Gaussians.
    log_a0 = log_a1 = -math.inf
    z0 = sigma ** 2 * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = scipy.special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = float(scipy.special.log_ndtr(-(i - z0) / sigma))
        log_e1 = float(scipy.special.log_ndtr(-(z0 - j) / sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma ** 2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma ** 2) + log_e1
        if coef > 0:
            log_a0 = np.logaddexp(log_a0, log_s0)
            log_a1 = np.logaddexp(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 or i > 10000:
            break
    return float(np.logaddexp(log_a0, log_a1))


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP at order ``alpha`` of the Poisson-subsampled Gaussian mechanism."""
    if alpha <= 1:
        raise AccountingError('RDP orders must exceed 1')
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma ** 2)
    if float(alpha).is_integer():
        log_a = float(_log_a_int(q, sigma, np.array([alpha]))[0])
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(0.0, log_a / (alpha - 1.0))


def rdp_curve(event: Event, orders: Sequence[float] = DEFAULT_ORDERS
              ) -> np.ndarray:
    orders = np.asarray(orders, dtype=np.float64)
    if np.any(orders <= 1.0):
        raise AccountingError('RDP orders must exceed 1')
    if isinstance(event, Gaussian):
        return orders / (2.0 * event.noise_multiplier ** 2)
    if isinstance(event, Composed):
        return event.count * rdp_curve(event.child, orders)
    if isinstance(event, PoissonSampled):
        if not isinstance(event.child, Gaussian):
            raise UnsupportedEventError(
                'Poisson sampling is only supported over a single Gaussian')
        sigma = event.child.noise_multiplier
        q = event.q
        if q in (0.0, 1.0):
            return np.array([rdp_subsampled_gaussian(q, sigma, a)
                             for a in orders])
        out = np.empty(orders.size)
        integer = orders == np.round(orders)
        if integer.any():
            out[integer] = _log_a_int(q, sigma, orders[integer]) / (
                orders[integer] - 1.0)
        for idx in np.flatnonzero(~integer):
            out[idx] = _log_a_frac(q, sigma, orders[idx]) / (orders[idx] - 1.0)
        return np.maximum(out, 0.0)
    raise UnsupportedEventError(event.statement())


def eps_from_rdp(orders, rdp, delta: float) -> tuple[float, float]:
    """Best ``(epsilon, order)`` over the grid, using the improved conversion
    ``rdp + log((a-1)/a) - (log(delta) + log(a)) / (a-1)``."""
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    eps = (rdp + np.log1p(-1.0 / orders)
           - (math.log(delta) + np.log(orders)) / (orders - 1.0))
    eps = np.where(np.isnan(eps), np.inf, eps)
    idx = int(np.argmin(eps))
    return max(0.0, float(eps[idx])), float(orders[idx])


def _gaussian_mu_sq(event: Event) -> Optional[float]:
    """Sum of ``1/sigma^2`` over effective Gaussian queries, or ``None``
    when the event has genuine subsampling (``0 < q < 1``)."""
    if isinstance(event, Gaussian):
        return 1.0 / event.noise_multiplier ** 2
    if isinstance(event, Composed):
        inner = _gaussian_mu_sq(event.child)
        return None if inner is None else event.count * inner
    if isinstance(event, PoissonSampled):
        if event.q == 0.0:
            return 0.0
        return _gaussian_mu_sq(event.child) if event.q == 1.0 else None
    return None


def gaussian_delta(mu: float, eps: float) -> float:
    """Exact delta(eps) of a Gaussian mechanism with ``mu = sens / sigma``."""
    log_a = scipy.special.log_ndtr(-eps / mu + mu / 2.0)
    log_b = eps + scipy.special.log_ndtr(-eps / mu - mu / 2.0)
    if log_a == -math.inf:
        return 0.0
    return max(0.0, math.exp(log_a) * -math.expm1(log_b - log_a))


def gaussian_eps(mu: float, delta: float) -> float:
    if mu == 0.0 or gaussian_delta(mu, 0.0) <= delta:
        return 0.0
    hi = 1.0
    while gaussian_delta(mu, hi) > delta:
        hi *= 2.0
        if hi > 1e6:
            return math.inf
    return float(scipy.optimize.brentq(
        lambda e: gaussian_delta(mu, e) - delta, 0.0, hi, xtol=1e-12,
        rtol=1e-12))


def eps_of(event: Event, delta: float,
           orders: Sequence[float] = DEFAULT_ORDERS,
           exact_gaussian: bool = True) -> float:
    """Epsilon at ``delta``; an upper bound on the PLD-accounted value.

    Events without genuine subsampling also get the exact Gaussian curve
    unless ``exact_gaussian`` is off, leaving the RDP conversion alone.
    """
    if not 0.0 < delta < 1.0:
        raise AccountingError('delta must be in (0, 1)')
    if isinstance(event, Shuffled):
        raise UnsupportedEventError(event.statement())
    eps, _ = eps_from_rdp(orders, rdp_curve(event, orders), delta)
    mu_sq = _gaussian_mu_sq(event) if exact_gaussian else None
    if mu_sq is not None:
        eps = min(eps, gaussian_eps(math.sqrt(mu_sq), delta))
    return eps


# ----------------------------------------------------------- calibration

def _event_factory(source: Union[AmplifiedSetup, float]
                   ) -> tuple[Callable[[float], Event], float]:
    """Map a noise multiplier to an event, plus the sensitivity that turns
    the multiplier into an absolute noise stddev."""
    if isinstance(source, AmplifiedSetup):
        return (lambda z: build_amplified_event(source, z)), 1.0
    sens_value = float(source)
    if not sens_value > 0:
        raise CalibrationError('sensitivity must be positive')
    return (lambda z: Gaussian(z)), sens_value


def _budget_eps(event: Event, budget: PrivacyBudget,
                exact_gaussian: bool = True) -> float:
    if budget.rho is not None:
        return zcdp_of(event)
    return eps_of(event, budget.delta, exact_gaussian=exact_gaussian)


def calibrate_noise_multiplier(source: Union[AmplifiedSetup, float],
                               budget: PrivacyBudget,
                               rel_tol: float = 1e-3,
                               bracket: tuple = SIGMA_BRACKET,
                               exact_gaussian: bool = True) -> float:
    """Smallest noise multiplier (on a log bisection) meeting ``budget``.

    The search stops once the accounted value at the upper end is within
    ``rel_tol`` of the target from below, so the round trip lands in
    ``[target * (1 - rel_tol), target]``.
    """
    make, _ = _event_factory(source)
    target = budget.rho if budget.rho is not None else budget.epsilon
    lo, hi = bracket
    seen: list[tuple[float, float]] = []

    def accounted(z: float) -> float:
        value = _budget_eps(make(z), budget, exact_gaussian)
        for z_old, v_old in seen:
            # Larger noise must never cost more privacy.
            if (z - z_old) * (value - v_old) > 1e-9 * max(value, v_old, 1e-12):
                raise CalibrationError(
                    f'privacy loss not monotone in sigma: {z_old:g}->{v_old:g}, '
                    f'{z:g}->{value:g}')
        seen.append((z, value))
        return value

    if accounted(hi) > target:
        raise CalibrationError(
            f'target {target:g} not reachable with noise multiplier {hi:g}')
    if accounted(lo) <= target:
        raise CalibrationError(
            f'target {target:g} already met at noise multiplier {lo:g}; '
            'widen the bracket')
    for _ in range(200):
        if accounted(hi) >= target * (1.0 - rel_tol):
            break
        mid = math.sqrt(lo * hi)
        if accounted(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_sigma(source: Union[AmplifiedSetup, float],
                    budget: PrivacyBudget, rel_tol: float = 1e-3,
                    exact_gaussian: bool = True) -> float:
    """Noise stddev in clip-norm units.

    For an ``AmplifiedSetup`` this is the noise multiplier relative to the
    largest column norm of ``C``; for a bare sensitivity it is the
    multiplier times that sensitivity.
    """
    _, scale = _event_factory(source)
    return calibrate_noise_multiplier(source, budget, rel_tol,
                                      exact_gaussian=exact_gaussian) * scale


# ----------------------------------------------------------------- sweep

@dataclasses.dataclass(frozen=True)
class SweepRow:
    bands: int
    sigma: float
    total_error: float
    rmse: float
    loss: float
    amplified: bool
    sensitivity: float
    note: str = ''


@dataclasses.dataclass(frozen=True)
class SweepResult:
    rows: tuple
    best: Optional[int]

    def to_csv(self) -> str:
        lines = ['band,sigma,total_error,rmse,chosen,note']
        for r in self.rows:
            lines.append(f'{r.bands},{r.sigma:.10g},{r.total_error:.10g},'
                         f'{r.rmse:.10g},{int(r.bands == self.best)},{r.note}')
        return '\n'.join(lines) + '\n'


def default_band_grid(n: int, steps_per_epoch: int) -> list[int]:
    """Powers of two up to ``steps_per_epoch``, plus ``n``."""
    grid = []
    b = 1
    while b <= steps_per_epoch:
        grid.append(b)
        b *= 2
    if n not in grid:
        grid.append(n)
    return grid


def sweep_bands(workload, setup: AmplifiedSetup, budget: PrivacyBudget,
                grid: Sequence[int], matrix_for: Optional[Callable] = None,
                exact_gaussian: bool = False) -> SweepResult:
    """Calibrate and score each band count; the cheapest total error wins.

    ``matrix_for(bands)`` returns the optimized Gram matrix ``X`` (defaults to
    an equal-norm optimization).  Band counts up to ``m / B`` use the
    amplified analysis.  Larger counts get no amplification and are charged
    the ``(k, b)`` sensitivity with ``b = m / B`` and ``k = ceil(n / b)``.
    Failures are recorded in the row note; the sweep always completes.

    Every row is calibrated with the RDP conversion alone by default.  The
    exact Gaussian curve only applies to rows without subsampling, so mixing
    it in would favour those rows through tighter accounting rather than a
    better mechanism.
    """
    from bandmf.optimizer import optimize_banded
    from bandmf.sensitivity import sens_fixed_kb

    if matrix_for is None:
        def matrix_for(bands):
            return optimize_banded(workload, bands).X
    n = workload.n
    per_epoch = setup.m // setup.batch
    rows = []
    for bands in grid:
        if not 1 <= bands <= n:
            raise AccountingError(f'band count {bands} outside [1, {n}]')
        try:
            X = as_gram(matrix_for(bands))
            loss = float(np.trace(np.linalg.solve(X.values, workload.T)))
            if bands <= per_epoch:
                s = dataclasses.replace(setup, bands=bands,
                                        sampling='poisson')
                delta_c = sensitivity_for_amplification(X)
                sigma = calibrate_sigma(
                    s, budget, exact_gaussian=exact_gaussian) * delta_c
                amplified, sens_value = True, delta_c
            else:
                k = -(-n // per_epoch)
                sens_value = sens_fixed_kb(X, k, per_epoch).value
                sigma = calibrate_sigma(sens_value, budget,
                                        exact_gaussian=exact_gaussian)
                amplified = False
            rows.append(SweepRow(bands, sigma, sigma ** 2 * loss,
                                 sigma * math.sqrt(loss / n), loss,
                                 amplified, sens_value))
        except (AccountingError, np.linalg.LinAlgError, ValueError) as err:
            logger.warning('band %d failed: %s', bands, err)
            rows.append(SweepRow(bands, math.nan, math.inf, math.nan,
                                 math.nan, False, math.nan,
                                 f'error: {err}'.replace(',', ';')))
    best = None
    best_err = math.inf
    for r in sorted(rows, key=lambda r: r.bands):
        if r.total_error < best_err * (1.0 - 1e-12):
            best, best_err = r.bands, r.total_error
    return SweepResult(tuple(rows), best)
