"""Desk-scale reproductions of the mechanism comparison and band-sweep tables."""

from __future__ import annotations

import dataclasses
import csv
import io
import logging
from typing import Optional, Sequence

import numpy as np

from bandmf import accounting as acct
from bandmf import sensitivity as sens
from bandmf.cache import cached_optimize
from bandmf.linalg import BandedLowerTriangular, GramMatrix
from bandmf.optimizer import OptimizerConfig, rmse
from bandmf.workloads import prefix_workload

logger = logging.getLogger(__name__)

# Column (A) reading of the (k, b)-optimized ``bands = b`` row on the
# published comparison scale, where the best multi-epoch factorization reads
# 1.00.  That reference factorization is not built here, so this row anchors
# the RMSE scale instead.
ANCHOR_RMSE = 1.04

TABLE5_EPS = tuple(2.0 ** e for e in range(-5, 5))


@dataclasses.dataclass(frozen=True)
class Table3Row:
    mechanism: str
    bands: Optional[int]
    equal_norm: Optional[bool]
    sens_single: Optional[float]
    sens_kb: Optional[float]
    sens_minsep: Optional[float]
    rmse_kb: Optional[float]
    rmse_minsep: Optional[float]
    raw_rmse_kb: Optional[float] = None
    converged: Optional[bool] = None


def _fmt(value) -> str:
    if value is None:
        return 'n/a'
    if isinstance(value, bool):
        return 'T' if value else 'F'
    if isinstance(value, float):
        return f'{value:.6g}'
    return str(value)


def rows_to_csv(rows: Sequence, fields: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_fmt(getattr(row, f)) for f in fields])
    return buf.getvalue()


def table3(n: int = 2052, b: int = 342, k: int = 6,
           bands_list: Sequence[int] = (128, 342),
           config: Optional[OptimizerConfig] = None, cache_dir=None,
           anchor: float = ANCHOR_RMSE) -> list[Table3Row]:
    """Prefix-sum mechanisms compared under (k, b) and b-min-sep participation.

    Each matrix is scaled to unit ``(k, b)`` sensitivity.  Column (A) is the
    RMSE under that sensitivity; column (B) multiplies it by the min-sep
    sensitivity.  RMSE values are divided by ``raw(A of the (k, b)-optimized
    bands=b row) / anchor``.  Tree aggregation is out of scope (n/a).
    """
    base = config or OptimizerConfig()
    workload = prefix_workload(n)
    kb_schema = sens.ParticipationSchema.fixed_kb(n, k, b)
    minsep_schema = sens.ParticipationSchema.min_sep(n, b, k)
    raw = []

    def measure(label, bands, equal_norm, X, C, converged):
        kb = sens.sensitivity(X, kb_schema).value
        ms = sens.sensitivity(X, minsep_schema).value
        single = sens.sens_single(X).value
        raw_a = rmse(workload, C, kb)
        raw.append((label, bands, equal_norm, single / kb, 1.0, ms / kb,
                    raw_a, converged))

    identity = BandedLowerTriangular.identity(n)
    measure('dpsgd', 1, True, GramMatrix(np.eye(n), bands=1), identity, True)
    for bands in bands_list:
        for mode in ('kb_projected', 'equal_norm'):
            cfg = dataclasses.replace(base, mode=mode,
                                      k=k if mode == 'kb_projected' else None,
                                      b=b if mode == 'kb_projected' else None)
            schema = kb_schema if mode == 'kb_projected' else minsep_schema
            res = cached_optimize(workload, bands, cfg, schema, cache_dir)
            measure('banded_mf', bands, mode == 'equal_norm', res.X, res.C,
                    res.converged)
    anchor_raw = next(r[6] for r in raw
                      if r[1] == max(bands_list) and r[2] is False)
    scale = anchor_raw / anchor
    rows = [Table3Row('optimal_treeagg', None, False, None, None, None, None,
                      None)]
    for label, bands, eq, single, kb, ms, raw_a, conv in raw:
        rows.append(Table3Row(label, bands, eq, single, kb, ms,
                              raw_a / scale, raw_a * ms / scale, raw_a, conv))
    return rows


TABLE3_FIELDS = ('mechanism', 'bands', 'equal_norm', 'sens_single', 'sens_kb',
                 'sens_minsep', 'rmse_kb', 'rmse_minsep', 'raw_rmse_kb',
                 'converged')


@dataclasses.dataclass(frozen=True)
class Table5Cell:
    epsilon: float
    epochs: int
    best_bands: Optional[int]
    sweep: acct.SweepResult


def table5(n: int = 1024, delta: float = 1e-6,
           eps_grid: Sequence[float] = TABLE5_EPS,
           epochs_grid: Sequence[int] = (1, 8), batch: int = 100,
           config: Optional[OptimizerConfig] = None, cache_dir=None,
           include_full: bool = True,
           exact_gaussian: bool = False) -> list[Table5Cell]:
    """Best band count per (epsilon, epochs) for prefix sums with amplification.

    ``epochs`` passes over ``m = batch * n / epochs`` records give ``n / epochs``
    steps per epoch.  Bands range over powers of two up to that, plus ``n``
    unless ``include_full`` is off.
    """
    base = config or OptimizerConfig()
    workload = prefix_workload(n)
    matrices: dict[int, GramMatrix] = {}

    def matrix_for(bands: int) -> GramMatrix:
        if bands not in matrices:
            matrices[bands] = cached_optimize(workload, bands, base,
                                              cache_dir=cache_dir).X
        return matrices[bands]

    cells = []
    for epochs in epochs_grid:
        if n % epochs:
            raise ValueError(f'epochs={epochs} must divide n={n}')
        per_epoch = n // epochs
        grid = acct.default_band_grid(n, per_epoch)
        if not include_full and len(grid) > 1:
            grid = [g for g in grid if g != n]
        setup = acct.AmplifiedSetup(n, batch * per_epoch, batch, 1)
        for eps in eps_grid:
            budget = acct.PrivacyBudget(epsilon=eps, delta=delta)
            result = acct.sweep_bands(workload, setup, budget, grid,
                                      matrix_for, exact_gaussian)
            logger.info('eps=%g epochs=%d best=%s', eps, epochs, result.best)
            cells.append(Table5Cell(eps, epochs, result.best, result))
    return cells


def table5_csv(cells: Sequence[Table5Cell]) -> str:
    epochs = sorted({c.epochs for c in cells})
    eps = sorted({c.epsilon for c in cells})
    lookup = {(c.epsilon, c.epochs): c.best_bands for c in cells}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['epsilon'] + [f'k={k}' for k in epochs])
    for e in eps:
        writer.writerow([f'{e:g}'] + [_fmt(lookup.get((e, k))) for k in epochs])
    return buf.getvalue()


def within_one_step(found: Optional[int], expected: int,
                    grid: Sequence[int]) -> bool:
    """Whether ``found`` sits at most one grid position from ``expected``."""
    if found is None:
        return False
    grid = sorted(grid)
    if found not in grid or expected not in grid:
        return False
    return abs(grid.index(found) - grid.index(expected)) <= 1

