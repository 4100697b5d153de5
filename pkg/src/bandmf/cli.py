"""``bandmf`` command line: optimize, analyze and run banded mechanisms.

Exit codes: 0 success, 1 usage or input error, 2 numerical non-convergence.
Inputs are fully validated before any compute or file output.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from bandmf import accounting as acct
from bandmf import sensitivity as sens
from bandmf.cache import cached_optimize
from bandmf.io import FormatError, read_bmf, write_bmf
from bandmf.linalg import (BandedLowerTriangular, GramMatrix, banded_cholesky,
                           bandwidth, gram)
from bandmf.noise import NoiseStream
from bandmf.optimizer import OptimizerConfig, rmse
from bandmf.workloads import workload_from_config

logger = logging.getLogger('bandmf')

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2


class InputError(Exception):
    pass


# ------------------------------------------------------------ run config

class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class CooldownSpec(_Strict):
    tail: float = Field(0.25, gt=0, lt=1)
    floor: float = Field(0.05, gt=0, le=1)
    warmup: float = Field(0.0, ge=0, lt=1)


class WorkloadSpec(_Strict):
    kind: Literal['prefix', 'sgdm']
    n: int = Field(gt=0)
    beta: Optional[float] = Field(None, ge=0, lt=1)
    cooldown: Optional[CooldownSpec] = None

    def build(self):
        cfg = {'kind': self.kind, 'n': self.n}
        if self.kind == 'sgdm':
            cfg['beta'] = self.beta or 0.0
            if self.cooldown is not None:
                cfg['cooldown'] = self.cooldown.model_dump()
        elif self.beta is not None or self.cooldown is not None:
            raise InputError('beta and cooldown only apply to sgdm workloads')
        return workload_from_config(cfg)


class SchemaSpec(_Strict):
    kind: Literal['single', 'every_step', 'kb', 'minsep']
    b: Optional[int] = Field(None, gt=0)
    k: Optional[int] = Field(None, gt=0)


class OptimizerSpec(_Strict):
    max_iters: int = Field(1000, ge=0)
    grad_tol: float = Field(1e-8, gt=0)
    rel_loss_tol: float = Field(1e-10, gt=0)
    lbfgs_memory: int = Field(10, ge=1)
    mode: Literal['equal_norm', 'kb'] = 'equal_norm'
    k: Optional[int] = Field(None, gt=0)
    b: Optional[int] = Field(None, gt=0)


class AccountingSpec(_Strict):
    m: Optional[int] = Field(None, gt=0)
    batch: Optional[int] = Field(None, gt=0)
    delta: Optional[float] = Field(None, gt=0, lt=1)
    epsilon: Optional[float] = Field(None, gt=0)
    rho: Optional[float] = Field(None, gt=0)
    sigma: Optional[float] = Field(None, gt=0)
    sampling: Literal['poisson', 'none'] = 'poisson'


class OutputSpec(_Strict):
    matrix: Optional[str] = None
    report: Optional[str] = None
    table: Optional[str] = None


class RunConfig(_Strict):
    workload: Optional[WorkloadSpec] = None
    bands: Optional[int] = Field(None, gt=0)
    schema_: Optional[SchemaSpec] = Field(None, alias='schema')
    optimizer: OptimizerSpec = OptimizerSpec()
    accounting: AccountingSpec = AccountingSpec()
    outputs: OutputSpec = OutputSpec()
    seed: int = 0


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate(_load_json(path))


def _load_json(text_or_path: str):
    """Parse inline JSON or the contents of a JSON file."""
    stripped = text_or_path.lstrip()
    try:
        if stripped.startswith('{'):
            return json.loads(stripped)
        return json.loads(Path(text_or_path).read_text())
    except FileNotFoundError as err:
        raise InputError(f'no such file: {text_or_path}') from err
    except json.JSONDecodeError as err:
        raise InputError(f'invalid JSON in {text_or_path}: {err}') from err


def _workload(args, cfg: RunConfig):
    if args.workload is not None:
        spec = WorkloadSpec.model_validate(_load_json(args.workload))
    elif cfg.workload is not None:
        spec = cfg.workload
    else:
        raise InputError('a workload is required (--workload or config)')
    try:
        return spec.build()
    except ValueError as err:
        raise InputError(str(err)) from err


def _check_writable(*paths) -> None:
    for p in paths:
        if p is None:
            continue
        parent = Path(p).resolve().parent
        if not parent.is_dir():
            raise InputError(f'output directory does not exist: {parent}')


def _write_json(path, payload) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + '\n'
    if path is None:
        sys.stdout.write(text)
        return
    tmp = f'{path}.tmp'
    Path(tmp).write_text(text)
    os.replace(tmp, path)


def _write_text(path, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    tmp = f'{path}.tmp'
    Path(tmp).write_text(text)
    os.replace(tmp, path)


def _read_matrix(path: str):
    try:
        return read_bmf(path)
    except FileNotFoundError as err:
        raise InputError(f'no such file: {path}') from err
    except (FormatError, ValueError) as err:
        raise InputError(f'cannot read {path}: {err}') from err


def _as_factor(m) -> BandedLowerTriangular:
    if isinstance(m, BandedLowerTriangular):
        return m
    return banded_cholesky(m, bandwidth(m.values))


def _as_gram_of(m) -> GramMatrix:
    return gram(m) if isinstance(m, BandedLowerTriangular) else m


def _schema(kind: str, n: int, b: Optional[int], k: Optional[int]):
    try:
        if kind == 'single':
            return sens.ParticipationSchema.single(n)
        if kind == 'every_step':
            return sens.ParticipationSchema.every_step(n)
        if b is None:
            raise InputError(f'schema {kind} needs --b')
        if kind == 'kb':
            if k is None:
                raise InputError('schema kb needs --k')
            return sens.ParticipationSchema.fixed_kb(n, k, b)
        return sens.ParticipationSchema.min_sep(n, b, k)
    except ValueError as err:
        raise InputError(str(err)) from err


# ------------------------------------------------------------- commands

def cmd_optimize(args, cfg: RunConfig) -> int:
    workload = _workload(args, cfg)
    bands = args.bands or cfg.bands
    if bands is None:
        raise InputError('--bands is required')
    if not 1 <= bands <= workload.n:
        raise InputError(f'bands must be in [1, {workload.n}]')
    opt = cfg.optimizer
    mode = args.mode or opt.mode
    k = args.k if args.k is not None else opt.k
    b = args.b if args.b is not None else opt.b
    out = args.out or cfg.outputs.matrix
    report_path = args.report or cfg.outputs.report
    _check_writable(out, report_path)
    try:
        config = OptimizerConfig(
            max_iters=args.max_iters if args.max_iters is not None
            else opt.max_iters,
            grad_tol=opt.grad_tol, rel_loss_tol=opt.rel_loss_tol,
            lbfgs_memory=opt.lbfgs_memory,
            mode='kb_projected' if mode == 'kb' else 'equal_norm',
            k=k if mode == 'kb' else None, b=b if mode == 'kb' else None)
        if mode == 'kb':
            if bands > b:
                raise InputError(f'kb mode needs bands <= b ({bands} > {b})')
            sens.ParticipationSchema.fixed_kb(workload.n, k, b)
    except ValueError as err:
        raise InputError(str(err)) from err
    start = time.perf_counter()
    result = cached_optimize(workload, bands, config)
    report = result.report()
    report['wall_ms'] = round(1000.0 * (time.perf_counter() - start), 3)
    report['workload'] = workload.descriptor()
    if out:
        write_bmf(out, result.C)
    _write_json(report_path, report)
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_sensitivity(args, cfg: RunConfig) -> int:
    m = _read_matrix(args.matrix)
    X = _as_gram_of(m)
    schema = _schema(args.schema, X.n, args.b, args.k)
    _write_json(None, sens.sensitivity(X, schema).to_dict())
    return EXIT_OK


def cmd_rmse(args, cfg: RunConfig) -> int:
    workload = _workload(args, cfg)
    m = _read_matrix(args.matrix)
    if m.n != workload.n:
        raise InputError('matrix and workload sizes differ')
    C = _as_factor(m)
    if args.sensitivity is not None:
        value = args.sensitivity
    else:
        value = sens.sensitivity(gram(C), _schema(
            args.schema, C.n, args.b, args.k)).value
    if not value > 0 or not args.sigma > 0:
        raise InputError('sensitivity and sigma must be positive')
    _write_json(None, {'rmse': rmse(workload, C, value, args.sigma),
                       'sensitivity': value, 'sigma': args.sigma})
    return EXIT_OK


def _budget(args, spec: AccountingSpec) -> acct.PrivacyBudget:
    eps = args.eps if args.eps is not None else spec.epsilon
    delta = args.delta if args.delta is not None else spec.delta
    rho = getattr(args, 'rho', None) or spec.rho
    try:
        if rho is not None:
            return acct.PrivacyBudget(rho=rho)
        return acct.PrivacyBudget(epsilon=eps, delta=delta)
    except acct.AccountingError as err:
        raise InputError(str(err)) from err


def _setup(args, spec: AccountingSpec, n: int, bands: int) -> acct.AmplifiedSetup:
    m = args.m if args.m is not None else spec.m
    batch = args.batch if args.batch is not None else spec.batch
    if m is None or batch is None:
        raise InputError('--m and --batch are required')
    try:
        return acct.AmplifiedSetup(n, m, batch, bands,
                                   getattr(args, 'sampling', None)
                                   or spec.sampling)
    except acct.AccountingError as err:
        raise InputError(str(err)) from err


def cmd_calibrate(args, cfg: RunConfig) -> int:
    budget = _budget(args, cfg.accounting)
    if args.sensitivity is not None:
        if not args.sensitivity > 0:
            raise InputError('sensitivity must be positive')
        source = args.sensitivity
        event_info = {'sensitivity': args.sensitivity}
    else:
        if args.n is None or args.bands is None:
            raise InputError('--n and --bands are required (or --sensitivity)')
        source = _setup(args, cfg.accounting, args.n, args.bands)
        event_info = {'queries': source.queries,
                      'q': source.sampling_probability
                      if source.sampling == 'poisson' else 1.0}
    try:
        sigma = acct.calibrate_sigma(source, budget)
    except acct.CalibrationError as err:
        logger.error('%s', err)
        return EXIT_NONCONVERGED
    z = sigma if isinstance(source, acct.AmplifiedSetup) else (
        sigma / args.sensitivity)
    event = (acct.build_amplified_event(source, z)
             if isinstance(source, acct.AmplifiedSetup) else acct.Gaussian(z))
    out = {'sigma': sigma, **event_info}
    if budget.rho is None:
        out['epsilon'] = acct.eps_of(event, budget.delta)
        out['delta'] = budget.delta
    else:
        out['rho'] = acct.zcdp_of(event)
    _write_json(None, out)
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    workload = _workload(args, cfg)
    budget = _budget(args, cfg.accounting)
    setup = _setup(args, cfg.accounting, workload.n, 1)
    per_epoch = setup.m // setup.batch
    grid = (_int_list(args.grid) if args.grid
            else acct.default_band_grid(workload.n, per_epoch))
    if any(not 1 <= g <= workload.n for g in grid):
        raise InputError(f'grid entries must lie in [1, {workload.n}]')
    out = args.out or cfg.outputs.table
    _check_writable(out)
    result = acct.sweep_bands(
        workload, setup, budget, grid,
        lambda bands: cached_optimize(workload, bands).X,
        exact_gaussian=args.exact_gaussian)
    _write_text(out, result.to_csv())
    return EXIT_OK


def cmd_noise(args, cfg: RunConfig) -> int:
    m = _read_matrix(args.matrix)
    C = _as_factor(m)
    steps = args.steps if args.steps is not None else C.n
    if not 1 <= steps <= C.n:
        raise InputError(f'steps must be in [1, {C.n}]')
    if args.dim < 1 or args.sigma < 0:
        raise InputError('dim must be positive and sigma nonnegative')
    _check_writable(args.out)
    seed = args.seed if args.seed is not None else cfg.seed
    stream = NoiseStream(C, args.dim, args.sigma, seed)
    tmp = f'{args.out}.tmp'
    with open(tmp, 'wb') as f:
        for _ in range(steps):
            f.write(stream.next_row().astype('<f8').tobytes())
    os.replace(tmp, args.out)
    return EXIT_OK


def cmd_workload(args, cfg: RunConfig) -> int:
    workload = _workload(args, cfg)
    _check_writable(args.out)
    if args.out:
        # A is lower triangular, so it is stored in the banded layout.
        write_bmf(args.out, GramMatrix(workload.T) if args.gram
                  else BandedLowerTriangular.from_dense(workload.A))
    _write_json(None, {**workload.descriptor(), 'digest': workload.digest(),
                       'trace_T': float(np.trace(workload.T))})
    return EXIT_OK


def cmd_table3(args, cfg: RunConfig) -> int:
    from bandmf import tables
    _check_writable(args.out)
    try:
        sens.ParticipationSchema.fixed_kb(args.n, args.k, args.b)
    except ValueError as err:
        raise InputError(str(err)) from err
    bands = _int_list(args.bands)
    if max(bands) > args.b:
        raise InputError('table bands must not exceed b')
    rows = tables.table3(args.n, args.b, args.k, bands)
    _write_text(args.out, tables.rows_to_csv(rows, tables.TABLE3_FIELDS))
    converged = all(r.converged is not False for r in rows)
    return EXIT_OK if converged else EXIT_NONCONVERGED


def cmd_table5(args, cfg: RunConfig) -> int:
    from bandmf import tables
    _check_writable(args.out)
    epochs = _int_list(args.epochs)
    eps = [float(x) for x in args.eps.split(',')] if args.eps else list(
        tables.TABLE5_EPS)
    if any(args.n % e for e in epochs):
        raise InputError('every epoch count must divide n')
    if not 0 < args.delta < 1 or any(e <= 0 for e in eps):
        raise InputError('need delta in (0, 1) and positive epsilons')
    cells = tables.table5(args.n, args.delta, eps, epochs)
    _write_text(args.out, tables.table5_csv(cells))
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(',') if x.strip()]
    except ValueError as err:
        raise InputError(f'expected comma-separated integers: {text!r}') from err
    if not values:
        raise InputError('empty integer list')
    return values


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog='bandmf', description=__doc__.split('\n')[0])
    p.add_argument('--threads', type=int, default=None,
                   help='cap BLAS/LAPACK threads')
    p.add_argument('--config', help='RunConfig JSON file')
    p.add_argument('-v', '--verbose', action='store_true')
    sub = p.add_subparsers(dest='command', required=True)

    o = sub.add_parser('optimize', help='optimize a banded factorization')
    o.add_argument('--workload', help='workload JSON (file or inline)')
    o.add_argument('--bands', type=int)
    o.add_argument('--mode', choices=('equal_norm', 'kb'))
    o.add_argument('--k', type=int)
    o.add_argument('--b', type=int)
    o.add_argument('--max-iters', type=int)
    o.add_argument('--out', help='output .bmf for C')
    o.add_argument('--report', help='report JSON path (default stdout)')
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser('sensitivity', help='sensitivity of a stored matrix')
    s.add_argument('--matrix', required=True)
    s.add_argument('--schema', required=True,
                   choices=('minsep', 'kb', 'single', 'every_step'))
    s.add_argument('--b', type=int)
    s.add_argument('--k', type=int, help='participations (k_cap for minsep)')
    s.set_defaults(func=cmd_sensitivity)

    r = sub.add_parser('rmse', help='RMSE of a stored factor on a workload')
    r.add_argument('--matrix', required=True)
    r.add_argument('--workload')
    r.add_argument('--sigma', type=float, default=1.0)
    r.add_argument('--sensitivity', type=float)
    r.add_argument('--schema', default='single',
                   choices=('minsep', 'kb', 'single', 'every_step'))
    r.add_argument('--b', type=int)
    r.add_argument('--k', type=int)
    r.set_defaults(func=cmd_rmse)

    c = sub.add_parser('calibrate', help='noise for a privacy budget')
    c.add_argument('--eps', type=float)
    c.add_argument('--delta', type=float)
    c.add_argument('--rho', type=float)
    c.add_argument('--n', type=int)
    c.add_argument('--m', type=int)
    c.add_argument('--batch', type=int)
    c.add_argument('--bands', type=int)
    c.add_argument('--sampling', choices=('poisson', 'none'))
    c.add_argument('--sensitivity', type=float,
                   help='unamplified Gaussian with this sensitivity')
    c.set_defaults(func=cmd_calibrate)

    w = sub.add_parser('sweep', help='pick the band count for a budget')
    w.add_argument('--workload')
    w.add_argument('--eps', type=float)
    w.add_argument('--delta', type=float)
    w.add_argument('--m', type=int)
    w.add_argument('--batch', type=int)
    w.add_argument('--grid', help='comma-separated band counts')
    w.add_argument('--out', help='CSV path (default stdout)')
    w.add_argument('--exact-gaussian', action='store_true',
                   help='use the exact Gaussian curve for unsampled rows')
    w.set_defaults(func=cmd_sweep)

    nz = sub.add_parser('noise', help='write correlated noise rows')
    nz.add_argument('--matrix', required=True)
    nz.add_argument('--sigma', type=float, required=True)
    nz.add_argument('--dim', type=int, required=True)
    nz.add_argument('--steps', type=int)
    nz.add_argument('--seed', type=int)
    nz.add_argument('--out', required=True)
    nz.set_defaults(func=cmd_noise)

    wl = sub.add_parser('workload', help='describe or export a workload')
    wl.add_argument('--workload')
    wl.add_argument('--out', help='write A (banded layout) or T with --gram (dense)')
    wl.add_argument('--gram', action='store_true')
    wl.set_defaults(func=cmd_workload)

    t3 = sub.add_parser('table3', help='mechanism comparison table')
    t3.add_argument('--n', type=int, default=2052)
    t3.add_argument('--b', type=int, default=342)
    t3.add_argument('--k', type=int, default=6)
    t3.add_argument('--bands', default='128,342')
    t3.add_argument('--out')
    t3.set_defaults(func=cmd_table3)

    t5 = sub.add_parser('table5', help='best band count per (eps, epochs)')
    t5.add_argument('--n', type=int, default=1024)
    t5.add_argument('--delta', type=float, default=1e-6)
    t5.add_argument('--eps', help='comma-separated epsilons')
    t5.add_argument('--epochs', default='1,8')
    t5.add_argument('--out')
    t5.set_defaults(func=cmd_table5)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    limiter = contextlib.nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print('error: --threads must be positive', file=sys.stderr)
            return EXIT_INPUT
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            cfg = load_run_config(args.config)
            return args.func(args, cfg)
    except (InputError, ValidationError) as err:
        print(f'error: {err}', file=sys.stderr)
        return EXIT_INPUT


if __name__ == '__main__':
    sys.exit(main())
