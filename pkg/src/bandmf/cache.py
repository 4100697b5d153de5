"""Content-addressed cache of optimized Gram matrices.

Entries are keyed by the workload digest, band count, mode, ``n`` and the
optimizer settings, and live under ``$BANDMF_CACHE_DIR`` (or an explicit
directory).  With neither set, nothing is cached.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Optional

from bandmf import sensitivity as sens
from bandmf.io import read_bmf, write_bmf
from bandmf.linalg import banded_cholesky
from bandmf.optimizer import (FactorizationResult, OptimizerConfig,
                              optimize_banded)
from bandmf.workloads import Workload

logger = logging.getLogger(__name__)

ENV_VAR = 'BANDMF_CACHE_DIR'


def resolve_cache_dir(cache_dir=None) -> Optional[Path]:
    value = cache_dir if cache_dir is not None else os.environ.get(ENV_VAR)
    if not value:
        return None
    path = Path(value)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cache_key(workload: Workload, bands: int, config: OptimizerConfig) -> str:
    payload = {'workload': workload.digest(), 'n': workload.n,
               'bands': bands, **dataclasses.asdict(config)}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def cached_optimize(workload: Workload, bands: int,
                    config: Optional[OptimizerConfig] = None,
                    schema: Optional[sens.ParticipationSchema] = None,
                    cache_dir=None) -> FactorizationResult:
    """``optimize_banded`` with on-disk reuse of the optimized ``X``."""
    config = config or OptimizerConfig()
    root = resolve_cache_dir(cache_dir)
    if root is None:
        return optimize_banded(workload, bands, config, schema)
    key = cache_key(workload, bands, config)
    matrix_path = root / f'{key}.bmf'
    meta_path = root / f'{key}.json'
    if matrix_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        X = read_bmf(matrix_path)
        if schema is None:
            schema = (sens.ParticipationSchema.fixed_kb(
                workload.n, config.k, config.b)
                if config.mode == 'kb_projected'
                else sens.ParticipationSchema.min_sep(workload.n, bands))
        logger.info('cache hit %s (bands=%d)', key, bands)
        return FactorizationResult(
            X, banded_cholesky(X, bands), meta['loss'],
            sens.sensitivity(X, schema), meta['iterations'],
            meta['converged'], tuple(meta.get('loss_history', ())),
            meta['grad_norm'], meta['wall_time'],
            meta.get('stop_reason', 'max_iters'))
    result = optimize_banded(workload, bands, config, schema)
    write_bmf(matrix_path, result.X)
    meta = {'loss': result.loss, 'iterations': result.iterations,
            'converged': result.converged, 'grad_norm': result.grad_norm,
            'wall_time': result.wall_time, 'bands': bands,
            'stop_reason': result.stop_reason,
            'workload': workload.descriptor(), 'mode': config.mode}
    tmp = meta_path.with_suffix('.json.tmp')
    tmp.write_text(json.dumps(meta, sort_keys=True))
    os.replace(tmp, meta_path)
    return result
