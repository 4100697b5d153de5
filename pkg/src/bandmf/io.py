"""Matrix persistence: the ``.bmf`` binary format and CSV interchange.

A ``.bmf`` file is one line of JSON followed by raw little-endian float64
values in row-major order::

    {"n": 4, "bands": 2, "layout": "banded_lower", "dtype": "f64"}\\n
    <n * bands doubles>            # banded_lower: compact rows
    <n * n doubles>                # dense
"""

from __future__ import annotations

import json
import os
from typing import Union

import numpy as np

from bandmf.linalg import BandedLowerTriangular, GramMatrix

LAYOUTS = ('banded_lower', 'dense')
_DTYPE = np.dtype('<f8')


class FormatError(ValueError):
    pass


def write_bmf(path, matrix: Union[BandedLowerTriangular, GramMatrix,
                                  np.ndarray]) -> None:
    if isinstance(matrix, BandedLowerTriangular):
        header = {'n': matrix.n, 'bands': matrix.bands,
                  'layout': 'banded_lower', 'dtype': 'f64'}
        payload = matrix.data
    else:
        if isinstance(matrix, GramMatrix):
            values, bands = matrix.values, matrix.bands
        else:
            values, bands = np.asarray(matrix, dtype=np.float64), None
        n = values.shape[0]
        if values.shape != (n, n):
            raise FormatError(f'dense layout needs a square matrix, '
                              f'got {values.shape}')
        header = {'n': n, 'bands': bands if bands is not None else n,
                  'layout': 'dense', 'dtype': 'f64'}
        payload = values
    tmp = f'{os.fspath(path)}.tmp'
    with open(tmp, 'wb') as f:
        f.write(json.dumps(header, separators=(',', ':')).encode() + b'\n')
        f.write(np.ascontiguousarray(payload, dtype=_DTYPE).tobytes())
    os.replace(tmp, path)


def read_bmf_header(path) -> dict:
    with open(path, 'rb') as f:
        return _parse_header(f.readline())


def _parse_header(line: bytes) -> dict:
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f'bad .bmf header: {err}') from err
    if not isinstance(header, dict):
        raise FormatError('bad .bmf header: not a JSON object')
    missing = {'n', 'bands', 'layout', 'dtype'} - set(header)
    if missing:
        raise FormatError(f'bad .bmf header: missing {sorted(missing)}')
    if header['layout'] not in LAYOUTS:
        raise FormatError(f'unknown layout {header["layout"]!r}')
    if header['dtype'] != 'f64':
        raise FormatError(f'unsupported dtype {header["dtype"]!r}')
    n, bands = header['n'], header['bands']
    if not (isinstance(n, int) and isinstance(bands, int)
            and n >= 1 and 1 <= bands <= n):
        raise FormatError(f'bad dimensions n={n!r} bands={bands!r}')
    return header


def read_bmf(path) -> Union[BandedLowerTriangular, GramMatrix]:
    """Banded files load as ``BandedLowerTriangular``, dense as ``GramMatrix``."""
    with open(path, 'rb') as f:
        header = _parse_header(f.readline())
        raw = f.read()
    n, bands = header['n'], header['bands']
    cols = bands if header['layout'] == 'banded_lower' else n
    if len(raw) != n * cols * 8:
        raise FormatError(f'payload has {len(raw)} bytes, '
                          f'expected {n * cols * 8}')
    values = np.frombuffer(raw, dtype=_DTYPE).reshape(n, cols).astype(np.float64)
    if header['layout'] == 'banded_lower':
        return BandedLowerTriangular(n, bands, values)
    return GramMatrix(values, bands=bands if bands < n else None)


def export_csv(path, matrix) -> None:
    if isinstance(matrix, BandedLowerTriangular):
        dense = matrix.to_dense()
    elif isinstance(matrix, GramMatrix):
        dense = matrix.values
    else:
        dense = np.asarray(matrix, dtype=np.float64)
    np.savetxt(path, dense, delimiter=',', fmt='%.17g')


def import_csv(path, bands=None) -> BandedLowerTriangular:
    dense = np.loadtxt(path, delimiter=',', ndmin=2)
    return BandedLowerTriangular.from_dense(dense, bands)
