"""Banded matrix-factorization mechanisms for private streaming linear queries."""

from bandmf.linalg import (BandedLowerTriangular, GramMatrix, band_inv_matvec,
                           band_matvec, banded_cholesky, gram)
from bandmf.workloads import Workload, prefix_workload, sgdm_workload
from bandmf.sensitivity import ParticipationSchema, SensitivityReport
from bandmf.optimizer import (FactorizationResult, OptimizerConfig,
                              optimize_banded, rmse)

__version__ = '0.1.0'

__all__ = [
    'BandedLowerTriangular', 'GramMatrix', 'band_inv_matvec', 'band_matvec',
    'banded_cholesky', 'gram', 'Workload', 'prefix_workload', 'sgdm_workload',
    'ParticipationSchema', 'SensitivityReport',
    'FactorizationResult', 'OptimizerConfig', 'optimize_banded', 'rmse',
]
