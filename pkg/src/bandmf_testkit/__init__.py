"""Brute-force oracles for testing ``bandmf``.  Never imported by the library."""

from bandmf_testkit.patterns import (count_patterns, enumerate_patterns,
                                     fixed_kb_patterns)
from bandmf_testkit.oracles import (bruteforce_eq3, dense_band_inv_matvec,
                                    dense_band_matvec, dense_loss,
                                    finite_difference_gradient,
                                    true_l2_sensitivity_small)
from bandmf_testkit.rdp import (reference_gaussian_delta,
                                reference_rdp_subsampled)

__all__ = [
    'count_patterns', 'enumerate_patterns', 'fixed_kb_patterns',
    'bruteforce_eq3', 'dense_band_inv_matvec', 'dense_band_matvec',
    'dense_loss', 'finite_difference_gradient', 'true_l2_sensitivity_small',
    'reference_gaussian_delta', 'reference_rdp_subsampled',
]
