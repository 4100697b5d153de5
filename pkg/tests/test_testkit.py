import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bandmf_testkit import (count_patterns, enumerate_patterns,
                            fixed_kb_patterns, reference_gaussian_delta,
                            reference_rdp_subsampled)


def test_enumerate_small_examples():
    assert enumerate_patterns(3, 2, 2) == [(), (0,), (0, 2), (1,), (2,)]
    assert enumerate_patterns(2, 1, 0) == [()]
    assert len(enumerate_patterns(4, 1, 4)) == 16


@given(st.integers(1, 18), st.integers(1, 6), st.integers(0, 5))
def test_count_matches_enumeration(n, b, k):
    patterns = enumerate_patterns(n, b, k)
    assert len(patterns) == count_patterns(n, b, k)
    assert len(set(patterns)) == len(patterns)
    for p in patterns:
        assert len(p) <= k
        assert all(y - x >= b for x, y in zip(p, p[1:]))


def test_enumeration_size_limit():
    with pytest.raises(ValueError):
        enumerate_patterns(21, 1, 1)


def test_fixed_kb_patterns():
    assert fixed_kb_patterns(6, 2, 3) == [(0, 3), (1, 4), (2, 5)]
    assert fixed_kb_patterns(5, 2, 3) == [(0, 3), (1, 4), (2,)]
    assert fixed_kb_patterns(2, 1, 4) == [(0,), (1,)]


def test_reference_gaussian_delta_closed_form():
    # delta(0) = 2 Phi(mu / 2) - 1 for the Gaussian mechanism.
    mu = 1.3
    phi = 0.5 * (1 + math.erf(mu / 2 / math.sqrt(2)))
    assert reference_gaussian_delta(mu, 0.0) == pytest.approx(2 * phi - 1,
                                                              rel=1e-12)


def test_reference_rdp_unsampled():
    # q = 1 gives the Gaussian curve alpha / (2 sigma^2).
    assert reference_rdp_subsampled(1.0, 2.0, 5) == pytest.approx(5 / 8,
                                                                  rel=1e-10)
