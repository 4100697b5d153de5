import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bandmf import accounting as acct
from bandmf.linalg import BandedLowerTriangular, GramMatrix
from bandmf.workloads import prefix_workload
from bandmf_testkit import reference_gaussian_delta, reference_rdp_subsampled

from helpers import random_banded


def test_sensitivity_for_amplification(rng):
    assert acct.sensitivity_for_amplification(np.eye(4)) == 1.0
    C = BandedLowerTriangular(6, 1, np.full((6, 1), 1 / math.sqrt(6)))
    assert acct.sensitivity_for_amplification(C) == pytest.approx(
        1 / math.sqrt(6))
    C = random_banded(rng, 10, 3)
    expected = max(np.linalg.norm(C.to_dense()[:, j]) for j in range(10))
    assert acct.sensitivity_for_amplification(C) == pytest.approx(expected)


def test_amplified_event_dpsgd():
    setup = acct.AmplifiedSetup(n=100, m=1000, batch=10, bands=1)
    event = acct.build_amplified_event(setup, 1.1)
    assert event == acct.Composed(
        acct.PoissonSampled(0.01, acct.Gaussian(1.1)), 100)


def test_amplified_event_no_amplification():
    setup = acct.AmplifiedSetup(n=2000, m=50000, batch=500, bands=100)
    event = acct.build_amplified_event(setup, 2.0)
    assert event.count == 20 and event.child.q == 1.0


def test_amplified_event_q_partition():
    setup = acct.AmplifiedSetup(n=30, m=1000, batch=10, bands=4)
    event = acct.build_amplified_event(setup, 1.0)
    assert event.child.q == pytest.approx(10 / 250) and event.count == 8


def test_setup_rejects_oversized_batch():
    with pytest.raises(acct.AccountingError):
        acct.AmplifiedSetup(n=10, m=100, batch=30, bands=4)


def test_zcdp():
    assert acct.zcdp_of(acct.Gaussian(1.0)) == 0.5
    assert acct.zcdp_of(acct.Composed(acct.Gaussian(1.0), 6)) == 3.0
    assert acct.zcdp_of(acct.Gaussian(2.0), sensitivity=2.0) == 0.5
    with pytest.raises(acct.UnsupportedEventError):
        acct.zcdp_of(acct.PoissonSampled(0.1, acct.Gaussian(1.0)))


def test_rdp_degenerate_sampling():
    orders = [1.5, 2, 8, 32]
    full = acct.rdp_curve(acct.PoissonSampled(1.0, acct.Gaussian(1.3)), orders)
    np.testing.assert_allclose(full, acct.rdp_curve(acct.Gaussian(1.3), orders))
    none = acct.rdp_curve(acct.PoissonSampled(0.0, acct.Gaussian(0.5)), orders)
    assert not np.any(none)


def test_rdp_matches_reference_example():
    ours = acct.rdp_curve(acct.Composed(
        acct.PoissonSampled(0.01, acct.Gaussian(1.0)), 1000), [16])[0]
    ref = 1000 * reference_rdp_subsampled(0.01, 1.0, 16)
    assert ours == pytest.approx(ref, rel=5e-4)
    assert acct.rdp_subsampled_gaussian(0.5, 2.0, 4) == pytest.approx(
        reference_rdp_subsampled(0.5, 2.0, 4), rel=5e-4)


def test_fractional_orders_between_integers():
    # RDP is nondecreasing in the order.
    q, s = 0.05, 1.2
    values = [acct.rdp_subsampled_gaussian(q, s, a)
              for a in (1.25, 1.5, 2.0, 3.0)]
    assert all(x <= y * (1 + 1e-9) for x, y in zip(values, values[1:]))


def test_eps_gaussian_exact():
    eps = acct.eps_of(acct.Gaussian(1.0), 1e-5)
    assert reference_gaussian_delta(1.0, eps) == pytest.approx(1e-5, rel=1e-6)
    rdp_only, _ = acct.eps_from_rdp(
        acct.DEFAULT_ORDERS, acct.rdp_curve(acct.Gaussian(1.0)), 1e-5)
    assert eps <= rdp_only


def test_eps_examples():
    g = acct.Gaussian(1.0)
    assert acct.eps_of(g, 0.5) < acct.eps_of(g, 1e-5)
    assert acct.eps_of(acct.Gaussian(2.0), 1e-5) < acct.eps_of(g, 1e-5)
    assert acct.eps_of(acct.PoissonSampled(0.0, g), 1e-5) == 0.0


def test_shuffled_refuses_numbers():
    setup = acct.AmplifiedSetup(n=100, m=1000, batch=10, bands=5,
                                sampling='shuffle')
    event = acct.build_amplified_event(setup, 1.0)
    with pytest.raises(acct.UnsupportedEventError) as info:
        acct.eps_of(event, 1e-6)
    assert '20 adaptive Gaussian queries' in str(info.value)
    assert 'shuffled dataset of 200 records' in str(info.value)


@given(st.sampled_from([0.001, 0.01, 0.1]), st.floats(0.5, 5.0),
       st.integers(1, 2000))
def test_eps_monotone(q, sigma, count):
    def eps(q_, s_, c_):
        return acct.eps_of(acct.Composed(
            acct.PoissonSampled(q_, acct.Gaussian(s_)), c_), 1e-6)
    base = eps(q, sigma, count)
    assert eps(q, sigma * 1.1, count) <= base + 1e-12
    assert eps(min(1.0, q * 2), sigma, count) >= base - 1e-12
    assert eps(q, sigma, count + 1) >= base - 1e-12
    event = acct.Composed(acct.PoissonSampled(q, acct.Gaussian(sigma)), count)
    assert acct.eps_of(event, 1e-8) >= acct.eps_of(event, 1e-6) - 1e-12


@given(st.floats(0.0, 1.0), st.floats(0.5, 5.0))
def test_sampled_curve_below_unsampled(q, sigma):
    orders = [1.25, 1.5, 2, 4, 16, 64]
    sampled = acct.rdp_curve(acct.PoissonSampled(q, acct.Gaussian(sigma)),
                             orders)
    full = acct.rdp_curve(acct.Gaussian(sigma), orders)
    assert np.all(sampled <= full * (1 + 1e-9) + 1e-12)


def test_calibrate_round_trip():
    budget = acct.PrivacyBudget(epsilon=2.0, delta=1e-6)
    setup = acct.AmplifiedSetup(n=512, m=51200, batch=100, bands=8)
    sigma = acct.calibrate_sigma(setup, budget)
    eps = acct.eps_of(acct.build_amplified_event(setup, sigma), 1e-6)
    assert 2.0 * (1 - 1e-3) <= eps <= 2.0


def test_calibrate_monotone_in_eps():
    setup = acct.AmplifiedSetup(n=256, m=25600, batch=100, bands=4)
    s1 = acct.calibrate_sigma(setup, acct.PrivacyBudget(0.5, 1e-6))
    s2 = acct.calibrate_sigma(setup, acct.PrivacyBudget(1.0, 1e-6))
    assert s1 > s2


def test_calibrate_unamplified_scales_with_sensitivity():
    budget = acct.PrivacyBudget(epsilon=1.0, delta=1e-6)
    s1 = acct.calibrate_sigma(1.0, budget)
    s2 = acct.calibrate_sigma(2.0, budget)
    assert s2 == pytest.approx(2 * s1, rel=1e-12)
    assert acct.eps_of(acct.Gaussian(s1), 1e-6) <= 1.0


def test_calibrate_zcdp():
    sigma = acct.calibrate_sigma(math.sqrt(6), acct.PrivacyBudget(rho=0.5))
    assert 6 / (2 * sigma ** 2) == pytest.approx(0.5, rel=2e-3)


def test_calibrate_bracket_failure():
    with pytest.raises(acct.CalibrationError):
        acct.calibrate_sigma(1.0, acct.PrivacyBudget(epsilon=1e-9, delta=1e-9))


def test_budget_validation():
    with pytest.raises(acct.AccountingError):
        acct.PrivacyBudget(epsilon=1.0, delta=1.0)
    with pytest.raises(acct.AccountingError):
        acct.PrivacyBudget(epsilon=1.0)


def test_dpsgd_calibration_equals_band_one():
    budget = acct.PrivacyBudget(epsilon=1.0, delta=1e-6)
    setup = acct.AmplifiedSetup(n=100, m=1000, batch=10, bands=1)
    direct = acct.calibrate_noise_multiplier(setup, budget)
    assert acct.build_amplified_event(setup, direct) == acct.Composed(
        acct.PoissonSampled(0.01, acct.Gaussian(direct)), 100)


def test_sweep_total_error_and_ties():
    w = prefix_workload(32)
    setup = acct.AmplifiedSetup(n=32, m=800, batch=100, bands=1)
    budget = acct.PrivacyBudget(epsilon=1.0, delta=1e-6)
    matrices = {}

    def matrix_for(b):
        from bandmf.optimizer import optimize_banded
        matrices[b] = optimize_banded(w, b).X
        return matrices[b]

    grid = [1, 2, 4, 8, 32]
    result = acct.sweep_bands(w, setup, budget, grid, matrix_for)
    assert [r.bands for r in result.rows] == grid
    for row in result.rows:
        loss = np.trace(np.linalg.solve(matrices[row.bands].values, w.T))
        assert row.total_error == pytest.approx(row.sigma ** 2 * loss,
                                                rel=1e-10)
    best = min(result.rows, key=lambda r: (r.total_error, r.bands))
    assert result.best == best.bands
    assert not result.rows[-1].amplified
    assert 'chosen' in result.to_csv()


def test_sweep_ties_prefer_fewer_bands():
    w = prefix_workload(8)
    setup = acct.AmplifiedSetup(n=8, m=800, batch=100, bands=1)
    budget = acct.PrivacyBudget(epsilon=1.0, delta=1e-6)
    result = acct.sweep_bands(w, setup, budget, [1, 2, 4],
                              lambda b: GramMatrix(np.eye(8), bands=1))
    # Identical matrices and an identical (sensitivity 1) event per band
    # count only differ in amplification; equal costs would go to 1.
    errors = [r.total_error for r in result.rows]
    assert result.best == [1, 2, 4][int(np.argmin(errors))]


def test_sweep_records_failures():
    w = prefix_workload(8)
    setup = acct.AmplifiedSetup(n=8, m=800, batch=100, bands=1)

    def broken(b):
        if b == 2:
            raise np.linalg.LinAlgError('boom')
        return GramMatrix(np.eye(8), bands=1)

    result = acct.sweep_bands(w, setup, acct.PrivacyBudget(1.0, 1e-6),
                              [1, 2, 4], broken)
    assert 'boom' in result.rows[1].note and result.best in (1, 4)


def test_default_grid():
    assert acct.default_band_grid(1024, 128) == [1, 2, 4, 8, 16, 32, 64, 128,
                                                 1024]
    assert acct.default_band_grid(16, 16) == [1, 2, 4, 8, 16]


def test_eps_of_rdp_only_mode():
    event = acct.Composed(acct.Gaussian(1.5), 4)
    rdp_only, _ = acct.eps_from_rdp(acct.DEFAULT_ORDERS,
                                    acct.rdp_curve(event), 1e-6)
    assert acct.eps_of(event, 1e-6, exact_gaussian=False) == rdp_only
    assert acct.eps_of(event, 1e-6) < rdp_only


def test_sweep_uses_one_accountant_for_all_rows():
    w = prefix_workload(16)
    setup = acct.AmplifiedSetup(n=16, m=800, batch=100, bands=1)
    budget = acct.PrivacyBudget(epsilon=4.0, delta=1e-6)
    identity = GramMatrix(np.eye(16), bands=1)
    for exact in (False, True):
        result = acct.sweep_bands(w, setup, budget, [4, 8], lambda b: identity,
                                  exact_gaussian=exact)
        # bands = m / B = 8 has q = 1, the only row the exact curve reaches.
        unsampled = dataclasses.replace(setup, bands=8)
        expected = acct.calibrate_sigma(unsampled, budget,
                                        exact_gaussian=exact)
        assert result.rows[1].sigma == pytest.approx(expected, rel=1e-12)
