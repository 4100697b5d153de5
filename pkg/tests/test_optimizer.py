import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bandmf import optimizer as opt
from bandmf.linalg import BandedLowerTriangular, gram
from bandmf.sensitivity import ParticipationSchema
from bandmf.workloads import Workload, prefix_workload, sgdm_workload
from bandmf_testkit import dense_loss, finite_difference_gradient

from helpers import random_spd


def test_loss_examples(rng):
    assert opt.loss(prefix_workload(4).T, np.eye(4)) == pytest.approx(10)
    assert opt.loss(np.eye(2), np.diag([2.0, 2.0])) == pytest.approx(1.0)
    T, X = random_spd(rng, 6), random_spd(rng, 6)
    assert opt.loss(T, X) == pytest.approx(dense_loss(T, X), rel=1e-10)


def test_loss_rejects_indefinite():
    with pytest.raises(np.linalg.LinAlgError):
        opt.loss(np.eye(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_grad_examples(rng):
    np.testing.assert_allclose(opt.loss_grad(np.eye(3), np.eye(3)),
                               -np.eye(3))
    T, X = random_spd(rng, 5), random_spd(rng, 5)
    np.testing.assert_allclose(opt.loss_grad(T, 2 * X),
                               opt.loss_grad(T, X) / 4, rtol=1e-12)


@given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_grad_matches_finite_differences(n, seed):
    rng = np.random.default_rng(seed)
    T, X = random_spd(rng, n), random_spd(rng, n)
    G = opt.loss_grad(T, X)
    # Perturbing X[i, j] and X[j, i] together sees G[i, j] + G[j, i].
    def f(Y):
        return opt.loss(T, 0.5 * (Y + Y.T))
    fd = finite_difference_gradient(f, X)
    assert np.max(np.abs(G - fd)) <= 1e-5 * np.max(np.abs(G))


def test_mask_equal_norm(rng):
    assert not np.any(opt.mask_gradient_equal_norm(np.eye(4), 2))
    assert not np.any(opt.mask_gradient_equal_norm(rng.normal(size=(5, 5)), 1))
    G = opt.mask_gradient_equal_norm(rng.normal(size=(6, 6)) + 1.0, 3)
    offsets = np.abs(np.subtract.outer(np.arange(6), np.arange(6)))
    assert np.all((G != 0) == ((offsets >= 1) & (offsets <= 2)))


def test_project_kb_examples():
    out = opt.project_gradient_kb(np.diag(np.arange(1.0, 7.0)), 2, 3)
    np.testing.assert_allclose(np.diagonal(out), [-1.5] * 3 + [1.5] * 3)
    assert not np.any(np.diagonal(opt.project_gradient_kb(
        3.0 * np.eye(8), 2, 4)))


@given(st.integers(2, 20), st.integers(1, 5), st.integers(1, 5),
       st.integers(0, 2 ** 32 - 1))
def test_project_kb_zero_offset_sums(n, k, b, seed):
    if (k - 1) * b >= n:
        return
    G = np.random.default_rng(seed).normal(size=(n, n))
    d = np.diagonal(opt.project_gradient_kb(G + G.T, k, b))
    for i in range(b):
        assert abs(d[i:min(i + k * b, n):b].sum()) <= 1e-12 * n


def test_bands_one_is_identity():
    w = prefix_workload(16)
    res = opt.optimize_banded(w, 1)
    np.testing.assert_array_equal(res.X.values, np.eye(16))
    assert res.loss == 16 * 17 / 2 and res.converged and res.iterations == 0


def test_nested_losses():
    w = prefix_workload(16)
    losses = [opt.optimize_banded(w, b).loss for b in (16, 4, 1)]
    assert losses[0] <= losses[1] <= losses[2]


def test_result_invariants():
    w = prefix_workload(24)
    res = opt.optimize_banded(w, 5)
    X = res.X.values
    assert res.converged
    assert np.all(np.diagonal(X) == 1.0)
    offsets = np.abs(np.subtract.outer(np.arange(24), np.arange(24)))
    assert np.all(X[offsets >= 5] == 0.0)
    assert np.max(np.abs(gram(res.C).values - X)) <= 1e-8
    history = np.array(res.loss_history)
    assert np.all(np.diff(history) <= 0)
    assert res.sensitivity.value == math.sqrt(5)
    assert res.loss == pytest.approx(opt.loss_from_C(w, res.C), rel=1e-9)


@pytest.mark.parametrize('n, bands', [(12, 3), (30, 6), (40, 40)])
def test_converged_gradient_small(n, bands):
    cfg = opt.OptimizerConfig(grad_tol=1e-6, rel_loss_tol=1e-300)
    res = opt.optimize_banded(prefix_workload(n), bands, cfg)
    assert res.converged and res.stop_reason == 'grad_tol'
    assert res.grad_norm <= cfg.grad_tol


def test_stop_reasons_consistent():
    for bands in (1, 2, 5):
        res = opt.optimize_banded(prefix_workload(16), bands)
        if res.stop_reason == 'grad_tol':
            assert res.grad_norm <= 1e-8
        assert res.converged == (res.stop_reason in
                                 ('grad_tol', 'rel_loss', 'trivial'))


def test_kb_projected_small():
    w = prefix_workload(64)
    cfg = opt.OptimizerConfig(mode='kb_projected', k=4, b=16)
    kb = opt.optimize_banded(w, 16, cfg)
    eq = opt.optimize_banded(w, 16)
    assert kb.loss <= eq.loss
    d = kb.X.diag()
    sums = [d[i::16].sum() for i in range(16)]
    assert max(sums) - min(sums) <= 1e-9
    assert kb.sensitivity.schema.kind == 'fixed_kb'


def test_kb_needs_bands_within_b():
    cfg = opt.OptimizerConfig(mode='kb_projected', k=2, b=4)
    with pytest.raises(ValueError):
        opt.optimize_banded(prefix_workload(8), 5, cfg)


def test_nonconvergence_reported():
    res = opt.optimize_banded(prefix_workload(32), 8,
                              opt.OptimizerConfig(max_iters=2))
    assert not res.converged and res.iterations == 2


def test_config_validation():
    with pytest.raises(ValueError):
        opt.OptimizerConfig(grad_tol=0)
    with pytest.raises(ValueError):
        opt.OptimizerConfig(mode='kb_projected')
    with pytest.raises(ValueError):
        opt.OptimizerConfig(mode='other')


def test_sgdm_workload_optimizes():
    w = sgdm_workload(20, 0.9)
    res = opt.optimize_banded(w, 4)
    assert res.converged and res.loss < np.trace(w.T)


def test_rmse_examples():
    n = 1024
    w = prefix_workload(n)
    I = BandedLowerTriangular.identity(n)
    assert opt.rmse(w, I, 1.0) == pytest.approx(math.sqrt((n + 1) / 2))
    assert opt.rmse(w, I, 1.0, 2.0) == pytest.approx(
        2 * opt.rmse(w, I, 1.0))
    small = prefix_workload(6)
    C = BandedLowerTriangular.from_dense(small.A)
    assert opt.rmse(small, C, 1.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        opt.rmse(small, C, 0.0)


@given(st.integers(2, 8), st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
def test_loss_convex_along_segments(n, seed, t):
    rng = np.random.default_rng(seed)
    T = random_spd(rng, n)
    X1, X2 = random_spd(rng, n), random_spd(rng, n)
    mid = t * X1 + (1 - t) * X2
    assert opt.loss(T, mid) <= (t * opt.loss(T, X1)
                                + (1 - t) * opt.loss(T, X2)) * (1 + 1e-10)


def test_deterministic():
    w = prefix_workload(20)
    a = opt.optimize_banded(w, 4)
    b = opt.optimize_banded(w, 4)
    assert np.array_equal(a.X.values, b.X.values)


@pytest.mark.parametrize('n,bands', [(5, 1), (40, 3), (300, 7), (130, 129)])
def test_band_of_outer_matches_dense(rng, n, bands):
    W = rng.normal(size=(n, n))
    idx = np.arange(n)
    inside = np.abs(np.subtract.outer(idx, idx)) < bands
    got = opt._band_of_outer(W, bands, block=16)
    np.testing.assert_allclose(got[inside], (W @ W.T)[inside], atol=1e-10)
