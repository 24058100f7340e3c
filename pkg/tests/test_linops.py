import numpy as np
import pytest
import scipy.sparse as sps
from hypothesis import given, settings, strategies as st

from oracles import random_psd
from pnpconvex.errors import BudgetError, CGError, PowerMethodError, RangeError, SpectrumError, ValidationError
from pnpconvex.forward import make_inpainting
from pnpconvex.linops import (LinearMap, adjoint_error, cg_solve, diagonal, identity, lambda_min_shifted,
                              materialize_dense, pinv_apply, power_method, symmetry_error, zero_map)


def test_shape_checks():
    op = LinearMap.from_matrix(np.ones((2, 3)))
    with pytest.raises(ValidationError):
        op(np.ones(2))
    with pytest.raises(ValidationError):
        op.apply_adjoint(np.ones(3))
    with pytest.raises(ValidationError):
        LinearMap(2, 3, lambda x: x, lambda y: y, symmetric=True)
    with pytest.raises(ValidationError):
        op @ op


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 6), k=st.integers(1, 6), n=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_algebra_matches_dense(m, k, n, seed):
    rng = np.random.default_rng(seed)
    M1, M2, M3 = rng.standard_normal((m, k)), rng.standard_normal((k, n)), rng.standard_normal((m, n))
    A, B, C = (LinearMap.from_matrix(M) for M in (M1, M2, M3))
    x, y = rng.standard_normal(n), rng.standard_normal(m)
    np.testing.assert_allclose((A @ B)(x), M1 @ M2 @ x, atol=1e-12)
    np.testing.assert_allclose((A @ B).apply_adjoint(y), (M1 @ M2).T @ y, atol=1e-12)
    np.testing.assert_allclose((A @ B + 2.5 * C - C)(x), (M1 @ M2 + 1.5 * M3) @ x, atol=1e-12)
    np.testing.assert_allclose((-C).T(y), -M3.T @ y, atol=1e-12)
    np.testing.assert_allclose(C.gram()(x), M3.T @ M3 @ x, atol=1e-12)
    assert adjoint_error(A @ B + C) < 1e-12


def test_sparse_and_diagonal_maps(rng):
    S = sps.random(20, 15, density=0.3, random_state=1)
    op = LinearMap.from_matrix(S)
    assert adjoint_error(op) < 1e-12
    w = rng.uniform(1, 2, 5)
    D = diagonal(w)
    np.testing.assert_array_equal(D.diagonal, w)
    np.testing.assert_array_equal((D @ D).diagonal, w * w)
    np.testing.assert_array_equal(D.gram().diagonal, w * w)
    assert symmetry_error(D) == 0.0
    np.testing.assert_array_equal(zero_map(3, 2)(np.ones(2)), np.zeros(3))


def test_power_method_diagonal_and_2x2():
    assert power_method(diagonal([3.0, 1.0]), seed=7).eigenvalue == pytest.approx(3.0, rel=1e-8)
    res = power_method(LinearMap.from_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]), symmetric=True))
    assert res.eigenvalue == pytest.approx(3.0, rel=1e-8)
    assert abs(abs(res.eigenvector @ np.ones(2) / np.sqrt(2)) - 1.0) < 1e-8
    assert np.linalg.norm(res.eigenvector) == pytest.approx(1.0, abs=1e-12)
    assert res.residual <= 1e-8 * 3.0


def test_power_method_random_psd_and_sign(rng):
    M = random_psd(8, rng)
    top = np.linalg.eigvalsh(M)[-1]
    op = LinearMap.from_matrix(M, symmetric=True)
    assert power_method(op, max_iter=10_000).eigenvalue == pytest.approx(top, rel=1e-8)
    assert power_method(-op, max_iter=10_000).eigenvalue == pytest.approx(-top, rel=1e-8)


def test_power_method_deterministic_and_failure(rng):
    M = random_psd(30, rng)
    op = LinearMap.from_matrix(M, symmetric=True)
    a, b = power_method(op, seed=3, max_iter=5000), power_method(op, seed=3, max_iter=5000)
    assert a.eigenvalue == b.eigenvalue and a.iterations == b.iterations
    with pytest.raises(PowerMethodError) as info:
        power_method(op, tol=1e-15, max_iter=3)
    assert info.value.best is not None and info.value.best.iterations <= 3
    best = power_method(op, tol=1e-15, max_iter=3, strict=False)
    assert not best.converged


def test_power_method_projection_retries():
    with pytest.raises(PowerMethodError):
        power_method(identity(3), project=lambda v: np.zeros_like(v))


def test_lambda_min_shifted_examples(rng):
    assert lambda_min_shifted(diagonal([3.0, 1.0])) == pytest.approx(1.0, abs=1e-8)
    assert lambda_min_shifted(diagonal([5.0, 0.0])) == pytest.approx(0.0, abs=1e-7)
    M = random_psd(16, rng) + 0.5 * np.eye(16)
    lam = np.linalg.eigvalsh(M)[0]
    est = lambda_min_shifted(LinearMap.from_matrix(M, symmetric=True), max_iter=100_000)
    assert est == pytest.approx(lam, rel=1e-6)


def test_lambda_min_shifted_rejects_indefinite():
    with pytest.raises(SpectrumError):
        lambda_min_shifted(diagonal([2.0, -1.0]))


def test_cg_examples(rng):
    np.testing.assert_allclose(cg_solve(identity(2), np.array([1.0, 2.0])), [1, 2])
    np.testing.assert_allclose(cg_solve(diagonal([2.0, 4.0]), np.array([2.0, 4.0])), [1, 1], rtol=1e-12)
    M = random_psd(32, rng) + np.eye(32)
    b = rng.standard_normal(32)
    x = cg_solve(LinearMap.from_matrix(M, symmetric=True), b)
    np.testing.assert_allclose(x, np.linalg.solve(M, b), atol=1e-8)


def test_cg_singular_consistent_gives_min_norm(rng):
    M = random_psd(12, rng, rank=7)
    b = M @ rng.standard_normal(12)
    x = cg_solve(LinearMap.from_matrix(M, symmetric=True), b, tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.pinv(M, rcond=1e-10) @ b, atol=1e-7)


def test_cg_failure_carries_history(rng):
    M = random_psd(40, rng) + 1e-3 * np.eye(40)
    with pytest.raises(CGError) as info:
        cg_solve(LinearMap.from_matrix(M, symmetric=True), rng.standard_normal(40), max_iter=3)
    assert len(info.value.residuals) == 4
    assert info.value.x.shape == (40,)


def test_pinv_apply_examples(rng):
    np.testing.assert_allclose(pinv_apply(diagonal([0.5, 0.0]), np.array([1.0, 0.0])), [2.0, 0.0])
    x = rng.standard_normal(5)
    np.testing.assert_allclose(pinv_apply(identity(5), x), x)
    np.testing.assert_array_equal(pinv_apply(identity(5), np.zeros(5)), np.zeros(5))
    with pytest.raises(RangeError) as info:
        pinv_apply(diagonal([1.0, 0.0]), np.array([0.0, 1.0]))
    assert info.value.residual == pytest.approx(1.0)


def test_pinv_apply_random_psd(rng):
    M = random_psd(8, rng, rank=5)
    W = LinearMap.from_matrix(M, symmetric=True)
    x = M @ rng.standard_normal(8)
    w, V = np.linalg.eigh(M)
    keep = w > 1e-10 * w.max()
    oracle = (V[:, keep] / w[keep]) @ (V[:, keep].T @ x)
    np.testing.assert_allclose(pinv_apply(W, x, tol=1e-12), oracle, atol=1e-7 * np.abs(oracle).max())
    # W (W^+ (W x)) = W x
    y = rng.standard_normal(8)
    np.testing.assert_allclose(W(pinv_apply(W, W(y), tol=1e-12)), W(y), atol=1e-9)


def test_materialize_dense():
    np.testing.assert_array_equal(materialize_dense(identity(3)), np.eye(3))
    np.testing.assert_array_equal(materialize_dense(make_inpainting((1, 3), [0, 2])), [[1, 0, 0], [0, 0, 1]])
    with pytest.raises(BudgetError) as info:
        materialize_dense(identity(10), budget=50)
    assert info.value.required == 100


def test_budget_env(monkeypatch):
    monkeypatch.setenv("PNP_ORACLE_BUDGET", "10")
    with pytest.raises(BudgetError):
        materialize_dense(identity(4))
