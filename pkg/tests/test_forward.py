import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv_matrix, decimation_matrix
from pnpconvex.errors import ValidationError
from pnpconvex.forward import (InverseProblem, Metric, gaussian_kernel, loss_grad, loss_value, make_blur,
                               make_inpainting, make_superres, random_mask, uniform_kernel)
from pnpconvex.linops import adjoint_error, identity, materialize_dense


def test_inpainting_examples():
    A = make_inpainting((1, 3), [2, 0])
    np.testing.assert_array_equal(A(np.array([5.0, 7.0, 9.0])), [5, 9])
    np.testing.assert_array_equal(A.apply_adjoint(np.ones(2)), [1, 0, 1])
    np.testing.assert_array_equal(A(A.apply_adjoint(np.array([3.0, 4.0]))), [3, 4])
    for bad in ([], [0, 0], [3], [-1]):
        with pytest.raises(ValidationError):
            make_inpainting((1, 3), bad)


def test_random_mask_count_and_seed():
    idx = random_mask((32, 32), 0.3, seed=0)
    A = make_inpainting((32, 32), idx)
    Ae = A(np.ones(1024))
    assert Ae.size == 307 and np.all(Ae == 1.0)
    np.testing.assert_array_equal(idx, random_mask((32, 32), 0.3, seed=0))
    assert not np.array_equal(idx, random_mask((32, 32), 0.3, seed=1))
    with pytest.raises(ValidationError):
        random_mask((4, 4), 0.0)


def test_blur_identity_and_constants():
    x = np.random.default_rng(0).standard_normal(20)
    np.testing.assert_allclose(make_blur((4, 5), [[1.0]])(x), x, atol=1e-14)
    A = make_blur((16, 16), uniform_kernel(7))
    np.testing.assert_allclose(A(np.full(256, 0.3)), np.full(256, 0.3), atol=1e-14)
    np.testing.assert_allclose(A.apply_adjoint(np.ones(256)), np.ones(256), atol=1e-14)


def test_blur_matches_circulant_oracle():
    A = make_blur((8, 8), uniform_kernel(3))
    np.testing.assert_allclose(materialize_dense(A), conv_matrix((8, 8), uniform_kernel(3)), atol=1e-14)
    k = np.random.default_rng(3).uniform(0, 1, (3, 5))
    A = make_blur((6, 7), k)
    assert not A.symmetric
    np.testing.assert_allclose(materialize_dense(A), conv_matrix((6, 7), k), atol=1e-14)


def test_blur_rejects_bad_kernels():
    for k in (np.ones((2, 2)), np.zeros((3, 3)), -np.ones((3, 3)), np.ones(3), np.ones((9, 9))):
        with pytest.raises(ValidationError):
            make_blur((8, 8), k)


def test_superres_examples():
    k = uniform_kernel(3)
    x = np.random.default_rng(1).standard_normal(64)
    np.testing.assert_allclose(make_superres((8, 8), k, 1)(x), make_blur((8, 8), k)(x))
    np.testing.assert_allclose(make_superres((4, 4), k, 2)(np.full(16, 0.7)), np.full(4, 0.7), atol=1e-14)
    dense = decimation_matrix((8, 8), 2) @ conv_matrix((8, 8), k)
    np.testing.assert_allclose(materialize_dense(make_superres((8, 8), k, 2)), dense, atol=1e-14)
    with pytest.raises(ValidationError):
        make_superres((8, 8), k, 3)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 12), w=st.integers(3, 12), ks=st.sampled_from([1, 3]), seed=st.integers(0, 1000))
def test_adjoints(h, w, ks, seed):
    k = np.random.default_rng(seed).uniform(0.1, 1, (ks, ks))
    assert adjoint_error(make_blur((h, w), k), seed=seed) < 1e-10
    idx = random_mask((h, w), 0.5, seed)
    assert adjoint_error(make_inpainting((h, w), idx), seed=seed) < 1e-10
    if h % 2 == 0 and w % 2 == 0:
        assert adjoint_error(make_superres((h, w), k, 2), seed=seed) < 1e-10


def test_Ae_nonzero_for_all_models():
    e = np.ones(64)
    for A in (make_inpainting((8, 8), [5]), make_blur((8, 8), gaussian_kernel(5, 1.0)),
              make_superres((8, 8), uniform_kernel(3), 4)):
        assert np.linalg.norm(A(e)) > 0


def test_loss_examples():
    p = InverseProblem(identity(2), np.zeros(2), (1, 2))
    x = np.array([3.0, 4.0])
    assert loss_value(p, x) == 12.5
    np.testing.assert_array_equal(loss_grad(p, x), x)
    np.testing.assert_array_equal(loss_grad(p, x, Metric.diag(np.full(2, 2.0))), x / 2)
    assert loss_value(InverseProblem(identity(2), x, (1, 2)), x) == 0.0


def test_loss_matches_dense(rng):
    shape = (16, 16)
    k = gaussian_kernel(5, 1.2)
    A = make_superres(shape, k, 2)
    b = rng.standard_normal(A.dim_out)
    p = InverseProblem(A, b, shape)
    M = decimation_matrix(shape, 2) @ conv_matrix(shape, k)
    x = rng.standard_normal(256)
    assert loss_value(p, x) == pytest.approx(0.5 * np.sum((M @ x - b) ** 2), rel=1e-12)


def test_gradient_finite_differences(rng):
    shape = (8, 8)
    models = [make_inpainting(shape, random_mask(shape, 0.4, 2)), make_blur(shape, uniform_kernel(3)),
              make_superres(shape, uniform_kernel(3), 2)]
    for A in models:
        p = InverseProblem(A, rng.standard_normal(A.dim_out), shape)
        for _ in range(20):
            x, v = rng.standard_normal(64), rng.standard_normal(64)
            eps = 1e-6
            fd = (loss_value(p, x + eps * v) - loss_value(p, x - eps * v)) / (2 * eps)
            g = loss_grad(p, x) @ v
            assert abs(fd - g) <= 1e-5 * max(abs(g), 1.0)


def test_metric_gradient_is_riesz_representer(rng):
    shape = (6, 6)
    p = InverseProblem(make_blur(shape, uniform_kernel(3)), rng.standard_normal(36), shape)
    D = Metric.diag(rng.uniform(0.5, 3.0, 36))
    x, v = rng.standard_normal(36), rng.standard_normal(36)
    assert D.inner(loss_grad(p, x, D), v) == pytest.approx(loss_grad(p, x) @ v, rel=1e-12)


def test_problem_validation():
    with pytest.raises(ValidationError):
        InverseProblem(identity(4), np.zeros(3), (2, 2))
    with pytest.raises(ValidationError):
        InverseProblem(identity(4), np.array([0, np.nan, 0, 0]), (2, 2))
    with pytest.raises(ValidationError):
        InverseProblem(identity(4), np.zeros(4), (2, 3))
    with pytest.raises(ValidationError):
        Metric.diag(np.array([1.0, 0.0]))
