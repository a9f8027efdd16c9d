import numpy as np
import pytest

from semdg.errors import InvalidInputError
from semdg.linalg import as_matrix, as_vector, log_sum_exp, softmax, spectral_norm, thin_svd


def test_as_matrix_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        as_matrix(np.zeros(3))
    with pytest.raises(InvalidInputError):
        as_matrix(np.zeros((0, 2)))
    with pytest.raises(InvalidInputError):
        as_matrix(np.array([[np.nan, 1.0]]))
    with pytest.raises(InvalidInputError):
        as_vector(np.array([np.inf]))


def test_thin_svd_identity_is_exact():
    u, sigma, v = thin_svd(np.eye(4))
    assert np.allclose(u, np.eye(4))
    assert np.allclose(sigma, np.ones(4))
    assert np.allclose(v, np.eye(4))


def test_thin_svd_reconstructs_and_is_orthonormal():
    rng = np.random.default_rng(7)
    for rows, cols in [(5, 3), (3, 5), (6, 6), (1, 4)]:
        a = rng.normal(size=(rows, cols))
        u, sigma, v = thin_svd(a)
        k = min(rows, cols)
        assert u.shape == (rows, k) and v.shape == (cols, k)
        assert np.allclose(u @ np.diag(sigma) @ v.T, a, atol=1e-10)
        assert np.allclose(u.T @ u, np.eye(k), atol=1e-10)
        assert np.allclose(v.T @ v, np.eye(k), atol=1e-10)
        assert np.all(np.diff(sigma) <= 1e-12)
        assert np.all(sigma >= 0)


def test_thin_svd_sign_convention_is_deterministic():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(5, 4))
    u1, s1, v1 = thin_svd(a)
    u2, s2, v2 = thin_svd(a.copy())
    assert np.array_equal(u1, u2) and np.array_equal(v1, v2)
    # dominant entry of each left singular vector is non-negative
    dom = np.abs(u1).argmax(axis=0)
    assert np.all(u1[dom, np.arange(u1.shape[1])] >= 0)


def test_spectral_norm_known_cases():
    assert spectral_norm(np.eye(3)) == pytest.approx(1.0)
    assert spectral_norm(np.diag([3.0, -7.0, 2.0])) == pytest.approx(7.0)
    rng = np.random.default_rng(2)
    a = rng.normal(size=(6, 4))
    # oracle: largest eigenvalue of the Gram matrix
    lam = np.linalg.eigvalsh(a.T @ a).max()
    assert spectral_norm(a) == pytest.approx(np.sqrt(lam), rel=1e-12)


def test_log_sum_exp_matches_direct_and_is_shift_stable():
    v = np.array([0.1, -2.0, 3.5])
    assert log_sum_exp(v) == pytest.approx(np.log(np.exp(v).sum()), rel=1e-14)
    big = v + 1000.0
    assert log_sum_exp(big) == pytest.approx(log_sum_exp(v) + 1000.0, rel=1e-12)
    with pytest.raises(InvalidInputError):
        log_sum_exp(np.array([]))


def test_softmax_properties():
    v = np.array([1.0, 2.0, 3.0])
    p = softmax(v)
    assert p.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(p > 0)
    assert np.allclose(softmax(v + 500.0), p, atol=1e-14)
    assert np.allclose(softmax(np.zeros(4)), 0.25)
    with pytest.raises(InvalidInputError):
        softmax(np.array([]))
