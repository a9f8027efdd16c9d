import numpy as np
import pytest

from semdg.bound_audit import audit_dataset, audit_pair, audit_rows, residual
from semdg.errors import InvalidInputError
from semdg.linalg import thin_svd


def orthonormal_rows(rng, c, d):
    q, _ = np.linalg.qr(rng.normal(size=(d, c)))
    return q[:, :c].T


def test_residual_ideal_case_is_zero():
    # proxies orthonormal and spanning exactly the feature column space
    rng = np.random.default_rng(0)
    d, c, n = 6, 3, 10
    w = orthonormal_rows(rng, c, d)
    coeffs = rng.normal(size=(c, n))
    f_cols = w.T @ coeffs  # features live in span(w rows)
    assert residual(f_cols, w) < 1e-10


def test_residual_full_rank_zero_proxies():
    rng = np.random.default_rng(1)
    f_cols = rng.normal(size=(4, 12))  # full rank in R^4
    assert residual(f_cols, np.zeros((3, 4))) == pytest.approx(1.0, abs=1e-10)


def test_residual_matches_eigen_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = int(rng.integers(2, 7))
        n = int(rng.integers(1, 9))
        c = int(rng.integers(2, 6))
        f_cols = rng.normal(size=(d, n))
        w = rng.normal(size=(c, d))
        u, sigma, _ = thin_svd(f_cols)
        keep = sigma > 1e-12 * sigma[0] if sigma[0] > 0 else np.zeros_like(sigma, bool)
        r = u[:, keep] @ u[:, keep].T - w.T @ w
        oracle = np.abs(np.linalg.eigvalsh(0.5 * (r + r.T))).max()
        assert residual(f_cols, w) == pytest.approx(oracle, abs=1e-8)


def test_residual_invariant_to_column_permutation():
    rng = np.random.default_rng(3)
    f_cols = rng.normal(size=(5, 9))
    w = rng.normal(size=(4, 5))
    perm = rng.permutation(9)
    assert residual(f_cols, w) == pytest.approx(residual(f_cols[:, perm], w), abs=1e-10)


def test_audit_pair_coincident():
    rng = np.random.default_rng(4)
    f = rng.normal(size=4)
    w = rng.normal(size=(3, 4))
    rep = audit_pair(f, f, w, 0.5, float(np.linalg.norm(f)))
    assert rep.feat_dist_sq == 0.0 and rep.logit_dist_sq == 0.0
    assert rep.satisfied


def test_audit_pair_tight_in_ideal_case():
    rng = np.random.default_rng(5)
    d, c = 5, 3
    w = orthonormal_rows(rng, c, d)
    f_cols = w.T @ rng.normal(size=(c, 8))
    res = residual(f_cols, w)
    cap = float(np.linalg.norm(f_cols, axis=0).max())
    rep = audit_pair(f_cols[:, 0], f_cols[:, 1], w, res, cap)
    assert abs(rep.feat_dist_sq - rep.logit_dist_sq) < 1e-9
    assert rep.satisfied


def test_audit_pair_norm_cap_enforced():
    w = np.eye(2)
    with pytest.raises(InvalidInputError):
        audit_pair(np.array([3.0, 0.0]), np.zeros(2), w, 0.0, 1.0)


def test_sandwich_decomposition_identity():
    # feat^2 - logit^2 must equal the quadratic form of the projector
    # difference whenever the pair difference lies in the feature span
    rng = np.random.default_rng(6)
    for _ in range(30):
        d, n, c = 6, 9, 4
        f_cols = rng.normal(size=(d, n))
        w = rng.normal(size=(c, d)) * 0.7
        u, sigma, _ = thin_svd(f_cols)
        keep = sigma > 1e-12 * sigma[0]
        r = u[:, keep] @ u[:, keep].T - w.T @ w
        i, j = rng.choice(n, size=2, replace=False)
        delta = f_cols[:, i] - f_cols[:, j]
        feat_sq = float(delta @ delta)
        s = w @ delta
        assert feat_sq - float(s @ s) == pytest.approx(float(delta @ r @ delta), abs=1e-9)


def test_audit_dataset_identical_rows_width_formula():
    rng = np.random.default_rng(7)
    row = rng.normal(size=4)
    feats = np.stack([row, row])
    w = rng.normal(size=(3, 4))
    summary = audit_dataset(feats, w)
    res = residual(feats.T, w)
    c = float(np.linalg.norm(row))
    assert summary.fraction_satisfied == 1.0
    assert summary.mean_slack == pytest.approx(8.0 * c * c * res, rel=1e-12)


def test_audit_dataset_zero_proxies():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(6, 3))
    summary = audit_dataset(feats, np.zeros((4, 3)))
    assert summary.fraction_satisfied == 1.0
    assert summary.residual <= 1.0 + 1e-12


def test_audit_rows_matches_summary():
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(5, 3))
    w = rng.normal(size=(2, 3))
    rows = audit_rows(feats, w)
    assert len(rows) == 10
    assert all(r.satisfied for r in rows)
    assert {r.pair for r in rows} == {(i, j) for i in range(5) for j in range(i + 1, 5)}
