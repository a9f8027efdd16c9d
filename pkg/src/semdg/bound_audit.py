"""Empirical audit of the feature/logit distance sandwich.

For features f collected as columns of F with thin SVD F = U S V', and a
linear head s = W f (bias dropped, it cancels in differences anyway), every
pair drawn from the columns of F satisfies

    ||f_i - f_j||^2 = ||s_i - s_j||^2 + d' (U U' - W' W) d,   d = f_i - f_j,

because U U' acts as identity on the column space. Bounding the quadratic
form by its spectral norm and ||d|| <= 2c gives the sandwich audited here.
The audit is expected to pass always; a violation indicates a bug, not an
unlucky input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .linalg import as_matrix, as_vector, spectral_norm, thin_svd

RANK_CUTOFF = 1e-12  # relative singular-value threshold
BOUND_TOL = 1e-9


@dataclass(frozen=True)
class BoundReport:
    """One pair's sandwich check."""

    pair: tuple[int, int]
    feat_dist_sq: float
    logit_dist_sq: float
    residual: float
    c: float
    lower: float
    upper: float
    satisfied: bool


@dataclass(frozen=True)
class AuditSummary:
    """Aggregate over all pairs of a feature matrix."""

    fraction_satisfied: float
    mean_slack: float
    residual: float


def residual(f_cols, weights) -> float:
    """Spectral norm of U U' - W' W for the feature column space.

    Singular directions below 1e-12 of the largest singular value are
    dropped, so numerically rank-deficient feature sets do not inflate the
    projector.
    """
    f_cols = as_matrix(f_cols, "f_cols")
    weights = as_matrix(weights, "weights")
    d = f_cols.shape[0]
    if weights.shape[1] != d:
        raise InvalidInputError(
            f"weights have {weights.shape[1]} columns, features have dim {d}")
    u, sigma, _ = thin_svd(f_cols)
    if sigma.size and sigma[0] > 0.0:
        u = u[:, sigma > RANK_CUTOFF * sigma[0]]
    else:
        u = u[:, :0]
    return spectral_norm(u @ u.T - weights.T @ weights)


def audit_pair(f_i, f_j, weights, residual_value: float, c: float) -> BoundReport:
    """Check one pair against the sandwich at a given residual and norm cap.

    Both feature norms must not exceed c; the bound is derived under that
    cap and is meaningless otherwise.
    """
    f_i = as_vector(f_i, "f_i")
    f_j = as_vector(f_j, "f_j")
    weights = as_matrix(weights, "weights")
    if f_i.shape != f_j.shape or weights.shape[1] != f_i.shape[0]:
        raise InvalidInputError("feature / weights shapes disagree")
    cap = c * (1.0 + 1e-12) + 1e-12
    for name, f in (("f_i", f_i), ("f_j", f_j)):
        norm = float(np.linalg.norm(f))
        if norm > cap:
            raise InvalidInputError(f"{name} norm {norm} exceeds cap {c}")
    delta = f_i - f_j
    feat_dist_sq = float(delta @ delta)
    s = weights @ delta
    logit_dist_sq = float(s @ s)
    width = 4.0 * c * c * residual_value
    lower = logit_dist_sq - width
    upper = logit_dist_sq + width
    satisfied = (lower - BOUND_TOL) <= feat_dist_sq <= (upper + BOUND_TOL)
    return BoundReport((0, 1), feat_dist_sq, logit_dist_sq, residual_value,
                       c, lower, upper, satisfied)


def _pair_tables(features, weights):
    """Vectorized squared pair distances in feature and logit space."""
    f = as_matrix(features, "features")
    weights = as_matrix(weights, "weights")
    n = f.shape[0]
    if n < 2:
        raise InvalidInputError("need at least two feature rows")
    if weights.shape[1] != f.shape[1]:
        raise InvalidInputError("weights / features dimension mismatch")
    diff = f[:, None, :] - f[None, :, :]
    feat_sq = np.einsum("ijk,ijk->ij", diff, diff)
    s = f @ weights.T
    sdiff = s[:, None, :] - s[None, :, :]
    logit_sq = np.einsum("ijk,ijk->ij", sdiff, sdiff)
    c = float(np.sqrt((f * f).sum(axis=1).max()))
    return f, weights, feat_sq, logit_sq, c


def audit_dataset(features, weights) -> AuditSummary:
    """Audit every unordered pair of rows; c is the max row norm.

    fraction_satisfied below 1.0 means the implementation (not the data) is
    wrong. mean_slack is the mean bound width upper - lower.
    """
    f, weights, feat_sq, logit_sq, c = _pair_tables(features, weights)
    res = residual(f.T, weights)
    width = 4.0 * c * c * res
    iu = np.triu_indices(f.shape[0], k=1)
    feat_v = feat_sq[iu]
    logit_v = logit_sq[iu]
    ok = ((logit_v - width - BOUND_TOL) <= feat_v) & (feat_v <= (logit_v + width + BOUND_TOL))
    return AuditSummary(float(ok.mean()), float(2.0 * width), res)


def audit_rows(features, weights):
    """Per-pair BoundReports for CSV emission, in (i, j) lexicographic order."""
    f, weights, feat_sq, logit_sq, c = _pair_tables(features, weights)
    res = residual(f.T, weights)
    width = 4.0 * c * c * res
    reports = []
    n = f.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            lower = logit_sq[i, j] - width
            upper = logit_sq[i, j] + width
            ok = (lower - BOUND_TOL) <= feat_sq[i, j] <= (upper + BOUND_TOL)
            reports.append(BoundReport((i, j), float(feat_sq[i, j]),
                                       float(logit_sq[i, j]), res, c,
                                       float(lower), float(upper), bool(ok)))
    return reports
