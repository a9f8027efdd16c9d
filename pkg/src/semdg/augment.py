"""Semantic augmentation in feature space.

Two routes to the same distribution: the closed-form augmented logits
(implicit route, used in training) and explicit Gaussian feature sampling
(Monte-Carlo route, kept as an oracle to certify the closed form). All
functions are pure; RNG state enters only through explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalError
from .linalg import as_matrix, as_vector
from .stats import default_ridge


@dataclass(frozen=True)
class AugmentedLogits:
    """Class-similarity vector with implicit augmentation applied.

    The anchor class keeps its plain logit exactly; every other entry gains
    a non-negative term proportional to the augmentation strength.
    """

    values: np.ndarray
    anchor_class: int
    lam: float


def plain_logits(f, weights, bias) -> np.ndarray:
    """Affine class scores: weights @ f + bias."""
    f = as_vector(f, "f")
    weights = as_matrix(weights, "weights")
    bias = as_vector(bias, "bias")
    if weights.shape[1] != f.shape[0] or weights.shape[0] != bias.shape[0]:
        raise InvalidInputError(
            f"shape mismatch: f {f.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    return weights @ f + bias


def _check_sigma(sigma: np.ndarray, dim: int) -> np.ndarray:
    sigma = as_matrix(sigma, "sigma")
    if sigma.shape != (dim, dim):
        raise InvalidInputError(f"sigma has shape {sigma.shape}, expected ({dim}, {dim})")
    scale = max(1.0, float(np.abs(sigma).max()))
    if np.abs(sigma - sigma.T).max() > 1e-9 * scale:
        raise InvalidInputError("sigma must be symmetric")
    return sigma


def quadratic_terms(weights: np.ndarray, sigma: np.ndarray, anchor: int) -> np.ndarray:
    """Per-class quadratic forms (w_j - w_anchor)' sigma (w_j - w_anchor).

    Entry `anchor` is exactly zero. Non-negative whenever sigma is PSD.
    """
    diffs = weights - weights[anchor]
    q = np.einsum("jd,de,je->j", diffs, sigma, diffs)
    q[anchor] = 0.0
    return q


def augmented_logits(f, weights, bias, sigma_y, y: int, lam: float) -> AugmentedLogits:
    """Closed-form logits under infinite Gaussian feature augmentation.

    Off-anchor entries are shifted by lam/2 times the quadratic form of the
    proxy difference under the class covariance; the anchor entry is the
    plain logit, untouched.
    """
    if lam < 0:
        raise InvalidInputError("lam must be non-negative")
    base = plain_logits(f, weights, bias)
    weights = as_matrix(weights, "weights")
    if not 0 <= y < weights.shape[0]:
        raise InvalidInputError(f"anchor class {y} out of range [0, {weights.shape[0]})")
    sigma = _check_sigma(sigma_y, weights.shape[1])
    values = base + 0.5 * lam * quadratic_terms(weights, sigma, y)
    return AugmentedLogits(values=values, anchor_class=y, lam=lam)


def sample_features(f, sigma_y, lam: float, m: int, seed) -> np.ndarray:
    """Draw m i.i.d. samples from N(f, lam * sigma), rows of the result.

    The covariance factor comes from the Cholesky of the ridged sigma and is
    scaled by sqrt(lam), so lam = 0 returns exact copies of f. Deterministic
    for a fixed seed.
    """
    f = as_vector(f, "f")
    if m < 1:
        raise InvalidInputError("m must be at least 1")
    if lam < 0:
        raise InvalidInputError("lam must be non-negative")
    sigma = _check_sigma(sigma_y, f.shape[0])
    if lam == 0.0 or not sigma.any():
        return np.tile(f, (m, 1))
    ridged = sigma + default_ridge(sigma) * np.eye(f.shape[0])
    try:
        chol = np.linalg.cholesky(ridged)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky of ridged covariance failed: {exc}") from exc
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((m, f.shape[0]))
    return f + np.sqrt(lam) * (z @ chol.T)


def mc_ce_samples(f, weights, bias, sigma_y, y: int, lam: float, m: int, seed) -> np.ndarray:
    """Per-sample cross-entropy losses over m explicitly augmented features."""
    weights = as_matrix(weights, "weights")
    bias = as_vector(bias, "bias")
    if not 0 <= y < weights.shape[0]:
        raise InvalidInputError(f"label {y} out of range [0, {weights.shape[0]})")
    samples = sample_features(f, sigma_y, lam, m, seed)
    logits = samples @ weights.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    return lse - logits[:, y]


def mc_ce_estimate(f, weights, bias, sigma_y, y: int, lam: float, m: int, seed) -> float:
    """Monte-Carlo estimate of the expected CE loss under augmentation.

    Converges to the infinite-augmentation loss as m grows; the closed-form
    bound in losses.isda_ce_loss upper-bounds this limit.
    """
    return float(mc_ce_samples(f, weights, bias, sigma_y, y, lam, m, seed).mean())
