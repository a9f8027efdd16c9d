"""All training losses with exact analytic gradients.

Every gradient here is certified against central finite differences by the
verify module, so implementations favour explicit chain-rule code over
cleverness. Hinge kinks use subgradient 0 exactly at the kink, and pairwise
distances are floored at 1e-12 before the square root, keeping every
function deterministic and finite everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .augment import _check_sigma, augmented_logits, quadratic_terms
from .errors import InvalidInputError
from .linalg import as_matrix, as_vector, log_sum_exp, softmax
from .stats import CovarianceBank

DIST_FLOOR = 1e-12  # squared-distance floor before sqrt differentiation


@dataclass
class LossValue:
    """Loss plus gradients with respect to features and one affine head."""

    value: float
    grad_features: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


@dataclass
class ParamLoss:
    """Loss plus gradients over the full parameter set."""

    value: float
    grads: model.ModelParams


@dataclass
class LiftedLoss:
    """Lifted-structure loss on a row-feature matrix, with its gradient.

    pair_count is the number of positive pairs actually scored; zero means
    the batch had no usable pair and value/grad are identically zero.
    """

    value: float
    grad: np.ndarray
    pair_count: int

    @property
    def degenerate(self) -> bool:
        return self.pair_count == 0


def ce_loss(logits, y: int) -> tuple[float, np.ndarray]:
    """Cross entropy -log softmax(logits)[y] and its gradient (p - onehot)."""
    logits = as_vector(logits, "logits")
    if not 0 <= y < logits.shape[0]:
        raise InvalidInputError(f"label {y} out of range [0, {logits.shape[0]})")
    value = log_sum_exp(logits) - float(logits[y])
    grad = softmax(logits)
    grad[y] -= 1.0
    return value, grad


def _augmented_head_vjp(f, weights, sigma, y, lam, upstream):
    """Pull an upstream gradient on augmented logits back to (f, W, b).

    The quadratic augmentation term couples every off-anchor row of W to the
    anchor row, which is where the extra terms below come from.
    """
    grad_f = weights.T @ upstream
    grad_b = upstream.copy()
    grad_w = np.outer(upstream, f)
    if lam != 0.0:
        diffs = weights - weights[y]
        sig_diffs = diffs @ sigma  # row k is (sigma @ (w_k - w_y))'
        contrib = lam * upstream[:, None] * sig_diffs
        grad_w += contrib
        grad_w[y] -= contrib.sum(axis=0)
    return grad_f, grad_w, grad_b


def isda_ce_loss(f, weights, bias, y: int, sigma_y, lam: float) -> LossValue:
    """Cross entropy on implicitly augmented logits, with full gradients.

    Upper-bounds the expected CE under infinite Gaussian feature
    augmentation; at lam = 0 it reduces exactly to plain CE, gradients
    included. Gradients track the augmentation term's dependence on W.
    """
    aug = augmented_logits(f, weights, bias, sigma_y, y, lam)
    value, g_logits = ce_loss(aug.values, y)
    f = as_vector(f, "f")
    weights = as_matrix(weights, "weights")
    sigma = _check_sigma(sigma_y, weights.shape[1])
    grad_f, grad_w, grad_b = _augmented_head_vjp(f, weights, sigma, y, lam, g_logits)
    return LossValue(value, grad_f, grad_w, grad_b)


def isda_ce_batch(features, weights, bias, labels, bank: CovarianceBank | None = None,
                  lam: float = 0.0) -> LossValue:
    """Mean cross entropy over a batch, optionally on augmented logits.

    With lam = 0 (or no bank) this is plain batch CE. Gradients are means,
    matching the per-sample isda_ce_loss contract row by row.
    """
    f = as_matrix(features, "features")
    weights = as_matrix(weights, "weights")
    bias = as_vector(bias, "bias")
    labels = np.asarray(labels)
    n, d = f.shape
    num_classes = weights.shape[0]
    if weights.shape[1] != d or bias.shape[0] != num_classes or labels.shape != (n,):
        raise InvalidInputError("features / weights / bias / labels shapes disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidInputError("labels out of range")
    if lam < 0:
        raise InvalidInputError("lam must be non-negative")
    augmenting = lam != 0.0 and bank is not None
    present = sorted(set(int(c) for c in labels))
    sigmas = {}
    shift = np.zeros((num_classes, num_classes))
    if augmenting:
        if present and present[-1] >= bank.num_classes:
            raise InvalidInputError("covariance bank does not cover all labels present")
        for c in present:
            sigmas[c] = _check_sigma(bank.lookup(c), d)
            shift[c] = 0.5 * lam * quadratic_terms(weights, sigmas[c], c)
    logits = f @ weights.T + bias + shift[labels]

    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1)
    idx = np.arange(n)
    value = float(np.mean(np.log(denom) - shifted[idx, labels]))
    g = expd / denom[:, None]
    g[idx, labels] -= 1.0
    g /= n

    grad_features = g @ weights
    grad_weights = g.T @ f
    grad_bias = g.sum(axis=0)
    if augmenting:
        for c in present:
            upstream = g[labels == c].sum(axis=0)
            sig_diffs = (weights - weights[c]) @ sigmas[c]
            contrib = lam * upstream[:, None] * sig_diffs
            grad_weights += contrib
            grad_weights[c] -= contrib.sum(axis=0)
    return LossValue(value, grad_features, grad_weights, grad_bias)


def triplet_loss(f_i, f_j, f_k, delta: float):
    """Hinged squared-distance triplet loss and subgradients.

    Zero value and zero gradients whenever the margin constraint holds
    (boundary included: subgradient 0 at the kink).
    """
    f_i = as_vector(f_i, "f_i")
    f_j = as_vector(f_j, "f_j")
    f_k = as_vector(f_k, "f_k")
    if f_i.shape != f_j.shape or f_i.shape != f_k.shape:
        raise InvalidInputError("triplet members must share one shape")
    pos = f_i - f_j
    neg = f_i - f_k
    raw = float(pos @ pos - neg @ neg) + delta
    zeros = np.zeros_like(f_i)
    if raw <= 0.0:
        return 0.0, (zeros, zeros.copy(), zeros.copy())
    return raw, (2.0 * (pos - neg), -2.0 * pos, 2.0 * neg)


def positive_pairs(labels: np.ndarray) -> list:
    """All unordered same-label index pairs (i < j)."""
    labels = np.asarray(labels)
    return [
        (i, j)
        for i in range(labels.shape[0])
        for j in range(i + 1, labels.shape[0])
        if labels[i] == labels[j]
    ]


def lifted_loss(rows, labels, margin: float) -> LiftedLoss:
    """Lifted-structure loss over a batch of row features (logits or raw).

    Per positive pair: unsquared pair distance plus each member's
    log-sum-exp over its negatives at the margin, hinged then squared,
    averaged as sum / (2 * pair count). Pairs whose member lacks any
    in-batch negative are skipped and the pair count adjusted.
    """
    s = as_matrix(rows, "rows")
    labels = np.asarray(labels)
    n = s.shape[0]
    if labels.shape != (n,):
        raise InvalidInputError(f"labels shape {labels.shape} != ({n},)")
    if n < 2:
        raise InvalidInputError("need at least two rows")

    diff = s[:, None, :] - s[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    floored = sq < DIST_FLOOR
    dist = np.sqrt(np.maximum(sq, DIST_FLOOR))

    neg_mask = labels[:, None] != labels[None, :]
    has_neg = neg_mask.any(axis=1)
    with np.errstate(divide="ignore"):
        scores = np.where(neg_mask, margin - dist, -np.inf)
    score_max = scores.max(axis=1)
    # rows without negatives produce -inf here; they are filtered out below
    safe_max = np.where(np.isfinite(score_max), score_max, 0.0)
    expd = np.where(neg_mask, np.exp(scores - safe_max[:, None]), 0.0)
    lse = safe_max + np.log(np.maximum(expd.sum(axis=1), 1e-300))
    neg_weights = expd / np.maximum(expd.sum(axis=1, keepdims=True), 1e-300)

    pairs = [(i, j) for (i, j) in positive_pairs(labels) if has_neg[i] and has_neg[j]]
    if not pairs:
        return LiftedLoss(0.0, np.zeros_like(s), 0)

    total = 0.0
    coeff = np.zeros((n, n))
    for i, j in pairs:
        hinge_arg = dist[i, j] + lse[i] + lse[j]
        if hinge_arg <= 0.0:
            continue
        total += hinge_arg * hinge_arg
        c = hinge_arg / len(pairs)  # d(J^2 / (2|P|)) / dJ
        coeff[i, j] += c
        coeff[i] -= c * neg_weights[i]
        coeff[j] -= c * neg_weights[j]
    value = total / (2.0 * len(pairs))

    sym = coeff + coeff.T
    with np.errstate(invalid="ignore"):
        ratio = np.where(floored, 0.0, sym / dist)
    np.fill_diagonal(ratio, 0.0)
    grad = ratio.sum(axis=1)[:, None] * s - ratio @ s
    return LiftedLoss(value, grad, len(pairs))


def dml_on_augmented_logits(features, weights, bias, labels, bank: CovarianceBank,
                            lam: float, margin: float) -> LossValue:
    """Lifted-structure loss on implicitly augmented metric-head logits.

    Builds each row's augmented logit vector using that row's class
    covariance from the bank, then differentiates through both the affine
    and the augmentation part into features, weights and bias.
    """
    f = as_matrix(features, "features")
    weights = as_matrix(weights, "weights")
    bias = as_vector(bias, "bias")
    labels = np.asarray(labels)
    n, d = f.shape
    num_classes = weights.shape[0]
    if weights.shape[1] != d or bias.shape[0] != num_classes or labels.shape != (n,):
        raise InvalidInputError("features / weights / bias / labels shapes disagree")
    if lam < 0:
        raise InvalidInputError("lam must be non-negative")
    present = sorted(set(int(c) for c in labels))
    if present and (present[0] < 0 or present[-1] >= bank.num_classes):
        raise InvalidInputError("covariance bank does not cover all labels present")

    # The augmentation shift depends only on the class, not the sample.
    shift = np.zeros((bank.num_classes, num_classes))
    sigmas = {}
    if lam != 0.0:
        for c in present:
            sigmas[c] = _check_sigma(bank.lookup(c), d)
            shift[c] = 0.5 * lam * quadratic_terms(weights, sigmas[c], c)
    logits = f @ weights.T + bias + shift[labels]

    lifted = lifted_loss(logits, labels, margin)
    g = lifted.grad
    grad_features = g @ weights
    grad_weights = g.T @ f
    grad_bias = g.sum(axis=0)
    if lam != 0.0:
        for c in present:
            upstream = g[labels == c].sum(axis=0)
            sig_diffs = (weights - weights[c]) @ sigmas[c]
            contrib = lam * upstream[:, None] * sig_diffs
            grad_weights += contrib
            grad_weights[c] -= contrib.sum(axis=0)
    return LossValue(lifted.value, grad_features, grad_weights, grad_bias)


def dml_param_loss(params, trace, labels, bank: CovarianceBank | None, lam: float,
                   margin: float, dml_input: str = "logits") -> ParamLoss:
    """Metric loss lifted to full parameter space through the network.

    dml_input selects the metric space: "logits" runs the lifted loss on
    (augmented) metric-head logits; "features" runs it on the raw shared
    features, bypassing the metric head and the augmentation entirely.
    """
    if dml_input == "logits":
        if bank is None:
            raise InvalidInputError("logits mode needs a covariance bank")
        head = dml_on_augmented_logits(trace.features, params.dml_w, params.dml_b,
                                       labels, bank, lam, margin)
        grads = model.backward(params, trace, grad_features=head.grad_features)
        grads.dml_w += head.grad_weights
        grads.dml_b += head.grad_bias
        return ParamLoss(head.value, grads)
    if dml_input == "features":
        lifted = lifted_loss(trace.features, labels, margin)
        grads = model.backward(params, trace, grad_features=lifted.grad)
        return ParamLoss(lifted.value, grads)
    raise InvalidInputError(f"unknown dml_input mode {dml_input!r}")


def total_objective(fact_parts, dml: ParamLoss, alpha: float) -> ParamLoss:
    """Composite objective: FACT total plus alpha times the metric loss.

    Both arguments carry full parameter gradients; the combination is
    value- and gradient-linear.
    """
    if alpha < 0:
        raise InvalidInputError("alpha must be non-negative")
    value = fact_parts.total + alpha * dml.value
    grads = model.add_scaled(fact_parts.grads, dml.grads, alpha)
    return ParamLoss(value, grads)
