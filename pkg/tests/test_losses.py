import numpy as np
import pytest

from semdg import model
from semdg.augment import plain_logits
from semdg.errors import InvalidInputError
from semdg.losses import (LossValue, ParamLoss, ce_loss, dml_on_augmented_logits,
                          dml_param_loss, isda_ce_batch, isda_ce_loss,
                          lifted_loss, positive_pairs, total_objective,
                          triplet_loss)
from semdg.stats import CovarianceBank
from semdg.verify import central_diff, rel_error


def psd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T / d


def test_ce_uniform_and_confident():
    val, grad = ce_loss(np.zeros(2), 0)
    assert val == pytest.approx(np.log(2.0), rel=1e-12)
    val, _ = ce_loss(np.array([1e3, 0.0]), 0)
    assert val == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidInputError):
        ce_loss(np.zeros(3), 3)


def test_ce_grad_sums_to_zero_and_matches_fd():
    rng = np.random.default_rng(0)
    for _ in range(10):
        logits = rng.normal(size=5) * 2
        y = int(rng.integers(5))
        _, grad = ce_loss(logits, y)
        assert abs(grad.sum()) < 1e-12
        fd = central_diff(lambda v: ce_loss(v, y)[0], logits.copy())
        assert rel_error(grad, fd) < 1e-7


def test_isda_lam_zero_reduces_to_plain_ce():
    rng = np.random.default_rng(1)
    f = rng.normal(size=4)
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    res = isda_ce_loss(f, w, b, 2, psd(rng, 4), 0.0)
    val, g_logits = ce_loss(plain_logits(f, w, b), 2)
    assert res.value == pytest.approx(val, abs=1e-12)
    assert np.allclose(res.grad_features, w.T @ g_logits, atol=1e-12)
    assert np.allclose(res.grad_weights, np.outer(g_logits, f), atol=1e-12)
    assert np.allclose(res.grad_bias, g_logits, atol=1e-12)


def test_isda_hand_value():
    # augmented logits (1, 2) with anchor 0: loss = ln(1 + e)
    res = isda_ce_loss(np.array([1.0, 0.0]), np.eye(2), np.zeros(2), 0,
                       np.eye(2), 2.0)
    assert res.value == pytest.approx(np.log(1.0 + np.e), rel=1e-12)


def test_isda_gradients_match_fd():
    rng = np.random.default_rng(2)
    d, c = 4, 3
    f = rng.normal(size=d)
    w = rng.normal(size=(c, d))
    b = rng.normal(size=c)
    sigma = psd(rng, d)
    lam = 1.3
    res = isda_ce_loss(f, w, b, 1, sigma, lam)
    analytic = np.concatenate([res.grad_features, res.grad_weights.ravel(),
                               res.grad_bias])

    def fn(vec):
        return isda_ce_loss(vec[:d], vec[d:d + c * d].reshape(c, d),
                            vec[d + c * d:], 1, sigma, lam).value

    fd = central_diff(fn, np.concatenate([f, w.ravel(), b]))
    assert rel_error(analytic, fd) < 1e-6


def test_isda_ce_batch_matches_per_sample_mean():
    rng = np.random.default_rng(3)
    n, d, c = 6, 4, 3
    f = rng.normal(size=(n, d))
    w = rng.normal(size=(c, d))
    b = rng.normal(size=c)
    labels = rng.integers(0, c, n)
    bank = CovarianceBank([psd(rng, d) for _ in range(c)])
    lam = 0.8
    batch = isda_ce_batch(f, w, b, labels, bank, lam)
    singles = [isda_ce_loss(f[i], w, b, int(labels[i]), bank.lookup(int(labels[i])), lam)
               for i in range(n)]
    assert batch.value == pytest.approx(np.mean([s.value for s in singles]), rel=1e-12)
    assert np.allclose(batch.grad_features,
                       np.stack([s.grad_features for s in singles]) / n, atol=1e-12)
    assert np.allclose(batch.grad_weights,
                       sum(s.grad_weights for s in singles) / n, atol=1e-12)
    assert np.allclose(batch.grad_bias,
                       sum(s.grad_bias for s in singles) / n, atol=1e-12)


def test_triplet_boundary_and_collapsed():
    f = np.array([1.0, 2.0])
    g = np.array([1.0, 3.0])
    # positive coincident, negative exactly at the margin: boundary, zero
    delta = float((f - g) @ (f - g))
    val, grads = triplet_loss(f, f, g, delta)
    assert val == 0.0
    assert all(np.array_equal(x, np.zeros(2)) for x in grads)
    val, _ = triplet_loss(f, f, f, 0.7)
    assert val == pytest.approx(0.7)


def test_triplet_grads_match_fd():
    rng = np.random.default_rng(4)
    d = 5
    while True:
        fi, fj, fk = rng.normal(size=(3, d))
        raw = (fi - fj) @ (fi - fj) - (fi - fk) @ (fi - fk) + 1.0
        if abs(raw) > 1e-3:
            break
    _, (gi, gj, gk) = triplet_loss(fi, fj, fk, 1.0)

    def fn(vec):
        return triplet_loss(vec[:d], vec[d:2 * d], vec[2 * d:], 1.0)[0]

    fd = central_diff(fn, np.concatenate([fi, fj, fk]))
    assert rel_error(np.concatenate([gi, gj, gk]), fd) < 1e-7


def test_positive_pairs():
    assert positive_pairs(np.array([0, 1, 0, 1])) == [(0, 2), (1, 3)]
    assert positive_pairs(np.array([0, 1, 2])) == []


def test_lifted_hand_case_zero():
    # identical positives, negative at distance 5 from both, margin 1:
    # J = [0 + (1 - 5) + (1 - 5)]+ = 0
    rows = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0]])
    res = lifted_loss(rows, np.array([0, 0, 1]), 1.0)
    assert res.value == 0.0
    assert np.array_equal(res.grad, np.zeros_like(rows))
    assert res.pair_count == 1 and not res.degenerate


def test_lifted_boundary_case():
    # negative exactly at margin distance from both coincident positives:
    # J = 0 + log(e^0) + log(e^0) = 0
    rows = np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0]])
    res = lifted_loss(rows, np.array([0, 0, 1]), 2.0)
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_lifted_no_positive_pairs_flag():
    rows = np.array([[0.0, 1.0], [2.0, 0.0], [0.0, 3.0]])
    res = lifted_loss(rows, np.array([0, 1, 2]), 1.0)
    assert res.degenerate and res.pair_count == 0
    assert res.value == 0.0
    assert np.array_equal(res.grad, np.zeros_like(rows))


def test_lifted_skips_pairs_without_negatives():
    # single-class batch: the pair exists but has no negatives, so skipped
    rows = np.array([[0.0, 0.0], [1.0, 0.0]])
    res = lifted_loss(rows, np.array([0, 0]), 1.0)
    assert res.degenerate
    # mixed: two classes, each pair usable; count only in-batch pairs
    rows = np.array([[0.0, 0.0], [0.1, 0.0], [4.0, 0.0], [4.2, 0.0]])
    res = lifted_loss(rows, np.array([0, 0, 1, 1]), 1.0)
    assert res.pair_count == 2


def test_lifted_permutation_equivariance():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(8, 4)) * 1.5
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    perm = rng.permutation(8)
    base = lifted_loss(rows, labels, 1.0)
    shuffled = lifted_loss(rows[perm], labels[perm], 1.0)
    assert shuffled.value == pytest.approx(base.value, rel=1e-12)
    assert np.allclose(shuffled.grad, base.grad[perm], atol=1e-12)


def test_lifted_grad_matches_fd():
    rng = np.random.default_rng(6)
    n, c = 8, 4
    while True:
        rows = rng.normal(size=(n, c)) * 1.5
        labels = rng.integers(0, 3, n)
        if len(set(labels.tolist())) < 2:
            continue
        res = lifted_loss(rows, labels, 1.0)
        if not res.degenerate and res.value > 1e-3:
            break
    fd = central_diff(lambda v: lifted_loss(v.reshape(n, c), labels, 1.0).value,
                      rows.ravel().copy())
    assert rel_error(res.grad.ravel(), fd) < 1e-6


def test_lifted_validation():
    with pytest.raises(InvalidInputError):
        lifted_loss(np.zeros((1, 2)), np.array([0]), 1.0)
    with pytest.raises(InvalidInputError):
        lifted_loss(np.zeros((3, 2)), np.array([0, 0]), 1.0)


def test_dml_lam_zero_equals_plain_lifted():
    rng = np.random.default_rng(7)
    n, d, c = 6, 5, 4
    f = rng.normal(size=(n, d))
    w = rng.normal(size=(c, d))
    b = rng.normal(size=c)
    labels = rng.integers(0, c, n)
    bank = CovarianceBank([psd(rng, d) for _ in range(c)])
    res = dml_on_augmented_logits(f, w, b, labels, bank, 0.0, 1.0)
    plain = lifted_loss(f @ w.T + b, labels, 1.0)
    assert res.value == pytest.approx(plain.value, rel=1e-12)
    assert np.allclose(res.grad_features, plain.grad @ w, atol=1e-12)


def test_dml_zero_covariance_bank_matches_plain_for_any_lam():
    rng = np.random.default_rng(8)
    n, d, c = 5, 3, 3
    f = rng.normal(size=(n, d))
    w = rng.normal(size=(c, d))
    b = rng.normal(size=c)
    labels = np.array([0, 1, 2, 0, 1])
    bank = CovarianceBank([np.zeros((d, d)) for _ in range(c)])
    for lam in (0.0, 1.0, 5.0):
        res = dml_on_augmented_logits(f, w, b, labels, bank, lam, 1.0)
        plain = lifted_loss(f @ w.T + b, labels, 1.0)
        assert res.value == pytest.approx(plain.value, rel=1e-12)


def test_dml_full_gradients_match_fd():
    rng = np.random.default_rng(9)
    n, d, c = 6, 4, 3
    while True:
        f = rng.normal(size=(n, d))
        w = rng.normal(size=(c, d))
        b = rng.normal(size=c) * 0.3
        labels = rng.integers(0, c, n)
        if len(set(labels.tolist())) < 2:
            continue
        bank = CovarianceBank([psd(rng, d) for _ in range(c)])
        lam = 0.9
        res = dml_on_augmented_logits(f, w, b, labels, bank, lam, 1.0)
        if res.value > 1e-3:
            break
    analytic = np.concatenate([res.grad_features.ravel(), res.grad_weights.ravel(),
                               res.grad_bias])

    def fn(vec):
        fv = vec[:n * d].reshape(n, d)
        wv = vec[n * d:n * d + c * d].reshape(c, d)
        return dml_on_augmented_logits(fv, wv, vec[n * d + c * d:], labels,
                                       bank, lam, 1.0).value

    fd = central_diff(fn, np.concatenate([f.ravel(), w.ravel(), b]))
    assert rel_error(analytic, fd) < 1e-6


def test_dml_bank_coverage_check():
    bank = CovarianceBank([np.zeros((2, 2))])
    with pytest.raises(InvalidInputError):
        dml_on_augmented_logits(np.zeros((3, 2)), np.eye(2), np.zeros(2),
                                np.array([0, 1, 0]), bank, 1.0, 1.0)


def test_total_objective_linearity():
    rng = np.random.default_rng(10)
    params = model.init(0, (4, 3), 2)
    ga = model.from_vector(params, rng.normal(size=model.to_vector(params).size))
    gb = model.from_vector(params, rng.normal(size=model.to_vector(params).size))

    class Parts:
        total = 1.25
        grads = ga

    dml = ParamLoss(0.5, gb)
    out = total_objective(Parts(), dml, 2.0)
    assert out.value == pytest.approx(1.25 + 2.0 * 0.5, rel=1e-12)
    expect = model.to_vector(ga) + 2.0 * model.to_vector(gb)
    assert np.allclose(model.to_vector(out.grads), expect, atol=1e-12)
    zero = total_objective(Parts(), dml, 0.0)
    assert zero.value == pytest.approx(1.25)
    assert np.allclose(model.to_vector(zero.grads), model.to_vector(ga))
    with pytest.raises(InvalidInputError):
        total_objective(Parts(), dml, -1.0)


def test_dml_param_loss_modes():
    rng = np.random.default_rng(11)
    params = model.init(1, (6, 5, 4), 3)
    x = rng.uniform(0, 1, (6, 6))
    labels = np.array([0, 1, 2, 0, 1, 2])
    trace = model.forward(params, x)
    bank = CovarianceBank([psd(rng, 4) * 0.1 for _ in range(3)])
    on_logits = dml_param_loss(params, trace, labels, bank, 0.5, 1.0, "logits")
    on_features = dml_param_loss(params, trace, labels, None, 0.0, 1.0, "features")
    assert isinstance(on_logits, ParamLoss) and isinstance(on_features, ParamLoss)
    # features mode never touches the metric head
    assert np.array_equal(on_features.grads.dml_w, np.zeros_like(params.dml_w))
    with pytest.raises(InvalidInputError):
        dml_param_loss(params, trace, labels, bank, 0.5, 1.0, "nope")
    with pytest.raises(InvalidInputError):
        dml_param_loss(params, trace, labels, None, 0.5, 1.0, "logits")
