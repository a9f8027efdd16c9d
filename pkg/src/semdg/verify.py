"""Numerical certification: finite-difference gradient battery, MC bound sweep.

Every analytic gradient in the package is rechecked here against central
finite differences on freshly drawn random instances, with draws resampled
away from hinge and ReLU kinks where the loss is not differentiable. The
expected-loss upper bound is rechecked against plain Monte-Carlo estimates.
These routines are the substance behind the gradcheck and mc-oracle
subcommands and the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .augment import mc_ce_samples, quadratic_terms
from .errors import NumericalError
from .fourier_fact import FactConfig, TeacherState, cot_kl, fact_loss
from .losses import (ce_loss, dml_on_augmented_logits, dml_param_loss,
                     isda_ce_loss, lifted_loss, total_objective, triplet_loss)
from .stats import CovarianceBank

FD_STEP = 1e-5
MODULE_TOL = 1e-6
TIGHT_TOL = 1e-7
END_TO_END_TOL = 1e-5


@dataclass(frozen=True)
class GradReport:
    name: str
    instances: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


@dataclass(frozen=True)
class BoundRecord:
    closed_form: float
    mc_estimate: float
    std_error: float

    @property
    def holds(self) -> bool:
        return self.closed_form >= self.mc_estimate - 3.0 * self.std_error


def central_diff(fn, x0: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function over a flat vector."""
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2.0 * step)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(float(np.abs(numeric).max()) if numeric.size else 0.0, 1e-8)
    return float(np.abs(analytic - numeric).max()) / denom


def _random_psd(rng: np.random.Generator, dim: int) -> np.ndarray:
    a = rng.normal(0.0, 1.0, (dim, dim))
    sigma = (a @ a.T) / dim * rng.uniform(0.1, 1.0)
    return 0.5 * (sigma + sigma.T)


def _hinge_args(rows: np.ndarray, labels: np.ndarray, margin: float) -> np.ndarray:
    """Per positive pair J values, recomputed independently of lifted_loss."""
    n = rows.shape[0]
    diff = rows[:, None, :] - rows[None, :, :]
    dist = np.sqrt(np.maximum(np.einsum("ijk,ijk->ij", diff, diff), 1e-12))
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] != labels[j]:
                continue
            negs_i = np.flatnonzero(labels != labels[i])
            negs_j = np.flatnonzero(labels != labels[j])
            if negs_i.size == 0 or negs_j.size == 0:
                continue
            lse_i = np.log(np.exp(margin - dist[i, negs_i]).sum())
            lse_j = np.log(np.exp(margin - dist[j, negs_j]).sum())
            out.append(dist[i, j] + lse_i + lse_j)
    return np.asarray(out)


def _lifted_instance_clear(rows, labels, margin, gap=1e-3) -> bool:
    """True when no hinge arg or pair distance sits near a kink."""
    n = rows.shape[0]
    diff = rows[:, None, :] - rows[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    off = sq[~np.eye(n, dtype=bool)]
    if off.size and off.min() < 1e-6:
        return False
    args = _hinge_args(rows, labels, margin)
    return args.size > 0 and np.abs(args).min() > gap


def _check_ce(rng: np.random.Generator, instances: int) -> GradReport:
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(2, 9))
        logits = rng.normal(0.0, 2.0, c)
        y = int(rng.integers(c))
        _, grad = ce_loss(logits, y)
        fd = central_diff(lambda v: ce_loss(v, y)[0], logits.copy())
        worst = max(worst, rel_error(grad, fd))
    return GradReport("ce", instances, worst, TIGHT_TOL)


def _check_isda_ce(rng: np.random.Generator, instances: int) -> GradReport:
    worst = 0.0
    for _ in range(instances):
        d = int(rng.integers(2, 7))
        c = int(rng.integers(2, 6))
        f = rng.normal(0.0, 1.0, d)
        w = rng.normal(0.0, 1.0, (c, d))
        b = rng.normal(0.0, 0.5, c)
        sigma = _random_psd(rng, d)
        y = int(rng.integers(c))
        lam = float(rng.uniform(0.0, 2.0))
        res = isda_ce_loss(f, w, b, y, sigma, lam)
        analytic = np.concatenate([res.grad_features.ravel(),
                                   res.grad_weights.ravel(), res.grad_bias])

        def fn(vec, d=d, c=c, sigma=sigma, y=y, lam=lam):
            fv = vec[:d]
            wv = vec[d:d + c * d].reshape(c, d)
            bv = vec[d + c * d:]
            return isda_ce_loss(fv, wv, bv, y, sigma, lam).value

        x0 = np.concatenate([f, w.ravel(), b])
        worst = max(worst, rel_error(analytic, central_diff(fn, x0)))
    return GradReport("isda_ce", instances, worst, MODULE_TOL)


def _check_triplet(rng: np.random.Generator, instances: int) -> GradReport:
    worst = 0.0
    done = 0
    while done < instances:
        d = int(rng.integers(2, 9))
        fi, fj, fk = rng.normal(0.0, 1.0, (3, d))
        delta = float(rng.uniform(0.1, 2.0))
        raw = float((fi - fj) @ (fi - fj) - (fi - fk) @ (fi - fk)) + delta
        if abs(raw) < 1e-3:
            continue
        _, (gi, gj, gk) = triplet_loss(fi, fj, fk, delta)
        analytic = np.concatenate([gi, gj, gk])

        def fn(vec, d=d, delta=delta):
            return triplet_loss(vec[:d], vec[d:2 * d], vec[2 * d:], delta)[0]

        fd = central_diff(fn, np.concatenate([fi, fj, fk]))
        worst = max(worst, rel_error(analytic, fd))
        done += 1
    return GradReport("triplet", instances, worst, TIGHT_TOL)


def _check_cot(rng: np.random.Generator, instances: int) -> GradReport:
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(2, 9))
        s = rng.normal(0.0, 2.0, c)
        t = rng.normal(0.0, 2.0, c)
        temp = float(rng.choice([1.0, 2.0, 4.0]))
        _, grad = cot_kl(s, t, temp)
        fd = central_diff(lambda v: cot_kl(v, t, temp)[0], s.copy())
        worst = max(worst, rel_error(grad, fd))
    return GradReport("cot_kl", instances, worst, TIGHT_TOL)


def _check_lifted(rng: np.random.Generator, instances: int) -> GradReport:
    worst = 0.0
    done = 0
    while done < instances:
        n, c = 8, 4
        rows = rng.normal(0.0, 1.5, (n, c))
        labels = rng.integers(0, 3, n)
        if len(set(labels.tolist())) < 2:
            continue
        margin = float(rng.uniform(0.5, 2.0))
        if not _lifted_instance_clear(rows, labels, margin):
            continue
        res = lifted_loss(rows, labels, margin)
        if res.degenerate:
            continue
        fd = central_diff(
            lambda v: lifted_loss(v.reshape(n, c), labels, margin).value,
            rows.ravel().copy())
        worst = max(worst, rel_error(res.grad.ravel(), fd))
        done += 1
    return GradReport("lifted", instances, worst, MODULE_TOL)


def _check_dml_aug(rng: np.random.Generator, instances: int) -> GradReport:
    worst = 0.0
    done = 0
    while done < instances:
        n, d, c = 6, 5, 4
        f = rng.normal(0.0, 1.0, (n, d))
        w = rng.normal(0.0, 0.8, (c, d))
        b = rng.normal(0.0, 0.3, c)
        labels = rng.integers(0, 3, n)
        if len(set(labels.tolist())) < 2:
            continue
        lam = float(rng.uniform(0.0, 2.0))
        margin = float(rng.uniform(0.5, 1.5))
        bank = CovarianceBank([_random_psd(rng, d) for _ in range(c)])
        shift = np.stack([0.5 * lam * quadratic_terms(w, bank.lookup(k), k)
                          for k in range(c)])
        logits = f @ w.T + b + shift[labels]
        if not _lifted_instance_clear(logits, labels, margin):
            continue
        res = dml_on_augmented_logits(f, w, b, labels, bank, lam, margin)
        analytic = np.concatenate([res.grad_features.ravel(),
                                   res.grad_weights.ravel(), res.grad_bias])

        def fn(vec, n=n, d=d, c=c, labels=labels, bank=bank, lam=lam, margin=margin):
            fv = vec[:n * d].reshape(n, d)
            wv = vec[n * d:n * d + c * d].reshape(c, d)
            bv = vec[n * d + c * d:]
            return dml_on_augmented_logits(fv, wv, bv, labels, bank, lam, margin).value

        x0 = np.concatenate([f.ravel(), w.ravel(), b])
        worst = max(worst, rel_error(analytic, central_diff(fn, x0)))
        done += 1
    return GradReport("dml_on_augmented_logits", instances, worst, MODULE_TOL)


def _end_to_end_instance(rng: np.random.Generator):
    """One full-objective draw, resampled until clear of every kink."""
    widths = (12, 10, 6)
    c = 3
    n = 6
    while True:
        params = model.init(int(rng.integers(1 << 30)), widths, c)
        teacher = TeacherState(model.init(int(rng.integers(1 << 30)), widths, c),
                               0.9)
        xo = rng.uniform(0.0, 1.0, (n, widths[0]))
        xa = np.clip(xo + rng.normal(0.0, 0.15, xo.shape), 0.0, 1.0)
        labels = rng.integers(0, c, n)
        if len(set(labels.tolist())) < 2:
            continue
        bank = CovarianceBank([_random_psd(rng, widths[-1]) * 0.1
                               for _ in range(c)])
        lam = float(rng.uniform(0.0, 1.5))
        margin = 1.0
        trace_o = model.forward(params, xo)
        trace_a = model.forward(params, xa)
        pres = [p for layer in (trace_o.pre, trace_a.pre) for p in layer]
        if min(float(np.abs(p).min()) for p in pres) < 1e-3:
            continue
        logits = (trace_o.features @ params.dml_w.T + params.dml_b
                  + np.stack([0.5 * lam * quadratic_terms(params.dml_w,
                                                          bank.lookup(k), k)
                              for k in range(c)])[labels])
        if not _lifted_instance_clear(logits, labels, margin):
            continue
        return params, teacher, xo, xa, labels, bank, lam, margin


def _check_end_to_end(rng: np.random.Generator, instances: int) -> GradReport:
    cfg = FactConfig(beta=2.0, eta_max=1.0, teacher_momentum=0.9, temperature=4.0)
    alpha = 1.0
    worst = 0.0
    for _ in range(instances):
        (params, teacher, xo, xa,
         labels, bank, lam, margin) = _end_to_end_instance(rng)

        def objective(params_now):
            fact = fact_loss(xo, xa, labels, params_now, teacher, cfg, bank, lam)
            trace = model.forward(params_now, xo)
            dml = dml_param_loss(params_now, trace, labels, bank, lam, margin)
            return total_objective(fact, dml, alpha)

        analytic = model.to_vector(objective(params).grads)

        def fn(vec):
            return objective(model.from_vector(params, vec)).value

        fd = central_diff(fn, model.to_vector(params))
        worst = max(worst, rel_error(analytic, fd))
    return GradReport("end_to_end_objective", instances, worst, END_TO_END_TOL)


def run_gradient_battery(seed: int = 0) -> list:
    """The full finite-difference certification suite."""
    rng = np.random.default_rng([seed, 0xF0])
    return [
        _check_ce(rng, 100),
        _check_isda_ce(rng, 100),
        _check_triplet(rng, 100),
        _check_cot(rng, 100),
        _check_lifted(rng, 100),
        _check_dml_aug(rng, 100),
        _check_end_to_end(rng, 20),
    ]


def require_all_pass(reports) -> None:
    bad = [r for r in reports if not r.passed]
    if bad:
        detail = "; ".join(f"{r.name}: {r.max_rel_err:.3e} >= {r.tol:g}" for r in bad)
        raise NumericalError(f"gradient check failed: {detail}")


def jensen_sweep(instances: int = 200, samples: int = 10000, seed: int = 0,
                 lam: float | None = None) -> list:
    """Closed-form bound vs Monte-Carlo expected loss on random instances.

    Each record compares the closed-form value with a fresh M-sample
    estimate of the expected cross entropy under Gaussian feature noise;
    holds is True when closed form >= estimate - 3 standard errors.
    """
    rng = np.random.default_rng([seed, 0xB0])
    records = []
    for k in range(instances):
        d = int(rng.integers(2, 17))
        c = int(rng.integers(2, 9))
        f = rng.normal(0.0, 1.0, d)
        w = rng.normal(0.0, 1.0, (c, d))
        b = rng.normal(0.0, 0.5, c)
        sigma = _random_psd(rng, d)
        y = int(rng.integers(c))
        lam_k = float(rng.uniform(0.0, 2.0)) if lam is None else float(lam)
        closed = isda_ce_loss(f, w, b, y, sigma, lam_k).value
        ces = mc_ce_samples(f, w, b, sigma, y, lam_k, samples,
                            seed=int(rng.integers(1 << 30)))
        mc = float(ces.mean())
        se = float(ces.std(ddof=1) / np.sqrt(ces.size)) if ces.size > 1 else 0.0
        records.append(BoundRecord(closed, mc, se))
    return records
