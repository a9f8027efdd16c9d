"""Fourier amplitude-mix augmentation, EMA co-teacher, and its composite loss.

The augmented view of an image keeps its own phase spectrum (structure) and
takes a convex mix of amplitude spectra (style) with a partner from another
domain. The co-teacher is an exponential moving average of the student, and
the composite objective adds symmetric soft-target KL terms between the
original and augmented views to the two classification terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .errors import InvalidInputError
from .linalg import as_matrix
from .losses import isda_ce_batch
from .stats import CovarianceBank


@dataclass(frozen=True)
class FactConfig:
    """Knobs of the co-teacher objective.

    beta weighs the two consistency terms; eta defaults cover the full
    amplitude-mix range; temperature and momentum follow common mean-teacher
    practice.
    """

    beta: float = 2.0
    eta_max: float = 1.0
    teacher_momentum: float = 0.999
    temperature: float = 4.0

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise InvalidInputError("beta must be finite and non-negative")
        if not 0.0 <= self.eta_max <= 1.0:
            raise InvalidInputError("eta_max must lie in [0, 1]")
        if not 0.0 <= self.teacher_momentum < 1.0:
            raise InvalidInputError("teacher_momentum must lie in [0, 1)")
        if not self.temperature > 0:
            raise InvalidInputError("temperature must be positive")


@dataclass
class TeacherState:
    params: model.ModelParams
    momentum: float

    @staticmethod
    def from_student(student: model.ModelParams, momentum: float) -> "TeacherState":
        if not 0.0 <= momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")
        return TeacherState(student.copy(), momentum)


@dataclass
class FactLossParts:
    """The four loss terms, their weighted total, and student gradients."""

    cls_ori: float
    cls_aug: float
    cot_a2o: float
    cot_o2a: float
    total: float
    grads: model.ModelParams


def _as_image(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidInputError(f"{name} must be a 2-d or 3-d pixel array")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite pixels")
    return arr


def amplitude_mix(x1, x2, eta: float) -> np.ndarray:
    """Blend amplitude spectra, keep x1's phase, clip to [0, 1].

    eta = 0 reproduces x1 up to FFT round-trip error; eta = 1 takes the
    partner's full amplitude spectrum.
    """
    a = _as_image(x1, "x1")
    b = _as_image(x2, "x2")
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= eta <= 1.0:
        raise InvalidInputError("eta must lie in [0, 1]")
    out = np.empty_like(a)
    for ch in range(a.shape[2]):
        fa = np.fft.fft2(a[:, :, ch])
        fb = np.fft.fft2(b[:, :, ch])
        amp = (1.0 - eta) * np.abs(fa) + eta * np.abs(fb)
        mixed = amp * np.exp(1j * np.angle(fa))
        out[:, :, ch] = np.fft.ifft2(mixed).real
    np.clip(out, 0.0, 1.0, out=out)
    if np.asarray(x1).ndim == 2:
        return out[:, :, 0]
    return out


def ema_update(teacher: TeacherState, student: model.ModelParams) -> TeacherState:
    """Move the teacher toward the student: m*teacher + (1-m)*student."""
    t = teacher.params
    if (t.widths != student.widths or t.num_classes != student.num_classes):
        raise InvalidInputError("teacher and student shapes disagree")
    return TeacherState(model.blend(t, student, teacher.momentum), teacher.momentum)


def cot_kl(student_logits, teacher_logits, temperature: float):
    """Soft-target KL from teacher to student at a temperature.

    Returns T^2 * KL(softmax(teacher/T) || softmax(student/T)) and its
    gradient with respect to the student logits only, T * (p_s - p_t).
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 1 or s.size == 0:
        raise InvalidInputError("logit vectors must share one non-empty shape")
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    value, grad = _cot_kl_rows(s[None, :], t[None, :], temperature)
    return float(value[0]), grad[0]


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _cot_kl_rows(student: np.ndarray, teacher: np.ndarray, temperature: float):
    """Row-wise soft-target KL values and student-logit gradients."""
    log_ps = _log_softmax_rows(student / temperature)
    log_pt = _log_softmax_rows(teacher / temperature)
    pt = np.exp(log_pt)
    values = temperature * temperature * (pt * (log_pt - log_ps)).sum(axis=1)
    grads = temperature * (np.exp(log_ps) - pt)
    return values, grads


def fact_loss(x_ori, x_aug, labels, student: model.ModelParams,
              teacher: TeacherState, cfg: FactConfig,
              bank: CovarianceBank | None = None, lam: float = 0.0) -> FactLossParts:
    """Composite co-teacher loss over an original/augmented batch pair.

    cls terms are mean (optionally augmented-logit) CE of the student on
    each view; the a2o consistency term distils the teacher's augmented-view
    prediction into the student's original-view one, o2a the reverse.
    Gradients flow into the student only. Passing a covariance bank with
    lam > 0 augments both CE terms; the consistency terms always use plain
    logits.
    """
    xo = as_matrix(x_ori, "x_ori")
    xa = as_matrix(x_aug, "x_aug")
    labels = np.asarray(labels)
    n = xo.shape[0]
    if xa.shape != xo.shape:
        raise InvalidInputError(f"batch shapes differ: {xo.shape} vs {xa.shape}")
    if labels.shape != (n,):
        raise InvalidInputError(f"labels shape {labels.shape} != ({n},)")

    trace_ori = model.forward(student, xo)
    trace_aug = model.forward(student, xa)
    tea_ori = model.forward(teacher.params, xo)
    tea_aug = model.forward(teacher.params, xa)

    cls_ori = isda_ce_batch(trace_ori.features, student.class_w, student.class_b,
                            labels, bank, lam)
    cls_aug = isda_ce_batch(trace_aug.features, student.class_w, student.class_b,
                            labels, bank, lam)

    a2o_vals, a2o_grads = _cot_kl_rows(trace_ori.class_logits,
                                       tea_aug.class_logits, cfg.temperature)
    o2a_vals, o2a_grads = _cot_kl_rows(trace_aug.class_logits,
                                       tea_ori.class_logits, cfg.temperature)
    cot_a2o = float(a2o_vals.mean())
    cot_o2a = float(o2a_vals.mean())

    scale = cfg.beta / n
    grads = model.backward(student, trace_ori,
                           grad_features=cls_ori.grad_features,
                           grad_class_logits=scale * a2o_grads)
    grads = model.add_scaled(grads,
                             model.backward(student, trace_aug,
                                            grad_features=cls_aug.grad_features,
                                            grad_class_logits=scale * o2a_grads))
    grads.class_w += cls_ori.grad_weights + cls_aug.grad_weights
    grads.class_b += cls_ori.grad_bias + cls_aug.grad_bias

    total = cls_ori.value + cls_aug.value + cfg.beta * (cot_a2o + cot_o2a)
    return FactLossParts(cls_ori.value, cls_aug.value, cot_a2o, cot_o2a, total, grads)
