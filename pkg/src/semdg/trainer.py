"""Deterministic SGD training loop, evaluation, ablation and sensitivity runs.

One step: draw a mixed-domain batch, build each sample's amplitude-mixed
twin using a partner from a different domain, update the per-class feature
covariances from the original view, assemble the composite objective
(co-teacher loss plus alpha times the metric loss), apply plain SGD, then
move the EMA teacher. Everything downstream of the seed is deterministic,
so two runs with one seed produce bitwise-identical logs and checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import model
from .data import DomainDataset, LodoSplit, flatten_images
from .errors import InvalidInputError
from .fourier_fact import FactConfig, TeacherState, ema_update, fact_loss
from .losses import ParamLoss, dml_param_loss, total_objective
from .stats import ClassStats, snapshot_all, update

SCHEDULES = ("constant", "linear-ramp")
DML_INPUTS = ("logits", "features")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on besides the data itself.

    alpha weighs the metric loss in the composite objective; lambda0 is the
    peak augmentation strength, reached at the end of training under the
    linear-ramp schedule (covariance estimates are poor early on).
    hidden_widths excludes the input layer; the last entry is the feature
    dimension feeding both heads.
    """

    alpha: float = 1.0
    lambda0: float = 0.25
    lambda_schedule: str = "linear-ramp"
    margin: float = 1.0
    fact: FactConfig = field(default_factory=FactConfig)
    lr: float = 0.01
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0
    dml_input: str = "logits"
    isda_enabled: bool = True
    hidden_widths: tuple = (64, 64)

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise InvalidInputError("alpha must be finite and non-negative")
        if not (np.isfinite(self.lambda0) and self.lambda0 >= 0):
            raise InvalidInputError("lambda0 must be finite and non-negative")
        if self.lambda_schedule not in SCHEDULES:
            raise InvalidInputError(f"lambda_schedule must be one of {SCHEDULES}")
        if not np.isfinite(self.margin):
            raise InvalidInputError("margin must be finite")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise InvalidInputError("lr must be positive")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be positive")
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be at least 2")
        if self.dml_input not in DML_INPUTS:
            raise InvalidInputError(f"dml_input must be one of {DML_INPUTS}")
        widths = tuple(int(w) for w in self.hidden_widths)
        if not widths or any(w < 1 for w in widths):
            raise InvalidInputError("hidden_widths must be positive and non-empty")
        object.__setattr__(self, "hidden_widths", widths)


METRICS_COLUMNS = ("epoch", "cls_ori", "cls_aug", "cot_a2o", "cot_o2a",
                   "dml", "total", "source_acc", "target_acc")


@dataclass
class MetricsLog:
    """Per-epoch loss components and accuracies, CSV-serializable."""

    rows: list = field(default_factory=list)

    def append(self, epoch: int, **values) -> None:
        if self.rows and epoch <= self.rows[-1][0]:
            raise InvalidInputError("epoch ids must increase")
        row = [epoch] + [float(values[c]) for c in METRICS_COLUMNS[1:]]
        if not all(np.isfinite(v) for v in row[1:]):
            raise InvalidInputError(f"non-finite metric at epoch {epoch}")
        self.rows.append(tuple(row))

    def to_csv(self) -> str:
        lines = [",".join(METRICS_COLUMNS)]
        for row in self.rows:
            cells = [str(row[0])] + [repr(v) for v in row[1:]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_csv())


def _config_field_types():
    scalar = {
        "alpha": float, "lambda0": float, "lambda_schedule": str,
        "margin": float, "lr": float, "epochs": int, "batch_size": int,
        "seed": int, "dml_input": str, "isda_enabled": bool,
    }
    fact = {"beta": float, "eta_max": float,
            "teacher_momentum": float, "temperature": float}
    return scalar, fact


def parse_config_text(text: str) -> TrainConfig:
    """Flat key=value lines with # comments; unknown keys are errors."""
    scalar, fact = _config_field_types()
    kwargs, fact_kwargs = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"config line {lineno}: expected key=value")
        key, val = (part.strip() for part in line.split("=", 1))
        if key == "hidden_widths":
            try:
                kwargs[key] = tuple(int(w) for w in val.split(",") if w.strip())
            except ValueError as exc:
                raise InvalidInputError(f"config line {lineno}: {exc}") from exc
            continue
        if key in scalar:
            dest, kind = kwargs, scalar[key]
        elif key in fact:
            dest, kind = fact_kwargs, fact[key]
        else:
            raise InvalidInputError(f"config line {lineno}: unknown key {key!r}")
        if kind is bool:
            if val.lower() not in ("true", "false"):
                raise InvalidInputError(f"config line {lineno}: {key} must be true or false")
            dest[key] = val.lower() == "true"
        elif kind is str:
            dest[key] = val
        else:
            try:
                dest[key] = kind(val)
            except ValueError as exc:
                raise InvalidInputError(f"config line {lineno}: {exc}") from exc
    if fact_kwargs:
        kwargs["fact"] = FactConfig(**fact_kwargs)
    return TrainConfig(**kwargs)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _lambda_at(cfg: TrainConfig, epoch: int) -> float:
    if not cfg.isda_enabled:
        return 0.0
    if cfg.lambda_schedule == "constant":
        return cfg.lambda0
    return cfg.lambda0 * (epoch + 1) / cfg.epochs


def _spectral_cache(images) -> tuple:
    """Half-spectrum amplitude and unit phase per image, computed once.

    Training images never change, so their Fourier transforms are hoisted
    out of the step loop; mixing then needs only one inverse transform.
    """
    spec = np.fft.rfft2(np.asarray(images, dtype=np.float64), axes=(1, 2))
    amp = np.abs(spec)
    unit = spec / np.where(amp == 0.0, 1.0, amp)
    unit[amp == 0.0] = 1.0
    return amp, unit


def _augmented_twin(images, batch_idx, domains, cache, image_shape,
                    rng, eta_max):
    """Amplitude-mixed partner view for every sample in the batch.

    Partners come from a different domain inside the batch when possible,
    falling back to the full training set otherwise. eta is drawn per
    sample; eta = 0 short-circuits to an exact copy.
    """
    b = batch_idx.size
    batch_domains = domains[batch_idx]
    partners = np.empty(b, dtype=np.int64)
    etas = np.zeros(b)
    for pos in range(b):
        cands = np.flatnonzero(batch_domains != batch_domains[pos])
        if cands.size:
            partners[pos] = int(batch_idx[int(cands[int(rng.integers(cands.size))])])
        else:
            pool = np.flatnonzero(domains != batch_domains[pos])
            partners[pos] = int(pool[int(rng.integers(pool.size))])
        if eta_max > 0:
            etas[pos] = float(rng.uniform(0.0, eta_max))
    out = np.empty((b, images.shape[1]))
    plain = etas == 0.0
    out[plain] = images[batch_idx[plain]]
    mixed = np.flatnonzero(~plain)
    if mixed.size:
        amp, unit = cache
        own, other = batch_idx[mixed], partners[mixed]
        e = etas[mixed][:, None, None, None]
        blend = (1.0 - e) * amp[own] + e * amp[other]
        stack = np.fft.irfft2(blend * unit[own], s=image_shape[:2],
                              axes=(1, 2))
        out[mixed] = np.clip(stack, 0.0, 1.0).reshape(mixed.size, -1)
    return out


def train(split: LodoSplit, cfg: TrainConfig):
    """Run the full loop; returns final parameters and the metrics log."""
    ds = split.train
    if len(ds) < 2:
        raise InvalidInputError("training split too small")
    if not ds.full_coverage():
        raise InvalidInputError("every class must appear in every training domain")
    h, w, ch = ds.image_shape
    in_dim = h * w * ch
    widths = (in_dim,) + cfg.hidden_widths
    feature_dim = widths[-1]

    params = model.init(cfg.seed, widths, ds.num_classes)
    teacher = TeacherState.from_student(params, cfg.fact.teacher_momentum)
    stats = [ClassStats.empty(c, feature_dim) for c in range(ds.num_classes)]
    rng = np.random.default_rng([cfg.seed, 0x5D])

    flat = flatten_images(ds.images)
    labels_all = np.asarray(ds.labels, dtype=np.int64)
    domains_all = np.asarray(ds.domain_ids, dtype=np.int64)
    cache = _spectral_cache(ds.images)
    log = MetricsLog()

    # domain-stratified batches: every batch takes a fixed quota from each
    # training domain, so amplitude-mix partners and metric-loss negatives
    # see a stable domain mix; ragged tails are dropped (fresh permutations
    # each epoch still cover everything over time)
    pools = [np.flatnonzero(domains_all == d) for d in np.unique(domains_all)]
    base, rem = divmod(cfg.batch_size, len(pools))
    quotas = [base + (1 if i < rem else 0) for i in range(len(pools))]
    steps = min((p.size // q for p, q in zip(pools, quotas) if q), default=0)
    if steps == 0 or sum(min(q, p.size) for p, q in zip(pools, quotas)) < 2:
        raise InvalidInputError("batch_size cannot be stratified over the "
                                "training domains; shrink batch_size")

    for epoch in range(cfg.epochs):
        lam = _lambda_at(cfg, epoch)
        perms = [p[rng.permutation(p.size)] for p in pools]
        sums = dict.fromkeys(METRICS_COLUMNS[1:7], 0.0)
        seen = 0
        for step_no in range(steps):
            batch_idx = np.concatenate(
                [p[step_no * q:(step_no + 1) * q]
                 for p, q in zip(perms, quotas)])
            xo = flat[batch_idx]
            yb = labels_all[batch_idx]
            xa = _augmented_twin(flat, batch_idx, domains_all, cache,
                                 ds.image_shape, rng, cfg.fact.eta_max)

            trace = model.forward(params, xo)
            for c in np.unique(yb):
                stats[int(c)] = update(stats[int(c)], trace.features[yb == c])
            bank = snapshot_all(stats)

            fact = fact_loss(xo, xa, yb, params, teacher, cfg.fact,
                             bank if cfg.isda_enabled else None, lam)
            if cfg.alpha > 0:
                dml = dml_param_loss(params, trace, yb, bank, lam,
                                     cfg.margin, cfg.dml_input)
                step = total_objective(fact, dml, cfg.alpha)
                dml_value = dml.value
            else:
                step = ParamLoss(fact.total, fact.grads)
                dml_value = 0.0

            params = model.add_scaled(params, step.grads, -cfg.lr)
            teacher = ema_update(teacher, params)

            bn = int(batch_idx.size)
            seen += bn
            sums["cls_ori"] += fact.cls_ori * bn
            sums["cls_aug"] += fact.cls_aug * bn
            sums["cot_a2o"] += fact.cot_a2o * bn
            sums["cot_o2a"] += fact.cot_o2a * bn
            sums["dml"] += dml_value * bn
            sums["total"] += step.value * bn
        means = {k: v / seen for k, v in sums.items()}
        log.append(epoch, source_acc=evaluate(params, ds),
                   target_acc=evaluate(params, split.target), **means)
    return params, log


def evaluate(params: model.ModelParams, ds: DomainDataset) -> float:
    """Classifier-head argmax accuracy; ties go to the lowest class index."""
    if len(ds) == 0:
        raise InvalidInputError("empty dataset")
    flat = flatten_images(ds.images)
    if flat.shape[1] != params.in_dim:
        raise InvalidInputError("dataset shape does not match model input")
    trace = model.forward(params, flat)
    pred = np.argmax(trace.class_logits, axis=1)
    return float(np.mean(pred == np.asarray(ds.labels)))


@dataclass(frozen=True)
class AblationRow:
    name: str
    target_acc: float
    source_acc: float


ABLATION_NAMES = ("baseline", "dml_features", "dml_logits", "isda", "full")


def ablation_variant(base: TrainConfig, name: str) -> TrainConfig:
    """The five studied switch settings, sharing every other knob."""
    if name == "baseline":
        return replace(base, alpha=0.0, isda_enabled=False)
    if name == "dml_features":
        return replace(base, dml_input="features", isda_enabled=False)
    if name == "dml_logits":
        return replace(base, dml_input="logits", isda_enabled=False)
    if name == "isda":
        return replace(base, alpha=0.0, isda_enabled=True)
    if name == "full":
        return replace(base, dml_input="logits", isda_enabled=True)
    raise InvalidInputError(f"unknown ablation row {name!r}")


def ablation_grid(split: LodoSplit, base_cfg: TrainConfig) -> list:
    """Train the five variants with a shared seed; one row each."""
    rows = []
    for name in ABLATION_NAMES:
        params, log = train(split, ablation_variant(base_cfg, name))
        rows.append(AblationRow(name, log.rows[-1][-1], log.rows[-1][-2]))
    return rows


def sensitivity_sweep(split: LodoSplit, base_cfg: TrainConfig, alphas) -> list:
    """One (alpha, target accuracy) row per alpha, ascending, shared seed."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise InvalidInputError("alphas must be non-empty")
    rows = []
    for a in sorted(alphas):
        params, log = train(split, replace(base_cfg, alpha=a))
        rows.append((a, log.rows[-1][-1]))
    return rows
