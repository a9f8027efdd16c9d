"""Small MLP feature extractor with two affine heads, hand-differentiated.

The trunk is a stack of ReLU layers on flattened images; the last hidden
activation is the shared feature vector feeding both the classifier head
and the metric-learning head (whose output width equals the number of
classes, since its logits stand in for features). forward/backward are
exact reverse-mode twins, which is what makes the finite-difference
certification meaningful.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, InvalidInputError

CHECKPOINT_MAGIC = b"SDGC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Trunk layer weights/biases plus classifier and metric-head parameters."""

    hidden_w: list  # [(h1, in), (h2, h1), ...]
    hidden_b: list
    class_w: np.ndarray  # (C, d)
    class_b: np.ndarray  # (C,)
    dml_w: np.ndarray    # (C, d)
    dml_b: np.ndarray    # (C,)

    @property
    def in_dim(self) -> int:
        return self.hidden_w[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.hidden_w[-1].shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_w.shape[0]

    @property
    def widths(self) -> tuple:
        return (self.in_dim,) + tuple(w.shape[0] for w in self.hidden_w)

    def copy(self) -> "ModelParams":
        return ModelParams(
            [w.copy() for w in self.hidden_w],
            [b.copy() for b in self.hidden_b],
            self.class_w.copy(), self.class_b.copy(),
            self.dml_w.copy(), self.dml_b.copy(),
        )


@dataclass
class ForwardTrace:
    """Everything forward() computed, kept for the backward pass."""

    inputs: np.ndarray
    pre: list = field(default_factory=list)   # pre-activations per hidden layer
    post: list = field(default_factory=list)  # ReLU outputs per hidden layer
    features: np.ndarray = None               # alias of post[-1]
    class_logits: np.ndarray = None
    dml_logits: np.ndarray = None


def init(seed, widths, num_classes: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic per seed.

    widths = (in_dim, hidden_1, ..., hidden_L); the last width is the
    feature dimension. At least one hidden layer is required.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w < 1 for w in widths) or num_classes < 2:
        raise InvalidInputError(f"bad widths {widths} / num_classes {num_classes}")
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    hidden_w = [glorot(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]
    hidden_b = [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)]
    d = widths[-1]
    return ModelParams(
        hidden_w, hidden_b,
        class_w=glorot(num_classes, d), class_b=np.zeros(num_classes),
        dml_w=glorot(num_classes, d), dml_b=np.zeros(num_classes),
    )


def forward(params: ModelParams, batch) -> ForwardTrace:
    """Run the trunk and both heads on a batch of flattened inputs (n, in_dim)."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise InvalidInputError(f"batch shape {x.shape} incompatible with input dim {params.in_dim}")
    trace = ForwardTrace(inputs=x)
    h = x
    for w, b in zip(params.hidden_w, params.hidden_b):
        z = h @ w.T + b
        h = np.maximum(z, 0.0)
        trace.pre.append(z)
        trace.post.append(h)
    trace.features = h
    trace.class_logits = h @ params.class_w.T + params.class_b
    trace.dml_logits = h @ params.dml_w.T + params.dml_b
    return trace


def backward(params: ModelParams, trace: ForwardTrace,
             grad_features=None, grad_class_logits=None,
             grad_dml_logits=None) -> ModelParams:
    """Exact reverse-mode gradients for upstream signals on f and both heads.

    Any of the three upstream gradients may be omitted (treated as zero).
    ReLU uses subgradient 0 at exactly 0. Returns a ModelParams-shaped
    gradient container.
    """
    n = trace.inputs.shape[0]
    f = trace.features
    if f is None or f.shape != (n, params.feature_dim):
        raise InvalidInputError("trace does not match params")

    grads = zeros_like(params)
    g_f = np.zeros_like(f)
    if grad_features is not None:
        gf = np.asarray(grad_features, dtype=np.float64)
        if gf.shape != f.shape:
            raise InvalidInputError(f"grad_features shape {gf.shape} != features {f.shape}")
        g_f = g_f + gf
    if grad_class_logits is not None:
        gc = np.asarray(grad_class_logits, dtype=np.float64)
        if gc.shape != trace.class_logits.shape:
            raise InvalidInputError("grad_class_logits shape mismatch")
        grads.class_w += gc.T @ f
        grads.class_b += gc.sum(axis=0)
        g_f = g_f + gc @ params.class_w
    if grad_dml_logits is not None:
        gd = np.asarray(grad_dml_logits, dtype=np.float64)
        if gd.shape != trace.dml_logits.shape:
            raise InvalidInputError("grad_dml_logits shape mismatch")
        grads.dml_w += gd.T @ f
        grads.dml_b += gd.sum(axis=0)
        g_f = g_f + gd @ params.dml_w

    g = g_f
    for layer in range(len(params.hidden_w) - 1, -1, -1):
        gz = g * (trace.pre[layer] > 0)
        below = trace.post[layer - 1] if layer > 0 else trace.inputs
        grads.hidden_w[layer] += gz.T @ below
        grads.hidden_b[layer] += gz.sum(axis=0)
        g = gz @ params.hidden_w[layer]
    return grads


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(
        [np.zeros_like(w) for w in params.hidden_w],
        [np.zeros_like(b) for b in params.hidden_b],
        np.zeros_like(params.class_w), np.zeros_like(params.class_b),
        np.zeros_like(params.dml_w), np.zeros_like(params.dml_b),
    )


def add_scaled(a: ModelParams, b: ModelParams, scale: float = 1.0) -> ModelParams:
    """a + scale * b, elementwise over every tensor."""
    return ModelParams(
        [wa + scale * wb for wa, wb in zip(a.hidden_w, b.hidden_w)],
        [ba + scale * bb for ba, bb in zip(a.hidden_b, b.hidden_b)],
        a.class_w + scale * b.class_w, a.class_b + scale * b.class_b,
        a.dml_w + scale * b.dml_w, a.dml_b + scale * b.dml_b,
    )


def blend(a: ModelParams, b: ModelParams, weight_a: float) -> ModelParams:
    """weight_a * a + (1 - weight_a) * b, elementwise."""
    return add_scaled(scale(a, weight_a), b, 1.0 - weight_a)


def scale(a: ModelParams, s: float) -> ModelParams:
    return ModelParams(
        [s * w for w in a.hidden_w], [s * b for b in a.hidden_b],
        s * a.class_w, s * a.class_b, s * a.dml_w, s * a.dml_b,
    )


def _tensors(params: ModelParams) -> list:
    out = []
    for w, b in zip(params.hidden_w, params.hidden_b):
        out += [w, b]
    out += [params.class_w, params.class_b, params.dml_w, params.dml_b]
    return out


def to_vector(params: ModelParams) -> np.ndarray:
    """Flatten every tensor, declaration order, for finite-difference probes."""
    return np.concatenate([t.ravel() for t in _tensors(params)])


def from_vector(template: ModelParams, vec: np.ndarray) -> ModelParams:
    """Inverse of to_vector, shaped like template."""
    vec = np.asarray(vec, dtype=np.float64)
    out = zeros_like(template)
    total = sum(t.size for t in _tensors(out))
    if vec.shape != (total,):
        raise InvalidInputError(f"vector length {vec.size} != parameter count {total}")
    pos = 0
    for t in _tensors(out):
        t[...] = vec[pos:pos + t.size].reshape(t.shape)
        pos += t.size
    return out


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary checkpoint: magic, version, widths, then tensors as LE float64."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        widths = params.widths
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, len(widths), params.num_classes))
        fh.write(struct.pack(f"<{len(widths)}I", *widths))
        for t in _tensors(params):
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError("not a model checkpoint (bad magic)")
    try:
        version, n_widths, num_classes = struct.unpack_from("<III", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        widths = struct.unpack_from(f"<{n_widths}I", blob, 16)
        pos = 16 + 4 * n_widths
        try:
            params = init(0, widths, num_classes)  # shapes only; overwritten below
        except InvalidInputError as exc:
            raise DataFormatError(f"checkpoint header invalid: {exc}") from exc
        for t in _tensors(params):
            end = pos + 8 * t.size
            if end > len(blob):
                raise DataFormatError("checkpoint truncated")
            t[...] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(t.shape)
            pos = end
    except struct.error as exc:
        raise DataFormatError(f"checkpoint truncated: {exc}") from exc
    if pos != len(blob):
        raise DataFormatError("trailing bytes after checkpoint payload")
    return params
