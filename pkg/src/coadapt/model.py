"""Adaptation branch: a small tanh MLP feature extractor with a linear classifier.

The extractor is the trainable part.  During target adaptation the
classifier is frozen and gradients are backpropagated through it into
the extractor only.  Gradients are computed analytically; the finite
difference oracle in the test suite checks them.

Models are value objects: a training step returns a new model and never
mutates the old one.  A frozen classifier is shared by reference between
snapshots, which makes the byte-identity invariant hold by construction.
"""

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import (
    FormatError,
    InvalidArgumentError,
    as_matrix,
    as_vector,
    softmax_rows,
)

CHECKPOINT_MAGIC = b"CFMD"
CHECKPOINT_VERSION = 1


@dataclass
class MlpExtractor:
    """Fully-connected layers; tanh after every layer except the last.

    weights[i] has shape (dims[i+1], dims[i]); biases[i] has shape
    (dims[i+1],).  dims[0] is the input width, dims[-1] the feature width.
    """

    weights: list
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise InvalidArgumentError("extractor needs matching weight/bias lists")
        prev = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = as_matrix(w, f"weights[{i}]")
            b = as_vector(b, f"biases[{i}]")
            if w.shape[0] != b.size:
                raise InvalidArgumentError(
                    f"layer {i}: weight rows {w.shape[0]} != bias length {b.size}"
                )
            if prev is not None and w.shape[1] != prev:
                raise InvalidArgumentError(
                    f"layer {i}: expected input width {prev}, got {w.shape[1]}"
                )
            prev = w.shape[0]
            self.weights[i] = w
            self.biases[i] = b

    @property
    def dims(self):
        return tuple([self.weights[0].shape[1]] + [w.shape[0] for w in self.weights])

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def feature_dim(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return MlpExtractor(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )


@dataclass
class LinearClassifier:
    """Linear map feature -> class logits."""

    weight: np.ndarray  # (classes, feature_dim)
    bias: np.ndarray  # (classes,)

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "classifier weight")
        self.bias = as_vector(self.bias, "classifier bias")
        if self.weight.shape[0] != self.bias.size:
            raise InvalidArgumentError("classifier weight/bias class counts differ")

    @property
    def n_classes(self):
        return self.weight.shape[0]

    @property
    def feature_dim(self):
        return self.weight.shape[1]

    def copy(self):
        return LinearClassifier(self.weight.copy(), self.bias.copy())

    def param_bytes(self):
        """Concatenated raw bytes of all parameters, for freeze checks."""
        return self.weight.tobytes() + self.bias.tobytes()


@dataclass
class AdaptationModel:
    extractor: MlpExtractor
    classifier: LinearClassifier
    classifier_frozen: bool = False

    def __post_init__(self):
        if self.classifier.feature_dim != self.extractor.feature_dim:
            raise InvalidArgumentError(
                f"classifier expects {self.classifier.feature_dim} features, "
                f"extractor outputs {self.extractor.feature_dim}"
            )

    @property
    def input_dim(self):
        return self.extractor.input_dim

    @property
    def n_classes(self):
        return self.classifier.n_classes

    def copy(self, frozen=None):
        return AdaptationModel(
            self.extractor.copy(),
            self.classifier.copy(),
            self.classifier_frozen if frozen is None else frozen,
        )


@dataclass
class SgdState:
    """SGD-with-momentum state over the extractor parameters.

    Update rule per step:  v <- momentum * v + grad;  theta <- theta - lr * v.
    With momentum 0 this is plain gradient descent.
    """

    learning_rate: float
    momentum: float = 0.0
    velocity_w: list = field(default_factory=list)
    velocity_b: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model, learning_rate, momentum=0.0):
        return cls(
            learning_rate=float(learning_rate),
            momentum=float(momentum),
            velocity_w=[np.zeros_like(w) for w in model.extractor.weights],
            velocity_b=[np.zeros_like(b) for b in model.extractor.biases],
        )


def init_extractor(dims, rng):
    """Build an extractor with fan-in-scaled uniform weights.

    Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases
    start at zero.  Deterministic for a given generator state.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise InvalidArgumentError("dims needs an input and an output width")
    if any(d <= 0 for d in dims):
        raise InvalidArgumentError(f"all dims must be positive, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpExtractor(weights, biases)


def init_classifier(feature_dim, n_classes, rng):
    """Fan-in-scaled uniform classifier, same scheme as the extractor layers."""
    if feature_dim <= 0 or n_classes <= 0:
        raise InvalidArgumentError("feature_dim and n_classes must be positive")
    bound = 1.0 / np.sqrt(feature_dim)
    return LinearClassifier(
        rng.uniform(-bound, bound, size=(n_classes, feature_dim)),
        np.zeros(n_classes),
    )


def _forward_batch(extractor, x):
    """Run the extractor on a batch, keeping per-layer activations.

    Returns (activations, features) where activations[0] is the input and
    activations[i] the output of layer i-1 after its nonlinearity.
    """
    h = x
    acts = [h]
    last = len(extractor.weights) - 1
    for i, (w, b) in enumerate(zip(extractor.weights, extractor.biases)):
        a = h @ w.T + b
        h = a if i == last else np.tanh(a)
        acts.append(h)
    return acts, h


def forward(model, x):
    """Single-sample forward pass.

    Returns (features, logits, probs) with probs the plain softmax of the
    logits.  Raises on input width mismatch.
    """
    v = as_vector(x, "input")
    if v.size != model.input_dim:
        raise InvalidArgumentError(
            f"input length {v.size} != model input_dim {model.input_dim}"
        )
    feats, logits, probs = forward_batch(model, v[None, :])
    return feats[0], logits[0], probs[0]


def forward_batch(model, x):
    """Batched forward pass; rows are independent samples.

    Returns (features, logits, probs) as (N, feature_dim), (N, L), (N, L).
    """
    xb = as_matrix(x, "inputs")
    if xb.shape[1] != model.input_dim:
        raise InvalidArgumentError(
            f"input width {xb.shape[1]} != model input_dim {model.input_dim}"
        )
    _, feats = _forward_batch(model.extractor, xb)
    logits = feats @ model.classifier.weight.T + model.classifier.bias
    return feats, logits, softmax_rows(logits)


def _backprop(model, x, targets, with_classifier):
    """Summed cross-entropy loss and analytic gradients.

    targets is an (N, L) array of one-hot (or smoothed) rows.  The loss is
    the sum over the batch of -target . log(probs).  Extractor gradients
    are always produced; classifier gradients only when requested.
    """
    ex = model.extractor
    acts, feats = _forward_batch(ex, x)
    logits = feats @ model.classifier.weight.T + model.classifier.bias
    probs = softmax_rows(logits)
    # clip only inside the log; the gradient uses probs - targets directly
    loss = float(-(targets * np.log(np.maximum(probs, 1e-300))).sum())

    dlogits = probs - targets  # (N, L)
    grad_cw = dlogits.T @ feats if with_classifier else None
    grad_cb = dlogits.sum(axis=0) if with_classifier else None

    delta = dlogits @ model.classifier.weight  # (N, feature_dim)
    grads_w = [None] * len(ex.weights)
    grads_b = [None] * len(ex.weights)
    for i in range(len(ex.weights) - 1, -1, -1):
        if i != len(ex.weights) - 1:
            delta = delta * (1.0 - acts[i + 1] ** 2)  # tanh'
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ ex.weights[i]
    return loss, (grads_w, grads_b), (grad_cw, grad_cb)


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidArgumentError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy_grad(model, x, labels):
    """Loss and extractor gradients for a pseudolabeled batch.

    x is (N, input_dim), labels an integer class per row.  The loss is the
    sum over the batch of -log p[label].  Gradients flow through the
    (frozen) classifier into the extractor only; no classifier gradients
    are produced.  An empty batch returns loss 0 and zero gradients.
    """
    xb = np.asarray(x, dtype=np.float64)
    if xb.size == 0:
        zero = (
            [np.zeros_like(w) for w in model.extractor.weights],
            [np.zeros_like(b) for b in model.extractor.biases],
        )
        return 0.0, zero
    xb = as_matrix(xb, "inputs")
    targets = one_hot(labels, model.n_classes)
    if targets.shape[0] != xb.shape[0]:
        raise InvalidArgumentError("batch/label count mismatch")
    loss, ext_grads, _ = _backprop(model, xb, targets, with_classifier=False)
    return loss, ext_grads


def supervised_grad(model, x, targets):
    """Loss plus gradients for both extractor and classifier.

    Used for source training where the classifier is learned jointly.
    targets is a row-stochastic (N, L) array (one-hot or label-smoothed).
    """
    xb = as_matrix(x, "inputs")
    t = as_matrix(targets, "targets")
    if t.shape != (xb.shape[0], model.n_classes):
        raise InvalidArgumentError("target shape mismatch")
    return _backprop(model, xb, t, with_classifier=True)


def sgd_step(model, grads, opt, classifier_grads=None):
    """One momentum-SGD update; returns (new model, new optimizer state).

    Never touches the classifier unless classifier gradients are passed
    and the classifier is not frozen.
    """
    grads_w, grads_b = grads
    ex = model.extractor
    if len(grads_w) != len(ex.weights) or len(grads_b) != len(ex.biases):
        raise InvalidArgumentError("gradient list lengths do not match model")
    lr = opt.learning_rate
    mu = opt.momentum
    new_w, new_b, vel_w, vel_b = [], [], [], []
    for w, b, gw, gb, vw, vb in zip(
        ex.weights, ex.biases, grads_w, grads_b, opt.velocity_w, opt.velocity_b
    ):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise InvalidArgumentError(
                f"gradient shape {gw.shape} does not match parameter {w.shape}"
            )
        nvw = mu * vw + gw
        nvb = mu * vb + gb
        new_w.append(w - lr * nvw)
        new_b.append(b - lr * nvb)
        vel_w.append(nvw)
        vel_b.append(nvb)
    extractor = MlpExtractor(new_w, new_b)

    classifier = model.classifier
    if classifier_grads is not None and not model.classifier_frozen:
        gcw, gcb = classifier_grads
        classifier = LinearClassifier(
            classifier.weight - lr * gcw, classifier.bias - lr * gcb
        )
    new_model = AdaptationModel(extractor, classifier, model.classifier_frozen)
    new_opt = replace(opt, velocity_w=vel_w, velocity_b=vel_b)
    return new_model, new_opt


# ---------------------------------------------------------------------------
# Checkpoint format: little-endian binary
#   magic "CFMD" | version u32 | flags u32 (bit0 = classifier frozen)
#   | n_dims u32 | dims u32[n_dims] | n_classes u32
#   | extractor layers in order (W row-major f64, then b f64)
#   | classifier W f64, classifier b f64
# ---------------------------------------------------------------------------


def save_model(model, path):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    flags = 1 if model.classifier_frozen else 0
    dims = model.extractor.dims
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, flags))
    buf.write(struct.pack("<I", len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    buf.write(struct.pack("<I", model.n_classes))
    for w, b in zip(model.extractor.weights, model.extractor.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(model.classifier.weight, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(model.classifier.bias, dtype="<f8").tobytes())
    data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


class _Reader:
    """Byte reader that reports the offset of whatever failed to parse."""

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated file reading {what}: expected {self.pos + n} bytes, "
                f"file has {len(self.data)}",
                offset=self.pos,
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def array(self, dtype, shape, what):
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        raw = self.take(n, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape)

    def expect_eof(self):
        if self.pos != len(self.data):
            raise FormatError(
                f"trailing bytes: expected length {self.pos}, file has {len(self.data)}",
                offset=self.pos,
            )


def load_model(path):
    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    flags = r.u32("flags")
    n_dims = r.u32("dim count")
    if n_dims < 2 or n_dims > 64:
        raise FormatError(f"implausible dim count {n_dims}", offset=r.pos - 4)
    dims = [r.u32("dims") for _ in range(n_dims)]
    n_classes = r.u32("class count")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(r.array("<f8", (fan_out, fan_in), "extractor weights").astype(np.float64))
        biases.append(r.array("<f8", (fan_out,), "extractor biases").astype(np.float64))
    cw = r.array("<f8", (n_classes, dims[-1]), "classifier weights").astype(np.float64)
    cb = r.array("<f8", (n_classes,), "classifier bias").astype(np.float64)
    r.expect_eof()
    return AdaptationModel(
        MlpExtractor(weights, biases),
        LinearClassifier(cw, cb),
        classifier_frozen=bool(flags & 1),
    )
