"""Desk-scale problem generation, source training and dataset IO.

The synthetic task is a class-conditional Gaussian mixture.  The target
domain draws from the same mixture and is then pushed through a
label-preserving shift (planar rotations, translation, scaling), so the
class set and class identities survive the shift.

The stand-in for an external pre-trained extractor is a frozen random
two-layer tanh map of each target input, concatenated with a noisy
class-signal block.  A single informativeness knob in [0, 1] controls
how much class information survives: at 0 the map sees pure noise and
the class signal vanishes, at 1 the map sees the true input and the
class signal is strongest.  This makes the bank tunably more or less
target-compatible than the source model.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .featurebank import FeatureBank
from .model import (
    AdaptationModel,
    SgdState,
    forward_batch,
    init_classifier,
    init_extractor,
    one_hot,
    sgd_step,
    supervised_grad,
)
from .numerics import (
    DivergenceError,
    FormatError,
    InvalidArgumentError,
    make_rng,
)

DATASET_MAGIC = b"CFDS"
DATASET_VERSION = 1

DOMAIN_SOURCE = "source"
DOMAIN_TARGET = "target"


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d) float64
    labels: np.ndarray = None  # (N,) int32 or None
    domain: str = DOMAIN_TARGET

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if x.ndim != 2:
            raise InvalidArgumentError("inputs must be 2-d")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("inputs contain non-finite entries")
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int32)
            if y.shape != (x.shape[0],):
                raise InvalidArgumentError("label count does not match inputs")
            object.__setattr__(self, "labels", y)
        if self.domain not in (DOMAIN_SOURCE, DOMAIN_TARGET):
            raise InvalidArgumentError(f"unknown domain tag {self.domain!r}")

    @property
    def n_samples(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]


@dataclass
class SyntheticSpec:
    """Everything that defines one generated adaptation problem."""

    classes: int = 4
    input_dim: int = 8
    samples_per_class_source: int = 100
    samples_per_class_target: int = 100
    separation: float = 4.0
    covariance_scale: float = 1.0
    rotation_angles: tuple = (0.9, 0.9, 0.9, 0.9)  # radians, per coordinate pair
    translation: tuple = (0.8, -0.8)  # zero-padded to input_dim
    scale: float = 1.0
    bank_map_dim: int = 16
    bank_hidden_dim: int = 24
    bank_informativeness: float = 0.8
    bank_class_signal: float = 1.5
    bank_noise: float = 0.65
    seed: int = 7

    def __post_init__(self):
        if self.classes < 2:
            raise InvalidArgumentError("need at least 2 classes")
        if self.input_dim < 1:
            raise InvalidArgumentError("input_dim must be positive")
        if self.samples_per_class_source < 1 or self.samples_per_class_target < 1:
            raise InvalidArgumentError("sample counts must be positive")
        if self.separation <= 0:
            raise InvalidArgumentError("separation must be positive")
        if self.covariance_scale <= 0:
            raise InvalidArgumentError(
                f"degenerate covariance scale {self.covariance_scale}"
            )
        if not 0.0 <= self.bank_informativeness <= 1.0:
            raise InvalidArgumentError("bank_informativeness must be in [0, 1]")
        if self.scale == 0:
            raise InvalidArgumentError("scale must be nonzero")
        if len(self.translation) > self.input_dim:
            raise InvalidArgumentError("translation longer than input_dim")


@dataclass
class SourceTrainConfig:
    epochs: int = 40
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 50
    label_smoothing: float = 0.0
    seed: int = 7

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise InvalidArgumentError("lr and batch_size must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidArgumentError("label_smoothing must be in [0, 1)")


def _shift_matrix(spec):
    """Block-diagonal planar rotations on coordinate pairs, then scaling."""
    d = spec.input_dim
    rot = np.eye(d)
    for k, angle in enumerate(spec.rotation_angles):
        i, j = 2 * k, 2 * k + 1
        if j >= d:
            break
        c, s = np.cos(angle), np.sin(angle)
        rot[i, i], rot[i, j] = c, -s
        rot[j, i], rot[j, j] = s, c
    return spec.scale * rot


def _translation_vector(spec):
    t = np.zeros(spec.input_dim)
    t[: len(spec.translation)] = spec.translation
    return t


def _bank_features(spec, target_inputs, target_labels, rng):
    """Frozen random map of (possibly noise-blended) inputs plus class channels."""
    alpha = spec.bank_informativeness
    d, h, m = spec.input_dim, spec.bank_hidden_dim, spec.bank_map_dim
    w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(h, d))
    b1 = rng.normal(0.0, 0.1, size=h)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(m, h))
    b2 = rng.normal(0.0, 0.1, size=m)
    # at alpha=0 the map input is fresh noise with the data's scale,
    # carrying no class information at all
    noise_in = rng.normal(0.0, 1.0, size=target_inputs.shape) * np.std(target_inputs)
    blended = alpha * target_inputs + (1.0 - alpha) * noise_in
    mapped = np.tanh(np.tanh(blended @ w1.T + b1) @ w2.T + b2)
    signal = alpha * spec.bank_class_signal * one_hot(target_labels, spec.classes)
    channel = signal + rng.normal(0.0, spec.bank_noise, size=signal.shape)
    feats = np.concatenate([mapped, channel], axis=1)
    # interchange formats are float32; rounding here keeps in-memory and
    # file-roundtripped pipelines bit-identical
    return feats.astype(np.float32).astype(np.float64)


def generate(spec):
    """Generate (source dataset, target dataset, bank, target truth labels).

    The target dataset is returned unlabeled; its true labels come back
    separately so adaptation code cannot touch them by accident.
    """
    rng = make_rng(spec.seed)
    L, d = spec.classes, spec.input_dim
    if L <= d:
        # orthonormal mean directions: every class pair sits at the same
        # distance, so task difficulty does not swing with the seed
        gauss = rng.normal(0.0, 1.0, size=(d, d))
        q, r = np.linalg.qr(gauss)
        means = (q * np.sign(np.diag(r)))[:, :L].T.copy()
    else:
        means = rng.normal(0.0, 1.0, size=(L, d))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= spec.separation
    sigma = np.sqrt(spec.covariance_scale)

    def draw(per_class):
        xs, ys = [], []
        for c in range(L):
            xs.append(means[c] + sigma * rng.normal(0.0, 1.0, size=(per_class, d)))
            ys.append(np.full(per_class, c, dtype=np.int32))
        return np.concatenate(xs), np.concatenate(ys)

    src_x, src_y = draw(spec.samples_per_class_source)
    tgt_x0, tgt_y = draw(spec.samples_per_class_target)
    shift = _shift_matrix(spec)
    tgt_x = tgt_x0 @ shift.T + _translation_vector(spec)

    src_x = src_x.astype(np.float32).astype(np.float64)
    tgt_x = tgt_x.astype(np.float32).astype(np.float64)

    bank = FeatureBank(_bank_features(spec, tgt_x, tgt_y, rng))
    source = Dataset(src_x, src_y, DOMAIN_SOURCE)
    target = Dataset(tgt_x, None, DOMAIN_TARGET)
    return source, target, bank, tgt_y.copy()


def train_source(source, dims, cfg):
    """Supervised training of extractor and classifier on labeled source data.

    dims lists the extractor widths (input, hidden..., feature).  Returns
    the trained model with the classifier still trainable; callers freeze
    it before adaptation.  Raises on unlabeled data or a diverging loss.
    """
    if source.labels is None:
        raise InvalidArgumentError("source dataset must be labeled")
    dims = tuple(dims)
    if dims[0] != source.dim:
        raise InvalidArgumentError(
            f"dims[0]={dims[0]} must equal source input dim {source.dim}"
        )
    n_classes = int(source.labels.max()) + 1
    rng = make_rng(cfg.seed)
    model = AdaptationModel(
        init_extractor(dims, rng),
        init_classifier(dims[-1], n_classes, rng),
        classifier_frozen=False,
    )
    if cfg.epochs == 0:
        return model

    targets = one_hot(source.labels, n_classes)
    if cfg.label_smoothing > 0:
        eps = cfg.label_smoothing
        targets = (1.0 - eps) * targets + eps / n_classes

    opt = SgdState.for_model(model, cfg.lr, cfg.momentum)
    n = source.n_samples
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                loss, ext_grads, clf_grads = supervised_grad(
                    model, source.inputs[idx], targets[idx]
                )
                if not np.isfinite(loss):
                    raise DivergenceError(f"source training diverged, loss={loss}")
                # source training steps on the batch-mean gradient
                k = 1.0 / idx.size
                ext_grads = ([k * g for g in ext_grads[0]],
                             [k * g for g in ext_grads[1]])
                clf_grads = (k * clf_grads[0], k * clf_grads[1])
                model, opt = sgd_step(model, ext_grads, opt,
                                      classifier_grads=clf_grads)
            except InvalidArgumentError as e:
                # overflowing parameters surface as non-finite validation
                # failures mid-step; classify them as divergence
                if "non-finite" in str(e):
                    raise DivergenceError(f"source training diverged: {e}") from None
                raise
    return model


# ---------------------------------------------------------------------------
# Dataset file format, little-endian:
#   magic "CFDS" | version u32 | N u64 | d u32
#   | flags u32 (bit0 labels present, bit1 target domain)
#   | N*d float32 row-major | N int32 labels if flagged
# ---------------------------------------------------------------------------


def save_dataset(ds, path):
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    flags = (1 if ds.labels is not None else 0) | (
        2 if ds.domain == DOMAIN_TARGET else 0
    )
    buf.write(struct.pack("<IQII", DATASET_VERSION, ds.n_samples, ds.dim, flags))
    buf.write(np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes())
    if ds.labels is not None:
        buf.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
    data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_dataset(path):
    from .model import _Reader

    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(4, "magic")
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    n = r.u64("sample count")
    d = r.u32("input dim")
    flags = r.u32("flags")
    inputs = r.array("<f4", (n, d), "inputs").astype(np.float64)
    labels = None
    if flags & 1:
        labels = r.array("<i4", (n,), "labels").astype(np.int32)
    r.expect_eof()
    domain = DOMAIN_TARGET if flags & 2 else DOMAIN_SOURCE
    return Dataset(inputs, labels, domain)


def save_truth_csv(labels, path):
    with open(path, "w", newline="") as f:
        f.write("sample_id,label\n")
        for i, y in enumerate(np.asarray(labels, dtype=np.int64)):
            f.write(f"{i},{y}\n")


def load_truth_csv(path):
    labels = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "sample_id,label":
            raise FormatError(f"bad truth header {header!r}", offset=0)
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"line {lineno}: expected 2 columns")
            try:
                labels.append(int(parts[1]))
            except ValueError:
                raise FormatError(f"line {lineno}: bad label {parts[1]!r}") from None
    return np.asarray(labels, dtype=np.int64)
