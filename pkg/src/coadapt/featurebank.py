"""Frozen pre-trained branch: a feature bank plus a weighted nearest-centroid classifier.

The bank holds one feature row per target sample and never changes.  The
classifier's centroid for class i is the mean of unit-normalized bank
rows weighted by the adaptation model's probability for class i; scoring
is by cosine similarity, sharpened by a small temperature before the
softmax because cosine logits live in [-1, 1].
"""

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DegenerateInputError,
    FormatError,
    InvalidArgumentError,
    as_matrix,
    l2_normalize_rows,
    softmax_rows,
)

BANK_MAGIC = b"CFBK"
BANK_VERSION = 1
DEFAULT_TEMPERATURE = 0.01


@dataclass
class FeatureBank:
    """Immutable (N, D) feature matrix with row-aligned sample ids.

    ``normalized`` records that rows were unit-normalized up front; the
    classifier normalizes on the fly either way.  Optional integer labels
    ride along for oracle diagnostics only.
    """

    features: np.ndarray
    sample_ids: list = None
    normalized: bool = False
    labels: np.ndarray = None

    def __post_init__(self):
        feats = as_matrix(self.features, "bank features")
        norms = np.linalg.norm(feats, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError(
                f"bank row {int(np.argmin(norms))} has zero norm"
            )
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.sample_ids is None:
            object.__setattr__(self, "sample_ids", list(range(feats.shape[0])))
        elif len(self.sample_ids) != feats.shape[0]:
            raise InvalidArgumentError(
                f"{len(self.sample_ids)} sample ids for {feats.shape[0]} rows"
            )
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int32)
            if labels.shape != (feats.shape[0],):
                raise InvalidArgumentError("label count does not match rows")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def unit_features(self):
        return self.features if self.normalized else l2_normalize_rows(self.features)

    def checksum_bytes(self):
        return self.features.tobytes()


@dataclass
class CentroidClassifier:
    """Per-class centroids scored by temperature-sharpened cosine similarity."""

    centroids: np.ndarray  # (L, D)
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        c = as_matrix(self.centroids, "centroids")
        norms = np.linalg.norm(c, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError(
                f"centroid {int(np.argmin(norms))} has zero norm"
            )
        object.__setattr__(self, "centroids", c)
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise InvalidArgumentError(
                f"temperature must be positive, got {self.temperature}"
            )

    @property
    def n_classes(self):
        return self.centroids.shape[0]


def compute_centroids(bank, probs, subset=None, iterations=1,
                      temperature=DEFAULT_TEMPERATURE):
    """Estimate class centroids as probability-weighted means of unit features.

    probs is an (N, L) row-stochastic matrix, normally the adaptation
    branch's predictions.  ``subset`` optionally restricts the estimate to
    a boolean sample mask; the default uses every sample.  When
    ``iterations`` > 1, later rounds re-weight with the classifier's own
    sharpened predictions, k-means style.  One iteration over all samples
    is the default and the best-performing configuration.

    Raises :class:`DegenerateInputError` naming the first class whose
    total weight over the subset is zero.
    """
    p = as_matrix(probs, "probs")
    if p.shape[0] != bank.n_samples:
        raise InvalidArgumentError(
            f"probs rows {p.shape[0]} != bank samples {bank.n_samples}"
        )
    row_sums = p.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise InvalidArgumentError("probability rows must sum to 1 within 1e-9")
    if iterations < 1:
        raise InvalidArgumentError("iterations must be >= 1")

    if subset is None:
        mask = np.ones(bank.n_samples, dtype=bool)
    else:
        mask = np.asarray(subset, dtype=bool)
        if mask.shape != (bank.n_samples,):
            raise InvalidArgumentError("subset mask length does not match bank")
        if not mask.any():
            raise DegenerateInputError("subset selects no samples")

    unit = bank.unit_features()[mask]
    weights = p[mask]
    clf = None
    for _ in range(iterations):
        totals = weights.sum(axis=0)  # (L,)
        if np.any(totals <= 0.0):
            bad = int(np.argmin(totals))
            raise DegenerateInputError(
                f"class {bad} has zero total weight over the selected samples"
            )
        centroids = (weights.T @ unit) / totals[:, None]
        clf = CentroidClassifier(centroids, temperature)
        # next round re-weights with the sharpened NCC predictions
        logits = _cosine_logits(unit, centroids)
        weights = softmax_rows(logits, temperature)
    return clf


def _cosine_logits(features, centroids):
    f = l2_normalize_rows(features)
    c = l2_normalize_rows(centroids)
    return f @ c.T


def ncc_predict(clf, bank):
    """Score every bank row against the centroids.

    Returns (logits, probs): logits are cosine similarities in [-1, 1],
    probs their row-softmax at the classifier temperature.
    """
    if bank.dim != clf.centroids.shape[1]:
        raise InvalidArgumentError(
            f"bank dim {bank.dim} != centroid dim {clf.centroids.shape[1]}"
        )
    logits = _cosine_logits(bank.features, clf.centroids)
    return logits, softmax_rows(logits, clf.temperature)


def class_mean_centroids(features, labels, n_classes=None):
    """Plain per-class means of unit-normalized feature rows."""
    feats = as_matrix(features, "features")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (feats.shape[0],):
        raise InvalidArgumentError("label count does not match features")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    unit = l2_normalize_rows(feats)
    centroids = np.zeros((n_classes, feats.shape[1]))
    for i in range(n_classes):
        sel = labels == i
        if not sel.any():
            raise DegenerateInputError(f"class {i} has no labeled samples")
        centroids[i] = unit[sel].mean(axis=0)
    return centroids


def oracle_ncc_accuracy(bank_or_features, true_labels):
    """Upper-bound diagnostic: fit centroids with true labels, score in-sample.

    Centroids are class-wise means of unit features; prediction is the
    cosine argmax.  Accepts a FeatureBank or a plain (N, D) array.
    """
    feats = (
        bank_or_features.features
        if isinstance(bank_or_features, FeatureBank)
        else as_matrix(bank_or_features, "features")
    )
    labels = np.asarray(true_labels, dtype=np.int64)
    centroids = class_mean_centroids(feats, labels)
    logits = _cosine_logits(feats, centroids)
    preds = logits.argmax(axis=1)
    return float(np.mean(preds == labels))


# ---------------------------------------------------------------------------
# Bank file format, little-endian:
#   magic "CFBK" | version u32 | N u64 | D u32 | flags u32 (bit0 labels)
#   | N*D float32 row-major | N int32 labels if flagged
# Features are stored in float32 for interchange; loading widens back to
# float64 exactly, so load -> save reproduces the file byte for byte.
# ---------------------------------------------------------------------------


def save_bank(bank, path):
    buf = io.BytesIO()
    buf.write(BANK_MAGIC)
    flags = 1 if bank.labels is not None else 0
    buf.write(struct.pack("<IQII", BANK_VERSION, bank.n_samples, bank.dim, flags))
    buf.write(np.ascontiguousarray(bank.features, dtype="<f4").tobytes())
    if bank.labels is not None:
        buf.write(np.ascontiguousarray(bank.labels, dtype="<i4").tobytes())
    data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_bank(path):
    from .model import _Reader  # shared byte reader with offset reporting

    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(4, "magic")
    if magic != BANK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BANK_MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != BANK_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    n = r.u64("sample count")
    d = r.u32("feature dim")
    flags = r.u32("flags")
    feats = r.array("<f4", (n, d), "features").astype(np.float64)
    labels = None
    if flags & 1:
        labels = r.array("<i4", (n,), "labels").astype(np.int32)
    r.expect_eof()
    return FeatureBank(feats, labels=labels)


def save_bank_csv(bank, path):
    """CSV export: header f0..f{D-1}[,label]; values printed to 9 significant digits."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = [f"f{i}" for i in range(bank.dim)]
        if bank.labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(bank.n_samples):
            row = [f"{v:.9g}" for v in bank.features[i]]
            if bank.labels is not None:
                row.append(str(int(bank.labels[i])))
            writer.writerow(row)


def load_bank_csv(path):
    """Import a bank from CSV (header row, optional trailing label column)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file", offset=0) from None
        has_labels = bool(header) and header[-1].strip().lower() == "label"
        dim = len(header) - (1 if has_labels else 0)
        if dim < 1:
            raise FormatError("CSV header has no feature columns", offset=0)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"line {lineno}: expected {len(header)} columns, got {len(row)}"
                )
            try:
                feats.append([float(v) for v in row[:dim]])
                if has_labels:
                    labels.append(int(row[dim]))
            except ValueError as e:
                raise FormatError(f"line {lineno}: {e}") from None
    if not feats:
        raise FormatError("CSV contains no samples")
    return FeatureBank(
        np.asarray(feats, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int32) if has_labels else None,
    )
