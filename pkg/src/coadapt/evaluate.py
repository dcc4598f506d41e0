"""Classification metrics and diagnostics: accuracy, confusion, confidence.

The compatibility ratio compares how separable the target data is in the
source model's feature space versus the bank's, each measured by fitting
a nearest-centroid head with the true labels.  A ratio below 1 means the
frozen bank is the more target-compatible feature space.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .featurebank import FeatureBank, oracle_ncc_accuracy
from .model import forward_batch
from .numerics import InvalidArgumentError, as_matrix

REPORT_SCHEMA_VERSION = 1


@dataclass
class ConfusionMatrix:
    """Counts with rows indexed by truth and columns by prediction."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise InvalidArgumentError("confusion matrix must be square")
        if np.any(c < 0):
            raise InvalidArgumentError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def accuracy(self):
        return float(np.trace(self.counts) / self.total)


@dataclass
class ConfidenceHistogram:
    """Per-bin counts of correct and incorrect predictions by confidence."""

    edges: np.ndarray
    correct: np.ndarray
    incorrect: np.ndarray

    @property
    def n_bins(self):
        return len(self.edges) - 1

    @property
    def total(self):
        return int(self.correct.sum() + self.incorrect.sum())


def _check_labels(preds, truth):
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise InvalidArgumentError("predictions and truth must be equal-length 1-d")
    if p.size == 0:
        raise InvalidArgumentError("empty input")
    if p.min() < 0 or t.min() < 0:
        raise InvalidArgumentError("negative class index")
    return p, t


def accuracy(preds, truth):
    p, t = _check_labels(preds, truth)
    return float(np.mean(p == t))


def per_class_accuracy(preds, truth, n_classes=None):
    """Accuracy per truth class; every class must appear in the truth.

    A class the predictor never emits is fine (its accuracy is just the
    fraction of its truth samples predicted correctly); a class missing
    from the truth has no denominator and is an error.
    """
    p, t = _check_labels(preds, truth)
    if n_classes is None:
        n_classes = int(max(p.max(), t.max())) + 1
    out = np.zeros(n_classes)
    for i in range(n_classes):
        sel = t == i
        if not sel.any():
            raise InvalidArgumentError(f"class {i} absent from truth labels")
        out[i] = np.mean(p[sel] == i)
    return out


def mean_per_class_accuracy(preds, truth, n_classes=None):
    return float(per_class_accuracy(preds, truth, n_classes).mean())


def confusion(preds, truth, n_classes=None):
    p, t = _check_labels(preds, truth)
    if n_classes is None:
        n_classes = int(max(p.max(), t.max())) + 1
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def confidence_histogram(probs, truth, bins=10):
    """Histogram of max-probability confidence, split by correctness.

    Bins are right-closed over [0, 1]: bin i covers (edges[i], edges[i+1]],
    except the first which also includes its left edge.
    """
    p = as_matrix(probs, "probs")
    t = np.asarray(truth, dtype=np.int64)
    if t.shape != (p.shape[0],):
        raise InvalidArgumentError("truth length does not match probs rows")
    if bins < 1:
        raise InvalidArgumentError(f"bins must be >= 1, got {bins}")
    conf = p.max(axis=1)
    preds = p.argmax(axis=1)
    edges = np.linspace(0.0, 1.0, bins + 1)
    # searchsorted on interior edges puts c == edge into the lower bin
    idx = np.searchsorted(edges[1:-1], conf, side="left")
    correct = np.zeros(bins, dtype=np.int64)
    incorrect = np.zeros(bins, dtype=np.int64)
    hit = preds == t
    np.add.at(correct, idx[hit], 1)
    np.add.at(incorrect, idx[~hit], 1)
    return ConfidenceHistogram(edges, correct, incorrect)


def target_compatibility_ratio(source_model, bank, target_inputs, truth):
    """Source-feature oracle accuracy divided by bank oracle accuracy.

    Both oracles fit a nearest-centroid head on true target labels.  A
    low ratio signals that the frozen bank is more target-compatible than
    the source model's feature space.
    """
    truth = np.asarray(truth, dtype=np.int64)
    feats, _, _ = forward_batch(source_model, target_inputs)
    source_oracle = oracle_ncc_accuracy(feats, truth)
    bank_oracle = oracle_ncc_accuracy(bank, truth)
    return source_oracle / bank_oracle


def evaluate_model(model, inputs, truth, bins=10):
    """Full deterministic report for one model on labeled data.

    Returns a JSON-serializable dict: overall and per-class accuracy,
    confusion counts and a confidence histogram.
    """
    t = np.asarray(truth, dtype=np.int64)
    _, _, probs = forward_batch(model, inputs)
    preds = probs.argmax(axis=1)
    n_classes = model.n_classes
    cm = confusion(preds, t, n_classes)
    hist = confidence_histogram(probs, t, bins)
    per_class = per_class_accuracy(preds, t, n_classes)
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "n_samples": int(t.size),
        "accuracy": accuracy(preds, t),
        "per_class_accuracy": [float(v) for v in per_class],
        "mean_per_class_accuracy": float(per_class.mean()),
        "confusion": cm.counts.tolist(),
        "confidence_histogram": {
            "edges": [float(e) for e in hist.edges],
            "correct": hist.correct.tolist(),
            "incorrect": hist.incorrect.tolist(),
        },
    }


def report_to_json(report, path=None):
    text = json.dumps(report, indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as f:
            f.write(text + "\n")
    return text


def report_from_json(path):
    with open(path) as f:
        return json.load(f)


def save_confusion_csv(cm, path):
    """CSV export with a truth-class row per line."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["truth\\pred"] + [f"pred_{j}" for j in range(counts.shape[1])])
        for i, row in enumerate(counts):
            writer.writerow([f"true_{i}"] + [int(v) for v in row])
