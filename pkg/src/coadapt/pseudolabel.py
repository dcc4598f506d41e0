"""Fusion of two branch predictions into a partial pseudolabel assignment.

The default scheme labels a sample with the agreed class when the two
branches match; on disagreement the uniquely confident branch wins and a
tie of confidence indicators (both above or both at-or-below the
threshold) leaves the sample unlabeled.  Confidence is the branch's max
softmax probability, compared strictly against the threshold gamma.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import InvalidArgumentError, as_matrix

MATCH_OR_CONF = "match-or-conf"
SELF_CONF = "self-conf"
OTHER_CONF = "other-conf"
MATCH = "match"
MATCH_AND_CONF = "match-and-conf"

SCHEME_NAMES = (MATCH_OR_CONF, SELF_CONF, OTHER_CONF, MATCH, MATCH_AND_CONF)

# provenance tags recorded per assignment
PROV_MATCH = "match"
PROV_ADAPT_CONF = "adapt_conf"
PROV_PRETRAINED_CONF = "pretrained_conf"
PROV_SELF = "self"
PROV_OTHER = "other"


@dataclass(frozen=True)
class BranchPrediction:
    """Predicted class and max-softmax confidence of one branch."""

    predicted_class: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError(
                f"confidence must be in [0, 1], got {self.confidence}"
            )
        if self.predicted_class < 0:
            raise InvalidArgumentError("class index must be nonnegative")


@dataclass(frozen=True)
class Scheme:
    name: str
    gamma: float = 0.5

    def __post_init__(self):
        if self.name not in SCHEME_NAMES:
            raise InvalidArgumentError(
                f"unknown scheme {self.name!r}; choose from {SCHEME_NAMES}"
            )
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidArgumentError(f"gamma must be in [0, 1], got {self.gamma}")


@dataclass
class PseudolabelSet:
    """Partial map sample index -> (class, provenance)."""

    assignments: dict = field(default_factory=dict)
    total_samples: int = 0

    def __post_init__(self):
        if len(self.assignments) > self.total_samples:
            raise InvalidArgumentError("more assignments than samples")

    @property
    def n_assigned(self):
        return len(self.assignments)

    def labeled_indices(self):
        return np.fromiter(sorted(self.assignments), dtype=np.int64,
                           count=len(self.assignments))

    def labels_for(self, indices):
        return np.asarray([self.assignments[i][0] for i in indices], dtype=np.int64)


def fuse(scheme, adapt, pretrained):
    """Fuse one sample's two branch predictions.

    Returns (class, provenance) or None when the sample stays unlabeled.
    Confidence comparisons are strict: a branch is confident iff its
    confidence exceeds gamma.
    """
    g = scheme.gamma
    a_conf = adapt.confidence > g
    p_conf = pretrained.confidence > g
    matched = adapt.predicted_class == pretrained.predicted_class

    if scheme.name == MATCH_OR_CONF:
        if matched:
            return adapt.predicted_class, PROV_MATCH
        if a_conf and p_conf:
            return None
        if a_conf:
            return adapt.predicted_class, PROV_ADAPT_CONF
        if p_conf:
            return pretrained.predicted_class, PROV_PRETRAINED_CONF
        return None
    if scheme.name == SELF_CONF:
        return (adapt.predicted_class, PROV_SELF) if a_conf else None
    if scheme.name == OTHER_CONF:
        return (pretrained.predicted_class, PROV_OTHER) if p_conf else None
    if scheme.name == MATCH:
        return (adapt.predicted_class, PROV_MATCH) if matched else None
    if scheme.name == MATCH_AND_CONF:
        if matched and a_conf and p_conf:
            return adapt.predicted_class, PROV_MATCH
        return None
    raise InvalidArgumentError(f"unknown scheme {scheme.name!r}")


def build_pseudolabel_set(scheme, adapt_probs, pretrained_probs,
                          pretrained_confidence=None):
    """Apply :func:`fuse` independently to every sample.

    Both probability matrices must be row-stochastic with the same shape.
    ``pretrained_confidence`` optionally overrides the confidence used for
    the pre-trained branch (e.g. measured before temperature sharpening);
    predicted classes always come from the probability rows.
    """
    pa = as_matrix(adapt_probs, "adaptation probs")
    pp = as_matrix(pretrained_probs, "pretrained probs")
    if pa.shape[0] != pp.shape[0]:
        raise InvalidArgumentError(
            f"row count mismatch: {pa.shape[0]} vs {pp.shape[0]}"
        )
    for name, p in (("adaptation", pa), ("pretrained", pp)):
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
            raise InvalidArgumentError(f"{name} probs rows must sum to 1")

    a_cls = pa.argmax(axis=1)
    a_conf = pa.max(axis=1)
    p_cls = pp.argmax(axis=1)
    if pretrained_confidence is None:
        p_conf = pp.max(axis=1)
    else:
        p_conf = np.asarray(pretrained_confidence, dtype=np.float64)
        if p_conf.shape != (pp.shape[0],):
            raise InvalidArgumentError("confidence override length mismatch")

    assignments = {}
    for i in range(pa.shape[0]):
        out = fuse(
            scheme,
            BranchPrediction(int(a_cls[i]), float(min(a_conf[i], 1.0))),
            BranchPrediction(int(p_cls[i]), float(min(p_conf[i], 1.0))),
        )
        if out is not None:
            assignments[i] = out
    return PseudolabelSet(assignments, total_samples=pa.shape[0])


def pseudolabel_metrics(pl_set, true_labels):
    """Labeled proportion and accuracy over the labeled subset.

    The accuracy of an empty set is NaN, never 0: no labels means no
    evidence either way.
    """
    truth = np.asarray(true_labels, dtype=np.int64)
    if truth.shape != (pl_set.total_samples,):
        raise InvalidArgumentError(
            f"{truth.size} truth labels for {pl_set.total_samples} samples"
        )
    if pl_set.total_samples == 0:
        raise InvalidArgumentError("empty sample set")
    proportion = pl_set.n_assigned / pl_set.total_samples
    if pl_set.n_assigned == 0:
        return proportion, math.nan
    idx = pl_set.labeled_indices()
    correct = int(np.sum(pl_set.labels_for(idx) == truth[idx]))
    return proportion, correct / pl_set.n_assigned


def save_pseudolabels_csv(pl_set, path, sample_ids=None):
    """Write assignments as CSV rows: sample_id, class, provenance."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "class", "provenance"])
        for i in sorted(pl_set.assignments):
            cls, prov = pl_set.assignments[i]
            sid = sample_ids[i] if sample_ids is not None else i
            writer.writerow([sid, cls, prov])
