"""Episodic co-learning driver.

One episode: forward both branches on every target sample, fuse their
predictions into pseudolabels, finetune the adaptation extractor on the
pseudolabeled subset for one shuffled minibatch pass, then refresh the
centroid classifier with the updated adaptation probabilities.  The
linear classifier and the feature bank stay frozen throughout.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .featurebank import DEFAULT_TEMPERATURE, compute_centroids, ncc_predict
from .model import SgdState, cross_entropy_grad, forward_batch, sgd_step
from .numerics import (
    DivergenceError,
    InvalidArgumentError,
    make_rng,
    softmax_rows,
)
from .pseudolabel import (
    MATCH_OR_CONF,
    Scheme,
    build_pseudolabel_set,
    pseudolabel_metrics,
)

CENTROIDS_FROM_ALL = "all"
CENTROIDS_FROM_PSEUDOLABELED = "pseudolabeled"


@dataclass
class ColearnConfig:
    """Every knob of the adaptation loop."""

    scheme: str = MATCH_OR_CONF
    gamma: float = 0.5
    episodes: int = 15
    batch_size: int = 50
    lr: float = 0.01
    lr_after_decay: float = 0.001
    decay_episode: int = 10
    momentum: float = 0.9
    temperature: float = DEFAULT_TEMPERATURE
    centroid_subset: str = CENTROIDS_FROM_ALL
    centroid_iterations: int = 1
    loss_coefficient: float = 1.0
    steps_per_episode: int = None  # None = one full pass over the labeled subset
    conf_before_sharpening: bool = False
    seed: int = 7

    def __post_init__(self):
        Scheme(self.scheme, self.gamma)  # validates both
        if self.episodes < 1:
            raise InvalidArgumentError("episodes must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.lr <= 0 or self.lr_after_decay <= 0:
            raise InvalidArgumentError("learning rates must be positive")
        if self.decay_episode < 0:
            raise InvalidArgumentError("decay_episode must be >= 0")
        if self.centroid_subset not in (CENTROIDS_FROM_ALL, CENTROIDS_FROM_PSEUDOLABELED):
            raise InvalidArgumentError(
                f"centroid_subset must be 'all' or 'pseudolabeled', "
                f"got {self.centroid_subset!r}"
            )
        if self.centroid_iterations < 1:
            raise InvalidArgumentError("centroid_iterations must be >= 1")
        if self.loss_coefficient < 0:
            raise InvalidArgumentError("loss_coefficient must be >= 0")
        if self.steps_per_episode is not None and self.steps_per_episode < 1:
            raise InvalidArgumentError("steps_per_episode must be >= 1 when set")

    def learning_rate_for(self, episode):
        """Hard step decay: episodes 1..decay_episode run at lr, later ones decayed."""
        return self.lr if episode <= self.decay_episode else self.lr_after_decay


@dataclass
class EpisodeRecord:
    episode: int
    pseudolabel_proportion: float
    pseudolabel_accuracy: float  # NaN without truth or with an empty set
    adapt_accuracy: float  # NaN without truth
    pretrained_accuracy: float  # NaN without truth
    mean_loss: float  # summed loss / labeled samples; NaN if no steps ran

    def to_json_dict(self):
        def clean(v):
            return None if (isinstance(v, float) and math.isnan(v)) else v

        return {
            "episode": self.episode,
            "pseudolabel_proportion": self.pseudolabel_proportion,
            "pseudolabel_accuracy": clean(self.pseudolabel_accuracy),
            "adapt_accuracy": clean(self.adapt_accuracy),
            "pretrained_accuracy": clean(self.pretrained_accuracy),
            "mean_loss": clean(self.mean_loss),
        }

    def to_json_line(self):
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, d):
        def restore(v):
            return math.nan if v is None else v

        return cls(
            episode=d["episode"],
            pseudolabel_proportion=d["pseudolabel_proportion"],
            pseudolabel_accuracy=restore(d["pseudolabel_accuracy"]),
            adapt_accuracy=restore(d["adapt_accuracy"]),
            pretrained_accuracy=restore(d["pretrained_accuracy"]),
            mean_loss=restore(d["mean_loss"]),
        )


@dataclass
class ColearnResult:
    model: object
    classifier: object
    records: list


@dataclass
class ColearnSession:
    """Single-writer adaptation session; episodes run sequentially."""

    cfg: ColearnConfig
    model: object
    bank: object
    inputs: np.ndarray
    truth: np.ndarray = None
    centroid_clf: object = None
    opt: SgdState = None
    rng: object = None
    records: list = field(default_factory=list)
    source_classifier_bytes: bytes = None

    @property
    def next_episode(self):
        return len(self.records) + 1

    def run_episode(self):
        return run_episode(self)

    def run(self, metrics_stream=None):
        return run(self, metrics_stream)


def initialize(source_model, bank, target_inputs, cfg, truth=None):
    """Set up both branches.

    The adaptation branch is a copy of the source model with its
    classifier frozen.  The centroid classifier starts from the source
    model's softmax probabilities over every target sample.
    """
    x = np.ascontiguousarray(target_inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != bank.n_samples:
        raise InvalidArgumentError(
            f"target inputs ({x.shape}) must align with bank rows ({bank.n_samples})"
        )
    if x.shape[1] != source_model.input_dim:
        raise InvalidArgumentError(
            f"input width {x.shape[1]} != model input_dim {source_model.input_dim}"
        )
    if truth is not None:
        truth = np.asarray(truth, dtype=np.int64)
        if truth.shape != (x.shape[0],):
            raise InvalidArgumentError("truth length does not match inputs")

    model = source_model.copy(frozen=True)
    _, _, probs = forward_batch(model, x)
    clf = compute_centroids(
        bank,
        probs,
        subset=None,  # initialization always uses every sample
        iterations=cfg.centroid_iterations,
        temperature=cfg.temperature,
    )
    return ColearnSession(
        cfg=cfg,
        model=model,
        bank=bank,
        inputs=x,
        truth=truth,
        centroid_clf=clf,
        opt=SgdState.for_model(model, cfg.lr, cfg.momentum),
        rng=make_rng(cfg.seed),
        source_classifier_bytes=model.classifier.param_bytes(),
    )


def _pretrained_probs(session):
    """Sharpened branch probabilities plus the confidence vector to fuse on."""
    logits, probs = ncc_predict(session.centroid_clf, session.bank)
    if session.cfg.conf_before_sharpening:
        conf = softmax_rows(logits, 1.0).max(axis=1)
        return probs, conf
    return probs, None


def run_episode(session):
    """One co-learning episode; appends and returns its record."""
    cfg = session.cfg
    episode = session.next_episode
    lr = cfg.learning_rate_for(episode)

    # pre-update forwards of both branches drive pseudolabeling
    _, _, adapt_probs = forward_batch(session.model, session.inputs)
    pre_probs, pre_conf = _pretrained_probs(session)
    pl_set = build_pseudolabel_set(
        Scheme(cfg.scheme, cfg.gamma), adapt_probs, pre_probs,
        pretrained_confidence=pre_conf,
    )

    total_loss = 0.0
    steps = 0
    if pl_set.n_assigned > 0:
        idx = pl_set.labeled_indices()
        labels = pl_set.labels_for(idx)
        opt = SgdState(lr, cfg.momentum,
                       session.opt.velocity_w, session.opt.velocity_b)
        if cfg.steps_per_episode is None:
            order = session.rng.permutation(idx.size)
            starts = range(0, idx.size, cfg.batch_size)
            batches = [order[s : s + cfg.batch_size] for s in starts]
        else:
            batches = []
            while len(batches) < cfg.steps_per_episode:
                order = session.rng.permutation(idx.size)
                for s in range(0, idx.size, cfg.batch_size):
                    batches.append(order[s : s + cfg.batch_size])
                    if len(batches) == cfg.steps_per_episode:
                        break
        model = session.model
        c = cfg.loss_coefficient
        for batch in batches:
            sel = idx[batch]
            try:
                loss, grads = cross_entropy_grad(
                    model, session.inputs[sel], labels[batch])
                if c != 1.0:
                    loss = c * loss
                    grads = ([c * g for g in grads[0]], [c * g for g in grads[1]])
                if not np.isfinite(loss):
                    raise DivergenceError(f"adaptation diverged, loss={loss}")
                model, opt = sgd_step(model, grads, opt)
            except InvalidArgumentError as e:
                if "non-finite" in str(e):
                    raise DivergenceError(f"adaptation diverged: {e}") from None
                raise
            total_loss += loss
            steps += 1
        session.model = model
        session.opt = opt

    # centroid refresh uses the post-update adaptation probabilities
    _, _, post_probs = forward_batch(session.model, session.inputs)
    subset = None
    if cfg.centroid_subset == CENTROIDS_FROM_PSEUDOLABELED and pl_set.n_assigned > 0:
        subset = np.zeros(session.bank.n_samples, dtype=bool)
        subset[pl_set.labeled_indices()] = True
    session.centroid_clf = compute_centroids(
        session.bank,
        post_probs,
        subset=subset,
        iterations=cfg.centroid_iterations,
        temperature=cfg.temperature,
    )

    if session.truth is not None:
        proportion, pl_acc = pseudolabel_metrics(pl_set, session.truth)
        adapt_acc = float(np.mean(post_probs.argmax(axis=1) == session.truth))
        _, pretrained_probs = ncc_predict(session.centroid_clf, session.bank)
        pre_acc = float(np.mean(pretrained_probs.argmax(axis=1) == session.truth))
    else:
        proportion = pl_set.n_assigned / pl_set.total_samples
        pl_acc = adapt_acc = pre_acc = math.nan

    record = EpisodeRecord(
        episode=episode,
        pseudolabel_proportion=proportion,
        pseudolabel_accuracy=pl_acc,
        adapt_accuracy=adapt_acc,
        pretrained_accuracy=pre_acc,
        mean_loss=(total_loss / pl_set.n_assigned) if steps else math.nan,
    )
    session.records.append(record)
    return record


def run(session, metrics_stream=None):
    """Run the configured number of episodes from a fresh session.

    ``metrics_stream`` is an optional text file object; each record is
    written as one JSON line as it is produced.
    """
    if session.records:
        raise InvalidArgumentError("session has already run episodes")
    for _ in range(session.cfg.episodes):
        record = run_episode(session)
        if metrics_stream is not None:
            metrics_stream.write(record.to_json_line() + "\n")
    assert session.model.classifier.param_bytes() == session.source_classifier_bytes
    return ColearnResult(
        model=session.model,
        classifier=session.centroid_clf,
        records=list(session.records),
    )


def colearn_loss_term(model, pl_set, inputs, coefficient=1.0):
    """Scaled pseudolabel cross-entropy, composable with an external objective.

    Returns (coefficient * loss, coefficient * gradients) over the labeled
    subset; a zero coefficient yields exactly zero loss and gradients.
    """
    if coefficient < 0:
        raise InvalidArgumentError("coefficient must be >= 0")
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    idx = pl_set.labeled_indices()
    loss, (gw, gb) = cross_entropy_grad(
        model, x[idx] if idx.size else x[:0], pl_set.labels_for(idx)
    )
    c = float(coefficient)
    return c * loss, ([c * g for g in gw], [c * g for g in gb])


def load_metrics_jsonl(path):
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(EpisodeRecord.from_json_dict(json.loads(line)))
    return records
