"""Source-free domain adaptation by co-learning with a frozen feature bank.

A source-trained classifier is adapted to an unlabeled target domain by
pairing it with a second, frozen branch: a bank of pre-computed features
classified by a weighted nearest-centroid head.  Each episode the two
branches fuse their predictions into pseudolabels, the adaptation
model's feature extractor is finetuned on them, and the centroid head is
re-estimated from the updated predictions.
"""

from .colearn import (
    ColearnConfig,
    ColearnResult,
    ColearnSession,
    EpisodeRecord,
    colearn_loss_term,
    initialize,
    load_metrics_jsonl,
    run,
    run_episode,
)
from .data import (
    Dataset,
    SourceTrainConfig,
    SyntheticSpec,
    generate,
    load_dataset,
    load_truth_csv,
    save_dataset,
    save_truth_csv,
    train_source,
)
from .evaluate import (
    ConfidenceHistogram,
    ConfusionMatrix,
    accuracy,
    confidence_histogram,
    confusion,
    evaluate_model,
    mean_per_class_accuracy,
    per_class_accuracy,
    target_compatibility_ratio,
)
from .featurebank import (
    CentroidClassifier,
    FeatureBank,
    compute_centroids,
    load_bank,
    load_bank_csv,
    ncc_predict,
    oracle_ncc_accuracy,
    save_bank,
    save_bank_csv,
)
from .model import (
    AdaptationModel,
    LinearClassifier,
    MlpExtractor,
    SgdState,
    cross_entropy_grad,
    forward,
    forward_batch,
    init_classifier,
    init_extractor,
    load_model,
    save_model,
    sgd_step,
)
from .numerics import (
    CoadaptError,
    DegenerateInputError,
    DivergenceError,
    FormatError,
    InvalidArgumentError,
    argmax,
    cosine_similarity,
    l2_normalize,
    make_rng,
    softmax,
    softmax_rows,
)
from .pseudolabel import (
    BranchPrediction,
    PseudolabelSet,
    Scheme,
    build_pseudolabel_set,
    fuse,
    pseudolabel_metrics,
    save_pseudolabels_csv,
)

__version__ = "0.1.0"
