"""Desk-scale toolkit for training and evaluating fairness-preserving
forgery detectors: disentangling encoder/decoder, subgroup-margin and
tail-risk losses, sharpness-aware optimization, and a fairness metric suite.
"""

from .autodiff import (
    GraphError,
    ParameterStore,
    Tensor,
    evaluate_with_gradients,
    finite_difference_gradient,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .data import (
    Dataset,
    DatasetError,
    DatasetSpec,
    Sample,
    SubgroupStats,
    generate_synthetic,
    load_csv,
    sample_pairs,
    save_csv,
    subgroup_stats,
)
from .losses import (
    FairnessSolution,
    LossConfig,
    LossError,
    MarginTable,
    classification_loss,
    compute_margins,
    contrastive_loss,
    cross_entropy,
    cvar_inner,
    cvar_oracle,
    disentanglement_loss,
    fairness_loss,
    margin_loss,
    reconstruction_loss,
)
from .metrics import (
    MetricsError,
    MetricsReport,
    PredictionRecord,
    auc,
    build_report,
    f_dp,
    f_fpr,
    f_meo,
    f_oae,
    make_records,
    metric_oracle,
)
from .model import Detector, DisentangledFeatures, ModelConfig, adain_fuse
from .training import (
    TrainingError,
    TrainingHistory,
    TrainRunConfig,
    loss_landscape_slice,
    mean_loss_increase,
    predict_scores,
    sam_perturbation,
    train,
    training_step,
)

__version__ = "0.1.0"
