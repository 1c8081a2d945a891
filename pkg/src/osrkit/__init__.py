"""Open-set recognition toolkit: self-supervised pre-training, fine-tuning,
prototype-based unknown rejection, and the full evaluation protocol."""

from .dataio import (
    ImageBatch,
    OpenSetSplit,
    RawDataset,
    load_cifar10,
    load_dataset,
    load_idx,
    make_open_set_split,
)
from .evaluate import (
    EvalReport,
    auc_at_fpr,
    evaluate_model,
    f1_decomposition,
    openness,
    openness_sweep,
    roc_curve,
    run_experiment,
    welch_t_test,
)
from .losses import cross_entropy, dtae_loss, ii_loss, rotnet_loss, triplet_loss
from .osr import class_probability, outlier_score, predict
from .train import (
    PrototypeSet,
    TrainConfig,
    compute_prototypes,
    finetune,
    pretrain,
)
from .transforms import expand_batch, rotate90

__version__ = "0.1.0"

__all__ = [
    "ImageBatch", "OpenSetSplit", "RawDataset", "load_cifar10", "load_dataset",
    "load_idx", "make_open_set_split", "EvalReport", "auc_at_fpr",
    "evaluate_model", "f1_decomposition", "openness", "openness_sweep",
    "roc_curve", "run_experiment", "welch_t_test", "cross_entropy", "dtae_loss",
    "ii_loss", "rotnet_loss", "triplet_loss", "class_probability",
    "outlier_score", "predict", "PrototypeSet", "TrainConfig",
    "compute_prototypes", "finetune", "pretrain", "expand_batch", "rotate90",
]
