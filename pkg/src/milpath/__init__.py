"""Attention-based multiple instance learning on whole-slide image features."""
from .aggregators import Abmil, ClamSb, Dsmil, Dtfd, build_model, load_checkpoint, save_checkpoint
from .bagstore import Bag, Manifest, TaskSpec, generate_synthetic, make_folds, read_manifest
from .evalmetrics import MetricsReport, auc_binary, auc_multiclass, evaluate_probs
from .trainer import TrainConfig, run_cv, train_one, transfer_finetune

__version__ = "0.1.0"

__all__ = [
    "Abmil", "ClamSb", "Dsmil", "Dtfd", "build_model", "load_checkpoint", "save_checkpoint",
    "Bag", "Manifest", "TaskSpec", "generate_synthetic", "make_folds", "read_manifest",
    "MetricsReport", "auc_binary", "auc_multiclass", "evaluate_probs",
    "TrainConfig", "run_cv", "train_one", "transfer_finetune",
]
