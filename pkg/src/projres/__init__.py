"""Projection-residual membership inference on a simulated federated fine-tuning setup."""
from .attacks import (ATTACKS, FTA, Cosine, FedLoss, FedMIA, GradientDiff, ProjRes, ScoreDiff,
                      ScoreRatio, draw_evaluation_pairs, evaluate_attack, make_attack,
                      projres_decide, projres_score)
from .config import ExperimentConfig
from .defenses import DefenseConfig, apply_defense, dp_transform, gp_transform
from .exceptions import (DegenerateSpanWarning, InsufficientPopulationError, NeedsHistoryError,
                         SingularSystemError, UndefinedSimilarityError, ValidationError)
from .federation import FederationConfig, FedSGD, TrainingTrace, run_training
from .linalg import Subspace, SubspaceProjector, project_onto, qr_decompose, span
from .metrics import acc_fpr_at_threshold, roc_and_auc
from .model import BackboneConfig, FedModel, ModuleSpec, build_backbone
from .theory import Regime, classify_regime, empirical_boundary_scan

__all__ = [
    "ATTACKS", "FTA", "BackboneConfig", "Cosine", "DefenseConfig", "DegenerateSpanWarning",
    "ExperimentConfig", "FedLoss", "FedMIA", "FedModel", "FedSGD", "FederationConfig",
    "GradientDiff", "InsufficientPopulationError", "ModuleSpec", "NeedsHistoryError", "ProjRes",
    "Regime", "ScoreDiff", "ScoreRatio", "SingularSystemError", "Subspace", "SubspaceProjector",
    "TrainingTrace", "UndefinedSimilarityError", "ValidationError", "acc_fpr_at_threshold",
    "apply_defense", "build_backbone", "classify_regime", "dp_transform", "draw_evaluation_pairs",
    "empirical_boundary_scan", "evaluate_attack", "gp_transform", "make_attack", "project_onto",
    "projres_decide", "projres_score", "qr_decompose", "roc_and_auc", "run_training", "span",
]
