"""Multi-task adversarial attacks against embedding-based authentication.

Submodules: ``autodiff`` (reverse-mode tape), ``dataset`` (synthetic
identities, pairing), ``embedder`` (models, defenses, calibration),
``metrics``, ``attack``, ``scenarios``, ``geometry`` and ``cli``.
"""

__version__ = "0.1.0"

from .attack import AdversarialResult, AttackConfig, StopReason, TargetSet, fgsm, mtadv, pgd
from .dataset import IdentityDataset, generate_dataset, make_pairs
from .embedder import (
    DefenseTransform,
    EmbeddingModel,
    SystemProfile,
    TrainConfig,
    calibrate_system,
    embed,
    init_model,
    load_model,
    save_model,
    train_model,
)
from .metrics import DistanceKind, calibrate_eer, dissimilarity, roc, ssim
from .scenarios import ScenarioReport, ScenarioSpec, run_scenario

__all__ = [
    "AdversarialResult",
    "AttackConfig",
    "StopReason",
    "TargetSet",
    "fgsm",
    "mtadv",
    "pgd",
    "IdentityDataset",
    "generate_dataset",
    "make_pairs",
    "DefenseTransform",
    "EmbeddingModel",
    "SystemProfile",
    "TrainConfig",
    "calibrate_system",
    "embed",
    "init_model",
    "load_model",
    "save_model",
    "train_model",
    "DistanceKind",
    "calibrate_eer",
    "dissimilarity",
    "roc",
    "ssim",
    "ScenarioReport",
    "ScenarioSpec",
    "run_scenario",
]
