from .losses import (
    ABLATION_GRID,
    LossConfig,
    StudentOutputs,
    bas_loss,
    seg_bce,
    total_loss,
    weighted_boundary_ce,
)
from .student import ReferenceStudent, StudentModel, reference_student
from .train import (
    CheckpointRef,
    EpochRecord,
    TrainConfig,
    TrainHistory,
    load_checkpoint,
    select_best_checkpoint,
    train_student,
)

__all__ = [
    "ABLATION_GRID", "LossConfig", "StudentOutputs", "bas_loss", "seg_bce", "total_loss",
    "weighted_boundary_ce", "ReferenceStudent", "StudentModel", "reference_student",
    "CheckpointRef", "EpochRecord", "TrainConfig", "TrainHistory", "load_checkpoint",
    "select_best_checkpoint", "train_student",
]
