"""Tools package for genscl."""

from .data import Dataset, LabeledExample, generate_synthetic, load_dataset, save_dataset
from .loss import ProjectedBatch, contrastive_loss, genscl_loss, kd_genscl_loss, supcon_loss
from .runners import (
    DatasetRunner,
    DiagnosticsRunner,
    EvaluationRunner,
    GradcheckRunner,
    TrainingRunner,
    get_dataset_runner,
    get_diagnostics_runner,
    get_evaluation_runner,
    get_gradcheck_runner,
    get_training_runner,
)
from .trainer import TrainResult, linear_eval, train_contrastive, train_teacher

__all__ = [
    'Dataset',
    'LabeledExample',
    'generate_synthetic',
    'load_dataset',
    'save_dataset',
    'ProjectedBatch',
    'contrastive_loss',
    'genscl_loss',
    'kd_genscl_loss',
    'supcon_loss',
    'DatasetRunner',
    'DiagnosticsRunner',
    'EvaluationRunner',
    'GradcheckRunner',
    'TrainingRunner',
    'get_dataset_runner',
    'get_diagnostics_runner',
    'get_evaluation_runner',
    'get_gradcheck_runner',
    'get_training_runner',
    'TrainResult',
    'linear_eval',
    'train_contrastive',
    'train_teacher',
]
