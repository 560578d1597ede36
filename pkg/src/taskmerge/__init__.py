"""Task-vector merging with distillation-based conditioning."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetSpec, LabeledSplit, TaskData, UnlabeledSet, gen_synthetic_tasks, load_idx
from .distac import KDConfig, choose_kappa_norm_match, distac_condition
from .errors import DomainError, NumericError, TaskMergeError, TrainingError
from .losses import LossSpec
from .merging import METHODS, MergeConfig, TaskVector, compute_task_vector, merge, plan_merge, tune_lambda
from .metrics import EvalResult, accuracy, predictive_entropy, temperature_scale_fit
from .model import ModelSpec, ParamVector, forward_logits, init_params
from .report import report_emit
from .scenario import ScenarioConfig, run_grid, run_scenario
from .trainer import TrainConfig, finetune, pretrain, train_mtl

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "DatasetSpec", "DomainError", "EvalResult", "KDConfig", "LabeledSplit",
    "LossSpec", "METHODS", "MergeConfig", "ModelSpec", "NumericError", "ParamVector",
    "ScenarioConfig", "TaskData", "TaskMergeError", "TaskVector", "TrainConfig",
    "TrainingError", "UnlabeledSet", "accuracy", "choose_kappa_norm_match",
    "compute_task_vector", "distac_condition", "finetune", "forward_logits",
    "gen_synthetic_tasks", "init_params", "load_checkpoint", "load_idx", "merge",
    "plan_merge", "predictive_entropy", "pretrain", "report_emit", "run_grid",
    "run_scenario", "save_checkpoint", "temperature_scale_fit", "train_mtl", "tune_lambda",
]
