"""Training, evaluation, adaptation and sweep orchestration."""

from allconv_emg.experiment.adaptation import MODES, AdaptConfig, adapt, prepare_adaptation
from allconv_emg.experiment.evaluation import (
    EvalResult,
    confusion_matrix,
    evaluate_per_frame,
    evaluate_predictions,
    evaluate_voted,
    majority_vote,
)
from allconv_emg.experiment.frames import FrameSet, ImageCache
from allconv_emg.experiment.runner import (
    EvalReport,
    ExperimentSpec,
    FoldOutcome,
    improvement,
    pretrain,
    result_rows,
    run_experiment,
    run_fold,
)
from allconv_emg.experiment.sweep import EPOCH_CHECKPOINTS, SweepTable, best_low_k, transfusion_sweep
from allconv_emg.experiment.training import EarlyStopping, EpochLog, TrainConfig, infer_probabilities, train

__all__ = [
    "EPOCH_CHECKPOINTS",
    "MODES",
    "AdaptConfig",
    "EarlyStopping",
    "EpochLog",
    "EvalReport",
    "EvalResult",
    "ExperimentSpec",
    "FoldOutcome",
    "FrameSet",
    "ImageCache",
    "SweepTable",
    "TrainConfig",
    "adapt",
    "best_low_k",
    "confusion_matrix",
    "evaluate_per_frame",
    "evaluate_predictions",
    "evaluate_voted",
    "improvement",
    "infer_probabilities",
    "majority_vote",
    "prepare_adaptation",
    "pretrain",
    "result_rows",
    "run_experiment",
    "run_fold",
    "train",
    "transfusion_sweep",
]
