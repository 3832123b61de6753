"""Per-frame and majority-voted accuracy."""

import logging
from dataclasses import dataclass, field

import numpy as np

from allconv_emg.errors import ConfigurationError
from allconv_emg.experiment.frames import FrameSet
from allconv_emg.experiment.training import infer_probabilities
from allconv_emg.model import AllConvNet, predict

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    per_frame_accuracy: float
    confusion: np.ndarray  # (G, G), rows = true class, cols = predicted
    voted_accuracy: dict = field(default_factory=dict)  # window -> accuracy
    voted_frames: dict = field(default_factory=dict)  # window -> eligible frame count
    fold_id: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.confusion.sum())


def confusion_matrix(labels: np.ndarray, predictions: np.ndarray, gestures: int) -> np.ndarray:
    cm = np.zeros((gestures, gestures), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def majority_vote(predictions, window: int, classes: int | None = None) -> np.ndarray:
    """Trailing-window mode of a single trial's prediction stream.

    Returns ``len(predictions) - window + 1`` votes; entry ``i`` covers
    frames ``i .. i + window - 1``. Ties go to the lowest class index. A
    window longer than the stream yields no votes.
    """
    if window < 1:
        raise ConfigurationError(f"voting window must be >= 1, got {window}")
    p = np.asarray(predictions, dtype=np.int64)
    if p.size and p.min() < 0:
        raise ConfigurationError("predictions must be non-negative class indices")
    if window > p.size:
        log.info("segment of %d frames shorter than window %d: excluded", p.size, window)
        return np.zeros(0, dtype=np.int64)
    g = int(p.max()) + 1 if classes is None else classes
    counts = np.zeros((p.size + 1, g), dtype=np.int64)
    np.add.at(counts, (np.arange(1, p.size + 1), p), 1)
    np.cumsum(counts, axis=0, out=counts)
    window_counts = counts[window:] - counts[:-window]
    return np.argmax(window_counts, axis=1)


def evaluate_per_frame(model: AllConvNet, frames: FrameSet, fold_id: str = "") -> EvalResult:
    return evaluate_predictions(predict(infer_probabilities(model, frames.images)), frames, model.gestures, (), fold_id)


def evaluate_predictions(
    predictions: np.ndarray, frames: FrameSet, gestures: int, windows=(), fold_id: str = ""
) -> EvalResult:
    """Score precomputed per-frame predictions, voting within each trial segment."""
    predictions = np.asarray(predictions)
    cm = confusion_matrix(frames.labels, predictions, gestures)
    per_frame = float(np.trace(cm) / cm.sum()) if cm.sum() else float("nan")
    result = EvalResult(per_frame, cm, fold_id=fold_id)
    for n in windows:
        correct = total = 0
        for a, b in frames.segments():
            votes = majority_vote(predictions[a:b], n, gestures)
            correct += int(np.sum(votes == frames.labels[a + n - 1 : b]))
            total += votes.size
        result.voted_accuracy[int(n)] = correct / total if total else float("nan")
        result.voted_frames[int(n)] = total
    return result


def evaluate_voted(model: AllConvNet, frames: FrameSet, windows, fold_id: str = "") -> EvalResult:
    """Per-frame accuracy plus voted accuracy for every window size."""
    preds = predict(infer_probabilities(model, frames.images))
    return evaluate_predictions(preds, frames, model.gestures, windows, fold_id)
