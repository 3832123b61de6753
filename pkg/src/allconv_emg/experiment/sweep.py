"""Convergence speed of weight transfusion at different depths."""

from dataclasses import dataclass, field

import numpy as np

from allconv_emg.experiment.adaptation import AdaptConfig, adapt
from allconv_emg.experiment.evaluation import evaluate_predictions
from allconv_emg.experiment.frames import FrameSet
from allconv_emg.experiment.training import infer_probabilities
from allconv_emg.model import N_CONV, predict

EPOCH_CHECKPOINTS = (8, 16, 32, 46, 64, 100)


@dataclass
class SweepTable:
    """Accuracy per transfusion depth (rows) and epoch checkpoint (columns)."""

    k_values: tuple
    epochs: tuple
    window: int
    voted: dict = field(default_factory=dict)  # (k, epoch) -> voted accuracy
    per_frame: dict = field(default_factory=dict)  # (k, epoch) -> per-frame accuracy

    def column(self, epoch: int, voted: bool = True) -> dict:
        table = self.voted if voted else self.per_frame
        return {k: table[(k, epoch)] for k in self.k_values}

    def rows(self) -> list[dict]:
        out = []
        for k in self.k_values:
            row = {"k": k, "label": "scratch" if k == 0 else ("full_transfer" if k == N_CONV else f"conv1-{k}")}
            for e in self.epochs:
                row[f"voted@{e}"] = self.voted[(k, e)]
                row[f"per_frame@{e}"] = self.per_frame[(k, e)]
            out.append(row)
        return out

    def epochs_to_fraction(self, k: int, fraction: float = 0.95, voted: bool = True) -> int | None:
        """First checkpoint reaching ``fraction`` of row ``k``'s final accuracy."""
        table = self.voted if voted else self.per_frame
        final = table[(k, self.epochs[-1])]
        for e in self.epochs:
            if table[(k, e)] >= fraction * final:
                return e
        return None


def transfusion_sweep(
    pretrained,
    adaptation_frames: FrameSet,
    test_frames: FrameSet,
    *,
    k_values=tuple(range(N_CONV + 1)),
    epochs=EPOCH_CHECKPOINTS,
    window: int = 150,
    base: AdaptConfig | None = None,
    forbidden_keys: frozenset = frozenset(),
) -> SweepTable:
    """Adapt with transfusion(k) for each k and score the test set at each epoch checkpoint."""
    base = base or AdaptConfig(mode="transfusion", k=0)
    epochs = tuple(sorted(epochs))
    table = SweepTable(tuple(k_values), epochs, window)

    for k in table.k_values:

        def record(epoch, model, k=k):
            if epoch in epochs:
                preds = predict(infer_probabilities(model, test_frames.images))
                res = evaluate_predictions(preds, test_frames, model.gestures, [window])
                table.voted[(k, epoch)] = res.voted_accuracy[window]
                table.per_frame[(k, epoch)] = res.per_frame_accuracy

        cfg = AdaptConfig(
            mode="transfusion",
            k=k,
            epochs=epochs[-1],
            budget=base.budget,
            learning_rate=base.learning_rate,
            batch_size=base.batch_size,
            seed=base.seed,
            train_stride=base.train_stride,
        )
        adapt(pretrained, adaptation_frames, cfg, forbidden_keys=forbidden_keys, on_epoch_end=record, tag=f"sweep-k{k}")
        missing = [e for e in epochs if (k, e) not in table.voted]
        if missing:
            raise RuntimeError(f"sweep k={k} never reached epochs {missing}")
    return table


def best_low_k(table: SweepTable, epoch: int, ks=(1, 2, 3), voted: bool = True) -> float:
    col = table.column(epoch, voted)
    return float(np.max([col[k] for k in ks if k in col]))
