"""Mini-batch training with Adam and early stopping on validation loss."""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from allconv_emg.errors import ConfigurationError, ContractViolation, NumericalError
from allconv_emg.experiment.frames import FrameSet
from allconv_emg.model import AllConvNet, Checkpoint, predict
from allconv_emg.nn import functional as F
from allconv_emg.nn.optim import Adam
from allconv_emg.nn.rng import RngStream

log = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_p: float = 0.25
    seed: int = 0
    # desk-scale knobs: keep every n-th frame of each trial
    train_stride: int = 1
    val_stride: int = 1

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "epsilon", "train_stride", "val_stride"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience > self.max_epochs:
            raise ConfigurationError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 before any epoch ran
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def rows(self, include_time: bool = False) -> list[dict]:
        out = []
        for i in range(self.epochs):
            row = {
                "epoch": i + 1,
                "train_loss": self.train_loss[i],
                "val_loss": self.val_loss[i] if self.val_loss else float("nan"),
                "val_accuracy": self.val_accuracy[i] if self.val_accuracy else float("nan"),
                "best": int(i + 1 == self.best_epoch),
            }
            if include_time:
                row["wall_time"] = self.wall_time[i]
            out.append(row)
        return out


class EarlyStopping:
    """Stop once validation loss has failed to improve ``patience`` epochs in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for 1-based ``epoch``; returns True if it is a new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def infer_probabilities(model: AllConvNet, images: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    if images.shape[0] == 0:
        return np.zeros((0, model.gestures), np.float32)
    return np.concatenate([model.forward(images[i : i + batch], "infer") for i in range(0, images.shape[0], batch)])


def evaluate_loss(model: AllConvNet, frames: FrameSet) -> tuple[float, float]:
    """Mean cross-entropy and per-frame accuracy in infer mode."""
    probs = infer_probabilities(model, frames.images)
    loss, _ = F.cross_entropy(probs, frames.labels)
    acc = float(np.mean(predict(probs) == frames.labels))
    return loss, acc


def _offending_parameter(model: AllConvNet) -> str:
    for p in model.parameters():
        if not np.all(np.isfinite(p.value)):
            return f"{p.name} (value)"
        if not np.all(np.isfinite(p.grad)):
            return f"{p.name} (gradient)"
    return "none found"


def _check_leakage(frames: FrameSet, forbidden: frozenset) -> None:
    leaked = frames.key_set & forbidden
    if leaked:
        raise ContractViolation(f"training data contains held-out trials {sorted(leaked)[:3]}")


def optimizer_state(opt: Adam) -> dict:
    s = opt.state
    return {
        "lr": s.lr,
        "beta1": s.beta1,
        "beta2": s.beta2,
        "epsilon": s.epsilon,
        "t": s.t,
        "m": {k: v.copy() for k, v in s.m.items()},
        "v": {k: v.copy() for k, v in s.v.items()},
    }


def train(
    model: AllConvNet,
    train_frames: FrameSet,
    val_frames: FrameSet | None,
    config: TrainConfig,
    *,
    early_stopping: bool = True,
    forbidden_keys: frozenset = frozenset(),
    on_epoch_end=None,
    tag: str = "",
) -> tuple[Checkpoint, EpochLog]:
    """Train ``model`` in place and return the selected checkpoint with its log.

    With a validation set and ``early_stopping`` the best-validation-loss
    weights are restored into ``model`` and returned. Otherwise the weights
    after the last epoch are returned. ``forbidden_keys`` are trial keys that
    must never contribute to a gradient step. ``on_epoch_end(epoch, model)``
    runs after each epoch's validation.
    """
    if len(train_frames) < 2:
        raise ConfigurationError(f"need at least 2 training frames, got {len(train_frames)}")
    _check_leakage(train_frames, forbidden_keys)
    if val_frames is not None:
        _check_leakage(val_frames, forbidden_keys)
        if train_frames.key_set & val_frames.key_set and early_stopping:
            log.info("train/validation frames share trials (frame-level split)")
    rng = RngStream(config.seed, "train")
    opt = Adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.epsilon)
    stopper = EarlyStopping(config.patience)
    history = EpochLog()
    best_state, best_opt = model.state_dict(), optimizer_state(opt)
    use_val = val_frames is not None and len(val_frames) > 0
    n = len(train_frames)

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        order = rng.child(f"epoch{epoch}").permutation(n)
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            if idx.size < 2:
                continue  # batch norm needs two samples
            x, y = train_frames.images[idx], train_frames.labels[idx]
            opt.zero_grad()
            logits = model.logits(x, "train")
            if not np.all(np.isfinite(logits)):
                raise NumericalError(
                    f"{tag} epoch {epoch} batch {b}: non-finite loss; offending parameter {_offending_parameter(model)}"
                )
            probs = F.softmax(logits)
            loss, dlogits = F.cross_entropy(probs, y)
            model.backward(dlogits.astype(probs.dtype, copy=False))
            try:
                opt.step()
            except NumericalError as exc:
                raise NumericalError(f"{tag} epoch {epoch} batch {b}: {exc}") from exc
            total += loss * idx.size
            seen += idx.size
        history.train_loss.append(total / max(seen, 1))
        if use_val:
            vloss, vacc = evaluate_loss(model, val_frames)
            history.val_loss.append(vloss)
            history.val_accuracy.append(vacc)
            improved = stopper.update(epoch, vloss)
        else:
            improved = True
        if improved or not early_stopping:
            best_state, best_opt = model.state_dict(), optimizer_state(opt)
            history.best_epoch = epoch
        history.wall_time.append(time.perf_counter() - start)
        log.debug("%s epoch %d train %.4f val %s", tag, epoch, history.train_loss[-1], history.val_loss[-1:] or "-")
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
        if early_stopping and use_val and stopper.should_stop:
            history.stopped_early = True
            break

    if early_stopping and use_val:
        model.load_state_dict(best_state)
    ckpt = model.to_checkpoint(seed=config.seed, epoch=history.best_epoch, tag=tag, optimizer=best_opt)
    return ckpt, history
