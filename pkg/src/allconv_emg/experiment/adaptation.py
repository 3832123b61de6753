"""Supervised domain adaptation of a pretrained network."""

from dataclasses import asdict, dataclass

import numpy as np

from allconv_emg.data.splits import budget_trials
from allconv_emg.errors import ConfigurationError, ContractViolation
from allconv_emg.experiment.frames import FrameSet
from allconv_emg.experiment.training import EpochLog, TrainConfig, train
from allconv_emg.model import (
    N_CONV,
    AllConvNet,
    Checkpoint,
    build_allconvnet,
    clone,
    freeze_for_adaptation,
    transfuse,
    trim_slim,
)
from allconv_emg.nn.rng import RngStream

MODES = ("scratch", "finetune_top", "feature_extract_full", "transfusion", "slim")


@dataclass
class AdaptConfig:
    mode: str = "finetune_top"
    k: int | None = None  # transfusion depth
    epochs: int = 100
    budget: str = "T5"
    learning_rate: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    train_stride: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown adaptation mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "transfusion" and (self.k is None or not 0 <= self.k <= N_CONV):
            raise ConfigurationError(f"transfusion needs k in 0..{N_CONV}, got {self.k}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        budget_trials(self.budget)

    @property
    def label(self) -> str:
        return f"transfusion{self.k}" if self.mode == "transfusion" else self.mode

    def train_config(self, dropout_p: float) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=max(self.epochs, 1),
            patience=1,
            dropout_p=dropout_p,
            seed=self.seed,
            train_stride=self.train_stride,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def prepare_adaptation(pretrained, config: AdaptConfig) -> AllConvNet:
    """Apply the mode's freeze, transfusion or trim transform; no training."""
    source = AllConvNet.from_checkpoint(pretrained) if isinstance(pretrained, Checkpoint) else pretrained
    rng = RngStream(config.seed, f"adapt/{config.label}")
    if config.mode == "scratch":
        return build_allconvnet(source.gestures, rng=rng, dropout_p=source.dropout_p, elu_alpha=source.elu_alpha)
    if config.mode in ("finetune_top", "feature_extract_full"):
        model = clone(source)
        freeze_for_adaptation(model, config.mode)
        return model
    if config.mode == "transfusion":
        model, _ = transfuse(source, config.k, rng)
        return model
    model, _ = trim_slim(source, rng)
    return model


def adapt(
    pretrained,
    adaptation_frames: FrameSet,
    config: AdaptConfig,
    *,
    forbidden_keys: frozenset = frozenset(),
    on_epoch_end=None,
    tag: str = "",
) -> tuple[AllConvNet, Checkpoint, EpochLog]:
    """Transform ``pretrained`` per ``config.mode`` and train it on the target frames.

    Runs a fixed number of epochs without early stopping. Every frozen
    tensor is verified bit-identical afterwards.
    """
    if len(adaptation_frames) == 0:
        raise ConfigurationError("adaptation set is empty")
    model = prepare_adaptation(pretrained, config)
    frozen_before = {p.name: p.value.copy() for p in model.parameters() if not p.trainable}
    frozen_stats = {
        k: v.copy()
        for bn in [model.input_bn] + [b.bn for b in model.blocks]
        if bn.frozen
        for k, v in bn.buffers().items()
    }
    frames = adaptation_frames.subsample(config.train_stride)
    log = EpochLog()
    if config.epochs > 0:
        tc = config.train_config(model.dropout_p)
        _, log = train(
            model, frames, None, tc, early_stopping=False, forbidden_keys=forbidden_keys, on_epoch_end=on_epoch_end, tag=tag
        )
    params = model.named_parameters()
    buffers = model.buffers()
    for name, before in frozen_before.items():
        if not np.array_equal(params[name].value, before):
            raise ContractViolation(f"frozen parameter {name} changed during adaptation")
    for name, before in frozen_stats.items():
        if not np.array_equal(buffers[name], before):
            raise ContractViolation(f"frozen running statistic {name} changed during adaptation")
    ckpt = model.to_checkpoint(seed=config.seed, epoch=config.epochs, tag=tag)
    return model, ckpt, log
