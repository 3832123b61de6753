"""Labelled image sets assembled from trials, with trial identity per frame."""

import logging
from dataclasses import dataclass

import numpy as np

from allconv_emg.data.manifest import DatasetManifest
from allconv_emg.data.trialio import read_trial
from allconv_emg.errors import ConfigurationError
from allconv_emg.signal import BandstopFilter, RawTrial, design_bandstop, to_network_input, trial_to_images

log = logging.getLogger(__name__)


@dataclass
class FrameSet:
    """Network-ready frames. Frames of one trial are contiguous and in time order."""

    images: np.ndarray  # (N, 1, 16, 16) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    trial_index: np.ndarray  # (N,) int32, index into ``keys``
    keys: list  # trial keys (subject, session, gesture, trial)

    def __len__(self):
        return self.images.shape[0]

    @property
    def key_set(self) -> frozenset:
        return frozenset(self.keys)

    def segments(self):
        """``(start, stop)`` of every trial's contiguous run."""
        if len(self) == 0:
            return []
        edges = np.flatnonzero(np.diff(self.trial_index)) + 1
        starts = np.concatenate([[0], edges])
        stops = np.concatenate([edges, [len(self)]])
        return list(zip(starts.tolist(), stops.tolist()))

    def take(self, idx: np.ndarray) -> "FrameSet":
        """Subset by frame indices (kept in the given order)."""
        idx = np.asarray(idx)
        return FrameSet(self.images[idx], self.labels[idx], self.trial_index[idx], self.keys)

    def subsample(self, stride: int) -> "FrameSet":
        """Every ``stride``-th frame of each trial, counting from the trial's first frame."""
        if stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {stride}")
        if stride == 1:
            return self
        idx = np.concatenate([np.arange(a, b, stride) for a, b in self.segments()]) if len(self) else np.arange(0)
        return self.take(idx)

    @staticmethod
    def concat(sets: list["FrameSet"]) -> "FrameSet":
        keys, parts = [], []
        for s in sets:
            parts.append((s, len(keys)))
            keys.extend(s.keys)
        return FrameSet(
            np.concatenate([s.images for s, _ in parts]),
            np.concatenate([s.labels for s, _ in parts]),
            np.concatenate([s.trial_index + off for s, off in parts]).astype(np.int32),
            keys,
        )


class ImageCache:
    """Preprocessed images per trial key, computed once and shared across folds."""

    def __init__(self, loader, sample_rate: int = 1000, filt: BandstopFilter | None = None):
        self._loader = loader
        self._filter = filt or design_bandstop(float(sample_rate))
        self._images: dict = {}
        self._labels: dict = {}

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, filt: BandstopFilter | None = None) -> "ImageCache":
        def load(key):
            return read_trial(manifest.resolve(manifest.entry(key)))

        return cls(load, manifest.sample_rate, filt)

    @classmethod
    def from_trials(cls, trials, filt: BandstopFilter | None = None) -> "ImageCache":
        table = {t.key: t for t in trials}
        rates = {t.sample_rate for t in table.values()}
        if len(rates) > 1:
            raise ConfigurationError(f"mixed sample rates {sorted(rates)}")
        return cls(table.__getitem__, rates.pop() if rates else 1000, filt)

    def images(self, key: tuple) -> np.ndarray:
        if key not in self._images:
            trial: RawTrial = self._loader(key)
            seq = trial_to_images(trial, self._filter)
            self._images[key] = to_network_input(seq.images)
            self._labels[key] = seq.label
        return self._images[key]

    def frames(self, keys, stride: int = 1) -> FrameSet:
        keys = sorted(keys)
        if not keys:
            raise ConfigurationError("no trials selected")
        images, labels, index = [], [], []
        for i, key in enumerate(keys):
            img = self.images(key)[::stride]
            images.append(img)
            labels.append(np.full(img.shape[0], self._labels[key], dtype=np.int64))
            index.append(np.full(img.shape[0], i, dtype=np.int32))
        return FrameSet(np.concatenate(images), np.concatenate(labels), np.concatenate(index), keys)
