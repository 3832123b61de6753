"""Synthetic HD-sEMG generator for desk-scale checks.

Each gesture owns a spatial template built from a few Gaussian bumps on the
16x8 grid. Rows run along the forearm and the 8 columns wrap around it, so
bumps are elongated along rows and use circular distance across columns; a
column roll is then a rotation of the electrode sleeve. A subject applies a
smooth multiplicative warp to every template.
A frame is ``envelope(t) * template + noise + 50 Hz pickup``, where the
pickup amplitude varies per electrode. Session 2 sees
the clean part through a circular column roll and a per-channel gain drift.

The envelope depends only on (subject, gesture, trial), so with zero noise
and no interference session 2 equals ``gain * roll(session 1)`` frame by
frame.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from allconv_emg.data.manifest import DatasetManifest, TrialEntry
from allconv_emg.data.trialio import write_trial
from allconv_emg.errors import ConfigurationError
from allconv_emg.nn.rng import RngStream
from allconv_emg.signal import GRID_COLS, GRID_ROWS, MV_RANGE, RawTrial

POWERLINE_HZ = 50.0


@dataclass
class SyntheticConfig:
    gestures: int = 8
    subjects: list = field(default_factory=lambda: [1])
    sessions: list = field(default_factory=lambda: [1, 2])
    trials_per_gesture: int = 10
    frames_per_trial: int = 1000
    sample_rate: int = 1000
    noise_sigma: float = 0.197
    interference_mv: float = 2.0
    envelope_depth: float = 0.6
    envelope_hz: tuple = (0.5, 2.0)
    column_roll: int = 1
    gain_drift: float = 0.2
    subject_warp: float = 0.3
    bumps_per_gesture: tuple = (2, 3)
    bump_amplitude: tuple = (1.0, 2.0)
    bump_width_rows: float = 3.0
    bump_width_cols: float = 1.0
    dataset_tag: str = "synthetic"
    seed: int = 0
    templates: np.ndarray | None = None  # optional (G, 16, 8) override

    def __post_init__(self):
        if self.gestures < 2:
            raise ConfigurationError(f"need at least 2 gestures, got {self.gestures}")
        if not self.subjects or not self.sessions:
            raise ConfigurationError("subjects and sessions must be non-empty")
        if self.trials_per_gesture < 1 or self.frames_per_trial < 1:
            raise ConfigurationError("trials_per_gesture and frames_per_trial must be positive")
        if not 0 <= self.column_roll < GRID_COLS:
            raise ConfigurationError(f"column roll must be in [0, {GRID_COLS}), got {self.column_roll}")
        if not 0.0 <= self.envelope_depth < 1.0:
            raise ConfigurationError(f"envelope depth must be in [0, 1), got {self.envelope_depth}")
        if not 0.0 <= self.gain_drift < 1.0:
            raise ConfigurationError(f"gain drift must be in [0, 1), got {self.gain_drift}")
        if self.noise_sigma < 0 or self.interference_mv < 0 or self.subject_warp < 0:
            raise ConfigurationError("noise, interference and warp must be non-negative")
        if self.bump_width_rows <= 0 or self.bump_width_cols <= 0:
            raise ConfigurationError("bump widths must be positive")
        if self.templates is not None:
            self.templates = np.asarray(self.templates, dtype=np.float64)
            if self.templates.shape != (self.gestures, GRID_ROWS, GRID_COLS):
                raise ConfigurationError(
                    f"templates must be ({self.gestures}, 16, 8), got {self.templates.shape}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["envelope_hz"] = list(self.envelope_hz)
        d["bumps_per_gesture"] = list(self.bumps_per_gesture)
        d["bump_amplitude"] = list(self.bump_amplitude)
        d["templates"] = None if self.templates is None else self.templates.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown synthetic config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("envelope_hz", "bumps_per_gesture", "bump_amplitude"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SyntheticConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigurationError(f"{path}: cannot load synthetic config ({exc})") from exc


def make_templates(config: SyntheticConfig) -> np.ndarray:
    """Per-gesture (G, 16, 8) templates in mV, before subject warp."""
    if config.templates is not None:
        return config.templates.copy()
    rng = RngStream(config.seed, "templates")
    rows, cols = np.mgrid[0:GRID_ROWS, 0:GRID_COLS].astype(np.float64)
    lo, hi = config.bumps_per_gesture
    out = np.zeros((config.gestures, GRID_ROWS, GRID_COLS))
    for g in range(config.gestures):
        n_bumps = int(rng.integers(lo, hi + 1))
        for _ in range(n_bumps):
            r0 = rng.uniform(0, GRID_ROWS - 1)
            c0 = rng.uniform(0, GRID_COLS)
            amp = rng.uniform(*config.bump_amplitude)
            dc = (cols - c0 + GRID_COLS / 2) % GRID_COLS - GRID_COLS / 2
            out[g] += amp * np.exp(
                -((rows - r0) ** 2) / (2 * config.bump_width_rows**2) - dc**2 / (2 * config.bump_width_cols**2)
            )
    # centre each template so the images use both halves of the intensity range
    out -= out.mean(axis=(1, 2), keepdims=True)
    return np.clip(out, -0.95 * MV_RANGE, 0.95 * MV_RANGE)


def subject_warp(config: SyntheticConfig, subject: int) -> np.ndarray:
    """Smooth positive (16, 8) multiplicative field for one subject."""
    rng = RngStream(config.seed, f"warp/{subject}")
    rows, cols = np.mgrid[0:GRID_ROWS, 0:GRID_COLS].astype(np.float64)
    field_ = np.zeros((GRID_ROWS, GRID_COLS))
    for ky in range(3):
        for kx in range(2):
            c = rng.normal()
            field_ += c * np.cos(np.pi * ky * (rows + 0.5) / GRID_ROWS) * np.cos(np.pi * kx * (cols + 0.5) / GRID_COLS)
    field_ /= max(np.abs(field_).max(), 1e-12)
    return 1.0 + config.subject_warp * field_ / (1.0 + config.subject_warp)


def subject_templates(config: SyntheticConfig, subject: int) -> np.ndarray:
    """Envelope-free templates as recorded in session 1 of ``subject``."""
    t = make_templates(config) * subject_warp(config, subject)
    return np.clip(t, -MV_RANGE, MV_RANGE)


def session_transform(config: SyntheticConfig, subject: int, session: int):
    """(roll, gain) applied to clean frames of a session; identity for the first session."""
    first = min(config.sessions)
    if session == first:
        return 0, np.ones((GRID_ROWS, GRID_COLS))
    rng = RngStream(config.seed, f"drift/{subject}/{session}")
    gain = 1.0 + rng.uniform(-config.gain_drift, config.gain_drift, size=(GRID_ROWS, GRID_COLS))
    roll = config.column_roll * (sorted(config.sessions).index(session))
    return roll % GRID_COLS, gain


def apply_session_shift(frames: np.ndarray, roll: int, gain: np.ndarray) -> np.ndarray:
    return gain * np.roll(frames, roll, axis=-1)


def envelope(config: SyntheticConfig, subject: int, gesture: int, trial: int) -> np.ndarray:
    """Slow activation envelope in [1 - depth, 1]."""
    n = config.frames_per_trial
    if config.envelope_depth == 0.0:
        return np.ones(n)
    rng = RngStream(config.seed, f"envelope/{subject}/{gesture}/{trial}")
    freq = rng.uniform(*config.envelope_hz)
    phase = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(n) / config.sample_rate
    return 1.0 - config.envelope_depth * 0.5 * (1.0 - np.cos(2 * np.pi * freq * t + phase))


def synthesize_trial(config: SyntheticConfig, subject: int, session: int, gesture: int, trial: int, templates=None) -> RawTrial:
    templates = subject_templates(config, subject) if templates is None else templates
    env = envelope(config, subject, gesture, trial)
    clean = env[:, None, None] * templates[gesture][None]
    roll, gain = session_transform(config, subject, session)
    frames = apply_session_shift(clean, roll, gain)
    # separate streams, so changing one nuisance level leaves the other's draws alone
    rng = RngStream(config.seed, f"trial/{subject}/{session}/{gesture}/{trial}")
    if config.noise_sigma > 0:
        frames = frames + rng.child("noise").normal(0.0, config.noise_sigma, size=frames.shape)
    if config.interference_mv > 0:
        rng = rng.child("powerline")
        t = np.arange(config.frames_per_trial) / config.sample_rate
        phase = rng.uniform(0.0, 2 * np.pi)
        # pickup differs per electrode; the pattern has mean amplitude interference_mv
        pattern = config.interference_mv * rng.uniform(0.0, 2.0, size=(GRID_ROWS, GRID_COLS))
        frames = frames + np.sin(2 * np.pi * POWERLINE_HZ * t + phase)[:, None, None] * pattern
    return RawTrial(subject, session, gesture, trial, frames.astype(np.float32), config.sample_rate)


def iter_trials(config: SyntheticConfig):
    """Yield every trial in (subject, session, gesture, trial) order."""
    for subject in config.subjects:
        templates = subject_templates(config, subject)
        for session in config.sessions:
            for gesture in range(config.gestures):
                for trial in range(1, config.trials_per_gesture + 1):
                    yield synthesize_trial(config, subject, session, gesture, trial, templates)


def trial_filename(subject: int, session: int, gesture: int, trial: int) -> str:
    return f"s{subject:02d}/sess{session}/g{gesture:02d}_t{trial:02d}.semg"


def generate_synthetic(config: SyntheticConfig, out_dir) -> tuple[DatasetManifest, Path]:
    """Write every trial plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for raw in iter_trials(config):
        rel = trial_filename(*raw.key)
        write_trial(out_dir / rel, raw)
        entries.append(TrialEntry(rel, *raw.key, num_frames=raw.num_frames))
    manifest = DatasetManifest(
        dataset_tag=config.dataset_tag,
        gestures=config.gestures,
        subjects=list(config.subjects),
        sessions=list(config.sessions),
        trials_per_gesture=config.trials_per_gesture,
        entries=entries,
        sample_rate=config.sample_rate,
        root=out_dir,
    )
    path = manifest.save(out_dir / "manifest.json")
    (out_dir / "synthetic_config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    return manifest, path
