"""Raw HD-sEMG trials to instantaneous 16x16 intensity images.

Pipeline order is fixed: band-stop filter each channel over time, map each
sampling instant from mV to [0, 255], then mirror the 16x8 grid to 16x16.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from allconv_emg.errors import ConfigurationError, ContractViolation

log = logging.getLogger(__name__)

GRID_ROWS, GRID_COLS = 16, 8
MV_RANGE = 2.5
POWERLINE_BAND = (45.0, 55.0)
# linear-prediction order and fit window for edge extrapolation
_LP_ORDER = 16
_LP_FIT = 256


@dataclass
class BandstopFilter:
    sos: np.ndarray  # (n_sections, 6): b0 b1 b2 a0 a1 a2
    fs: float
    band: tuple
    order: int

    @property
    def n_sections(self) -> int:
        return self.sos.shape[0]

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response H(e^{jw}) evaluated section by section."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / self.fs)
        h = np.ones_like(z)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h *= (b0 + b1 / z + b2 / z**2) / (a0 + a1 / z + a2 / z**2)
        return h

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(sec[3:]) for sec in self.sos])

    def settle_samples(self, tol: float = 1e-7) -> int:
        """Samples until the slowest pole's envelope decays below ``tol``."""
        r = float(np.max(np.abs(self.poles())))
        return int(np.ceil(np.log(tol) / np.log(r)))


@dataclass
class RawTrial:
    subject: int
    session: int
    gesture: int
    trial: int
    frames: np.ndarray  # (num_frames, 16, 8) mV, float32
    sample_rate: int = 1000

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (GRID_ROWS, GRID_COLS):
            raise ContractViolation(f"trial frames must be (T, 16, 8), got {self.frames.shape}")
        if self.sample_rate <= 2 * POWERLINE_BAND[1]:
            raise ConfigurationError(f"sample rate {self.sample_rate} Hz cannot represent the 55 Hz stop edge")

    @property
    def key(self) -> tuple:
        return (self.subject, self.session, self.gesture, self.trial)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ImageSequence:
    """Images from one trial, in frame order."""

    images: np.ndarray  # (T, 16, 16) intensities in [0, 255]
    label: int
    key: tuple = field(default=())

    def __len__(self):
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# filter design


def _lp_to_bs_analog(order: int, w1: float, w2: float):
    """Butterworth prototype poles mapped to an analog band-stop.

    Returns (zeros, poles, gain) of the analog filter in rad/s.
    """
    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    bw = w2 - w1
    w0 = np.sqrt(w1 * w2)
    # s -> bw*s / (s^2 + w0^2): each prototype pole p gives the roots of
    # s^2 - (bw/p) s + w0^2 = 0, and the zeros sit at +-j*w0
    half = bw / (2 * proto)
    disc = np.sqrt(half**2 - w0**2 + 0j)
    poles = np.concatenate([half + disc, half - disc])
    zeros = np.concatenate([np.full(order, 1j * w0), np.full(order, -1j * w0)])
    gain = np.real(np.prod(-zeros) / np.prod(-poles))
    return zeros, poles, gain


def _bilinear_zpk(zeros, poles, gain, fs2: float):
    zd = (fs2 + zeros) / (fs2 - zeros)
    pd = (fs2 + poles) / (fs2 - poles)
    kd = gain * np.real(np.prod(fs2 - zeros) / np.prod(fs2 - poles))
    return zd, pd, kd


def _pair_conjugates(roots: np.ndarray) -> list[np.ndarray]:
    upper = sorted((r for r in roots if r.imag > 1e-12), key=lambda r: -abs(r))
    pairs = [np.array([r, np.conj(r)]) for r in upper]
    real = sorted(r.real for r in roots if abs(r.imag) <= 1e-12)
    pairs += [np.array(real[i : i + 2]) for i in range(0, len(real), 2)]
    return pairs


def design_bandstop(fs: float = 1000.0, f1: float = POWERLINE_BAND[0], f2: float = POWERLINE_BAND[1], order: int = 2):
    """Butterworth band-stop of prototype order ``order`` as second-order sections.

    Analog low-pass prototype, low-pass to band-stop substitution at the
    pre-warped edges, then the bilinear transform. The resulting digital
    filter has ``2 * order`` poles and exactly -3 dB at ``f1`` and ``f2``.
    """
    if not 0 < f1 < f2 < fs / 2:
        raise ConfigurationError(f"band [{f1}, {f2}] Hz is not inside (0, {fs / 2}) Hz")
    if order < 1:
        raise ConfigurationError(f"filter order must be >= 1, got {order}")
    fs2 = 2.0 * fs
    w1 = fs2 * np.tan(np.pi * f1 / fs)
    w2 = fs2 * np.tan(np.pi * f2 / fs)
    z, p, k = _lp_to_bs_analog(order, w1, w2)
    zd, pd, kd = _bilinear_zpk(z, p, k, fs2)

    pole_pairs = _pair_conjugates(pd)
    zero_pairs = _pair_conjugates(zd)
    sections = []
    for zp, pp in zip(zero_pairs, pole_pairs):
        b = np.real(np.poly(zp))
        a = np.real(np.poly(pp))
        sections.append(np.concatenate([b, a]))
    sos = np.array(sections)
    sos[0, :3] *= kd
    # normalize each section to unit DC gain so the cascade is well scaled
    for sec in sos:
        g = sec[:3].sum() / sec[3:].sum()
        sec[:3] /= g
    dc = np.prod([sec[:3].sum() / sec[3:].sum() for sec in sos])
    sos[0, :3] /= dc
    filt = BandstopFilter(sos=sos, fs=fs, band=(f1, f2), order=order)
    if np.any(np.abs(filt.poles()) >= 1.0):
        raise ConfigurationError("designed filter is unstable")
    return filt


# ---------------------------------------------------------------------------
# zero-phase application


def _lp_extrapolate(seg: np.ndarray, n: int, order: int) -> np.ndarray:
    """Continue each column of ``seg`` (time x channels) by ``n`` samples.

    Least-squares linear prediction per channel; any predictor root outside
    the unit circle is pulled onto it so the continuation cannot grow.
    """
    t, c = seg.shape
    order = max(1, min(order, t // 2))
    out = np.empty((n, c))
    for ch in range(c):
        x = seg[:, ch]
        windows = np.lib.stride_tricks.sliding_window_view(x, order + 1)
        past, target = windows[:, :-1][:, ::-1], windows[:, -1]
        coef, *_ = np.linalg.lstsq(past, target, rcond=None)
        roots = np.roots(np.r_[1.0, -coef])
        if roots.size and np.any(np.abs(roots) > 1.0):
            roots = np.where(np.abs(roots) > 1.0, roots / np.abs(roots), roots)
            coef = -np.real(np.poly(roots))[1:]
        # all-pole recursion seeded with the last `order` samples
        zi = sps.lfiltic([1.0], np.r_[1.0, -coef], x[::-1][:order])
        out[:, ch], _ = sps.lfilter([1.0], np.r_[1.0, -coef], np.zeros(n), zi=zi)
    return out


def apply_filter(filt: BandstopFilter, x: np.ndarray, pad: int | None = None) -> np.ndarray:
    """Zero-phase (forward-backward) filtering along axis 0.

    ``x`` is ``(T,)`` or ``(T, channels)``. Each end is padded with a
    linear-prediction continuation long enough for the filter transients to
    die out, so steady tones in the stop band are removed right up to the
    edges. Output has the input's shape.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x[:, None] if squeeze else x.reshape(x.shape[0], -1)
    t = x2.shape[0]
    if t < 3 * 2 * filt.order:
        raise ConfigurationError(f"signal of {t} samples is too short for an order-{filt.order} band-stop")
    pad = filt.settle_samples() if pad is None else pad
    fit = min(_LP_FIT, t)
    left = _lp_extrapolate(x2[:fit][::-1], pad, _LP_ORDER)[::-1]
    right = _lp_extrapolate(x2[-fit:], pad, _LP_ORDER)
    ext = np.concatenate([left, x2, right])
    zi = sps.sosfilt_zi(filt.sos)[:, :, None]
    y, _ = sps.sosfilt(filt.sos, ext, axis=0, zi=zi * ext[0])
    y = y[::-1]
    y, _ = sps.sosfilt(filt.sos, y, axis=0, zi=zi * y[0])
    y = y[::-1][pad : pad + t]
    return y[:, 0] if squeeze else y.reshape(x.shape)


# ---------------------------------------------------------------------------
# imaging


def frame_to_image(frame: np.ndarray) -> np.ndarray:
    """Map mV to intensity: [-2.5, 2.5] mV -> [0, 255], clamping outside."""
    frame = np.asarray(frame, dtype=np.float64)
    return np.clip((frame + MV_RANGE) / (2 * MV_RANGE), 0.0, 1.0) * 255.0


def mirror(image: np.ndarray) -> np.ndarray:
    """Horizontal mirroring of the last two axes: (..., 16, 8) -> (..., 16, 16)."""
    image = np.asarray(image)
    if image.shape[-2:] != (GRID_ROWS, GRID_COLS):
        raise ContractViolation(f"mirror expects (..., 16, 8), got {image.shape}")
    return np.concatenate([image, image[..., ::-1]], axis=-1)


def trial_to_images(trial: RawTrial, filt: BandstopFilter | None = None) -> ImageSequence:
    """Filter a trial over time, then image and mirror every sampling instant."""
    filt = filt or design_bandstop(trial.sample_rate)
    if filt.fs != trial.sample_rate:
        raise ConfigurationError(f"filter designed for {filt.fs} Hz, trial sampled at {trial.sample_rate} Hz")
    flat = trial.frames.reshape(trial.num_frames, GRID_ROWS * GRID_COLS)
    filtered = apply_filter(filt, flat).reshape(trial.frames.shape)
    images = mirror(frame_to_image(filtered)).astype(np.float32)
    return ImageSequence(images=images, label=trial.gesture, key=trial.key)


def to_network_input(images: np.ndarray) -> np.ndarray:
    """(N, 16, 16) intensities -> (N, 1, 16, 16) floats in [0, 1]."""
    return (np.asarray(images, dtype=np.float32) / np.float32(255.0))[:, None, :, :]


# ---------------------------------------------------------------------------
# diagnostics and export


def frame_correlation(images: np.ndarray) -> np.ndarray:
    """Pearson correlation between flattened images, shape (K, K).

    Any pair involving a zero-variance image is reported as 0.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] < 2:
        raise ConfigurationError("frame_correlation needs at least 2 images")
    flat = images.reshape(images.shape[0], -1)
    centered = flat - flat.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered**2, axis=1))
    flat_idx = norms == 0
    if np.any(flat_idx):
        log.warning("frame_correlation: %d zero-variance image(s), correlations set to 0", int(flat_idx.sum()))
    safe = np.where(flat_idx, 1.0, norms)
    unit = centered / safe[:, None]
    corr = unit @ unit.T
    corr[flat_idx, :] = 0.0
    corr[:, flat_idx] = 0.0
    return np.clip(corr, -1.0, 1.0)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5). Intensities are rounded and clamped to [0, 255]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ContractViolation(f"PGM export needs a 2-D image, got {img.shape}")
    h, w = img.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ContractViolation(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ContractViolation(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_images(images: np.ndarray, out_dir, prefix: str = "frame") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out_dir / f"{prefix}_{i:05d}.pgm"
        write_pgm(p, img)
        paths.append(p)
    return paths
