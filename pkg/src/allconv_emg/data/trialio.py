"""Binary trial container.

Layout (little-endian)::

    magic        4s   b"SEMG"
    version      u16
    subject      u16
    session      u8
    gesture      u16
    trial        u8
    rows         u8   (16)
    cols         u8   (8)
    sample_rate  u32
    num_frames   u64
    payload      num_frames * rows * cols float32, frame-major, row-major, mV
"""

import struct
from pathlib import Path

import numpy as np

from allconv_emg.errors import FormatError
from allconv_emg.signal import GRID_COLS, GRID_ROWS, RawTrial

MAGIC = b"SEMG"
VERSION = 1
_HEADER = struct.Struct("<4sHHBHBBBIQ")


def encode_trial(trial: RawTrial) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        trial.subject,
        trial.session,
        trial.gesture,
        trial.trial,
        GRID_ROWS,
        GRID_COLS,
        trial.sample_rate,
        trial.num_frames,
    )
    return header + np.ascontiguousarray(trial.frames, dtype="<f4").tobytes()


def decode_trial(data: bytes, source: str = "<bytes>") -> RawTrial:
    if len(data) < _HEADER.size:
        raise FormatError(f"{source}: header truncated at byte {len(data)} (need {_HEADER.size})")
    magic, version, subject, session, gesture, trial, rows, cols, rate, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at byte 4")
    if (rows, cols) != (GRID_ROWS, GRID_COLS):
        raise FormatError(
            f"{source}: grid {rows}x{cols} = {rows * cols} channels at byte 13, expected {GRID_ROWS}x{GRID_COLS} = 128"
        )
    expected = _HEADER.size + n * rows * cols * 4
    if len(data) != expected:
        raise FormatError(
            f"{source}: payload length mismatch at byte {_HEADER.size}: expected {expected} bytes total "
            f"for {n} frames, got {len(data)}"
        )
    frames = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, rows, cols).astype(np.float32)
    return RawTrial(subject=subject, session=session, gesture=gesture, trial=trial, frames=frames, sample_rate=rate)


def write_trial(path, trial: RawTrial) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_trial(trial))
    return path


def read_trial(path) -> RawTrial:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read trial file ({exc})") from exc
    return decode_trial(data, str(path))
