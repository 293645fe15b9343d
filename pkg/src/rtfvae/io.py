"""Binary and WAV file formats."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .signal import SAMPLE_RATE, TimeSignal

_LE_F64 = np.dtype("<f8")


def write_f64_matrix(path, rows):
    """Write a 2-D array as row-major little-endian float64 with no header."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2:
        raise ValueError("expected a 2-D array")
    Path(path).write_bytes(np.ascontiguousarray(rows, dtype=_LE_F64).tobytes())


def read_f64_matrix(path, n_cols):
    raw = Path(path).read_bytes()
    if len(raw) % (8 * n_cols):
        raise ValueError(f"{path}: size {len(raw)} bytes is not a multiple of {n_cols} float64 columns")
    return np.frombuffer(raw, dtype=_LE_F64).astype(float).reshape(-1, n_cols)


def write_signal_f64(path, signal):
    """Raw signal file: uint64 little-endian sample count followed by float64 samples."""
    x = signal.samples if isinstance(signal, TimeSignal) else np.asarray(signal, dtype=float)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", x.size))
        fh.write(np.ascontiguousarray(x, dtype=_LE_F64).tobytes())


def read_signal_f64(path, sample_rate=SAMPLE_RATE):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: missing length header")
    (n,) = struct.unpack("<Q", raw[:8])
    if len(raw) != 8 + 8 * n:
        raise ValueError(f"{path}: header announces {n} samples, file holds {(len(raw) - 8) / 8:g}")
    return TimeSignal(np.frombuffer(raw[8:], dtype=_LE_F64).astype(float), sample_rate)


def write_wav(path, signal, sample_rate=None, peak=None):
    """Write a single-channel 16-bit PCM WAV.

    Samples are scaled by ``1/peak`` (default: the absolute maximum, so the
    file is normalized) before quantization. Returns the scale used.
    """
    x = signal.samples if isinstance(signal, TimeSignal) else np.asarray(signal, dtype=float)
    if sample_rate is None:
        sample_rate = signal.sample_rate if isinstance(signal, TimeSignal) else SAMPLE_RATE
    if peak is None:
        peak = float(np.max(np.abs(x))) or 1.0
    pcm = np.clip(np.round(x / peak * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, int(sample_rate), pcm)
    return peak


def read_wav(path):
    sample_rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected a single-channel file")
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    else:
        x = data.astype(float)
    return TimeSignal(x, int(sample_rate))


def write_rir_wav(stem, rr):
    """Export both RIRs as ``<stem>_mic1.wav`` / ``<stem>_mic2.wav`` sharing one scale."""
    peak = float(max(np.max(np.abs(rr.rir1)), np.max(np.abs(rr.rir2)))) or 1.0
    paths = []
    for m, rir in ((1, rr.rir1), (2, rr.rir2)):
        p = f"{stem}_mic{m}.wav"
        write_wav(p, rir, rr.sample_rate, peak)
        paths.append(p)
    return paths, peak
