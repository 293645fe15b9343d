"""Framing, STFT/ISTFT and instantaneous PSD estimates for two-channel audio.

The analysis keeps the one-sided bins ``1 .. frame_len/2`` in
:attr:`SpectralFrames.data`. The DC bin is carried separately in
:attr:`SpectralFrames.dc` so the transform stays invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN = 256
HOP = 128


@dataclass(frozen=True)
class TimeSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain NaN or Inf")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    def energy(self):
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class SpectralFrames:
    """K x L complex STFT coefficients (bins 1..K, frames 0..L-1)."""

    data: np.ndarray
    dc: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=complex)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("frames must be a non-empty K x L matrix")
        if not np.all(np.isfinite(data)):
            raise ValueError("frames contain NaN or Inf")
        object.__setattr__(self, "data", data)
        if self.dc is not None:
            dc = np.asarray(self.dc, dtype=float)
            if dc.shape != (data.shape[1],):
                raise ValueError("dc row must have one entry per frame")
            object.__setattr__(self, "dc", dc)

    @property
    def n_bins(self):
        return self.data.shape[0]

    @property
    def n_frames(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class PsdSeries:
    auto: np.ndarray
    cross: np.ndarray


def analysis_window(frame_len, window="sqrt_hann"):
    """Return the analysis/synthesis window.

    ``"sqrt_hann"`` is the square root of a periodic Hann window; its square
    sums to one at 50 % overlap. ``"rect"`` is all ones.
    """
    if isinstance(window, str):
        if window == "sqrt_hann":
            n = np.arange(frame_len)
            return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len))
        if window == "rect":
            return np.ones(frame_len)
        raise ValueError(f"unknown window {window!r}")
    w = np.asarray(window, dtype=float)
    if w.shape != (frame_len,):
        raise ValueError("window length must equal frame_len")
    return w


def _check_framing(frame_len, hop):
    if frame_len <= 0 or frame_len % 2:
        raise ValueError("frame_len must be a positive even integer")
    if not 0 < hop <= frame_len:
        raise ValueError("hop must satisfy 0 < hop <= frame_len")


def _samples(x):
    if isinstance(x, TimeSignal):
        return x.samples
    return np.asarray(x, dtype=float)


def stft(x, frame_len=FRAME_LEN, hop=HOP, window="sqrt_hann"):
    """Short-time Fourier transform of a real signal.

    Parameters
    ----------
    x : TimeSignal or array_like
        Real input signal.
    frame_len, hop : int
        Frame length (even) and frame advance in samples.
    window : str or array_like
        ``"sqrt_hann"`` (default), ``"rect"`` or an explicit window.

    Returns
    -------
    SpectralFrames
        ``frame_len/2`` bins by ``floor((len(x) - frame_len)/hop) + 1`` frames.
    """
    _check_framing(frame_len, hop)
    samples = _samples(x)
    if samples.ndim != 1:
        raise ValueError("stft expects a one-dimensional signal")
    if samples.shape[0] < frame_len:
        raise ValueError("insufficient samples for one frame")
    w = analysis_window(frame_len, window)
    n_frames = (samples.shape[0] - frame_len) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::hop][:n_frames]
    spec = np.fft.rfft(frames * w, axis=1).T
    return SpectralFrames(data=spec[1:], dc=spec[0].real.copy())


def istft(frames, frame_len=FRAME_LEN, hop=HOP, window="sqrt_hann", length=None,
          sample_rate=SAMPLE_RATE):
    """Weighted overlap-add inverse of :func:`stft`.

    Samples not covered by any nonzero window value are returned as zero.
    """
    _check_framing(frame_len, hop)
    if not isinstance(frames, SpectralFrames):
        frames = SpectralFrames(np.asarray(frames))
    if frames.n_bins != frame_len // 2:
        raise ValueError(
            f"frames have {frames.n_bins} bins, expected {frame_len // 2} for frame_len={frame_len}"
        )
    w = analysis_window(frame_len, window)
    n_frames = frames.n_frames
    dc = frames.dc if frames.dc is not None else np.zeros(n_frames)
    full = np.vstack([dc[None, :].astype(complex), frames.data])
    # Nyquist bin of a real frame is real; irfft discards its imaginary part
    seg = np.fft.irfft(full.T, n=frame_len, axis=1) * w
    total = (n_frames - 1) * hop + frame_len
    out = np.zeros(total)
    wsum = np.zeros(total)
    for l in range(n_frames):
        out[l * hop:l * hop + frame_len] += seg[l]
        wsum[l * hop:l * hop + frame_len] += w * w
    nz = wsum > 1e-10
    out[nz] /= wsum[nz]
    out[~nz] = 0.0
    if length is not None:
        if length < total:
            out = out[:length]
        else:
            out = np.pad(out, (0, length - total))
    return TimeSignal(out, sample_rate)


def instantaneous_psd(x1, x2):
    """Instantaneous auto-PSD of channel 1 and cross-PSD ``x2 * conj(x1)``."""
    a = x1.data if isinstance(x1, SpectralFrames) else np.asarray(x1, dtype=complex)
    b = x2.data if isinstance(x2, SpectralFrames) else np.asarray(x2, dtype=complex)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    auto = a.real ** 2 + a.imag ** 2
    return PsdSeries(auto=auto, cross=b * np.conj(a))
