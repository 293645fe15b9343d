"""RTF estimation from two-channel STFTs and clean-RTF dataset construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from . import io
from .room import (DEFAULT_GRID_CENTER, DEFAULT_ROOM, SceneSpec, default_mic_positions,
                   room_response)
from .signal import FRAME_LEN, HOP, SpectralFrames, analysis_window, instantaneous_psd, stft

DATASET_FORMAT = "rtfvae-dataset/1"
SPLITS = ("train", "validation", "test")


def pack_rtf(h):
    """Complex K-vector(s) to real ``[Re; Im]`` layout along the last axis."""
    h = np.asarray(h)
    return np.concatenate([h.real, h.imag], axis=-1)


def unpack_rtf(v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] % 2:
        raise ValueError("RTF vectors must have even length")
    k = v.shape[-1] // 2
    return v[..., :k] + 1j * v[..., k:]


def _frames(x):
    return x.data if isinstance(x, SpectralFrames) else np.asarray(x, dtype=complex)


class RtfAccumulator:
    """Running frame averages for the PSD-based RTF estimator.

    Feeding frames in several chunks gives the same estimate as one call to
    :func:`estimate_rtf` on the concatenation (up to summation order).
    """

    def __init__(self, n_bins):
        self.n_frames = 0
        self._a = np.zeros(n_bins)
        self._aa = np.zeros(n_bins)
        self._c = np.zeros(n_bins, dtype=complex)
        self._ac = np.zeros(n_bins, dtype=complex)

    def update(self, x1, x2):
        psd = instantaneous_psd(x1, x2)
        if psd.auto.shape[0] != self._a.shape[0]:
            raise ValueError("bin count changed between updates")
        self.n_frames += psd.auto.shape[1]
        self._a += psd.auto.sum(axis=1)
        self._aa += (psd.auto ** 2).sum(axis=1)
        self._c += psd.cross.sum(axis=1)
        self._ac += (psd.auto * psd.cross).sum(axis=1)
        return self

    def estimate(self):
        if self.n_frames < 3:
            raise ValueError(f"insufficient frames: {self.n_frames} < 3")
        n = self.n_frames
        a, aa, c, ac = self._a / n, self._aa / n, self._c / n, self._ac / n
        den = aa - a * a + 1e-12 * a * a
        return pack_rtf((ac - a * c) / den)


def estimate_rtf(x1, x2):
    """PSD-based RTF estimate per frequency bin, packed as ``[Re; Im]``.

    ``(<P11 P12> - <P11><P12>) / (<P11^2> - <P11>^2)`` with ``<.>`` the mean
    over frames, ``P11 = |x1|^2`` and ``P12 = x2 conj(x1)``, so that
    ``x2 = h x1`` returns ``h``.
    """
    a, b = _frames(x1), _frames(x2)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[1] < 3:
        raise ValueError("insufficient frames: need at least 3")
    return RtfAccumulator(a.shape[0]).update(a, b).estimate()


def estimate_rtf_from_signals(x1, x2, **stft_kw):
    return estimate_rtf(stft(x1, **stft_kw), stft(x2, **stft_kw))


def streamed_clean_rtf(rr, duration_s, seed=0, block_len=32768):
    """Estimate the RTF of a noiseless WGN-excited RIR pair without storing the signals.

    The source is generated and convolved block by block (overlap-save with one
    source FFT shared by both channels) and the estimator statistics are
    accumulated frame by frame, so memory stays bounded for long excitations.
    The frames are exactly those of :func:`stft` on the full-length signals
    truncated to a whole number of hops.
    """
    rir = np.stack([rr.rir1, rr.rir2])
    taps = rir.shape[1]
    step = block_len - taps + 1
    step -= step % HOP
    if step <= 0:
        raise ValueError("block_len too short for the RIR length")
    n = int(round(duration_s * rr.sample_rate))
    n -= n % HOP
    if n < FRAME_LEN + 2 * HOP:
        raise ValueError("insufficient frames: excitation too short")
    spec = sfft.rfft(rir, block_len, axis=1)
    window = analysis_window(FRAME_LEN)
    rng = np.random.default_rng(seed)
    acc = RtfAccumulator(FRAME_LEN // 2)
    history = np.zeros(taps - 1)
    carry = None
    done = 0
    while done < n:
        m = min(step, n - done)
        seg = np.concatenate([history, rng.standard_normal(m)])
        history = seg[len(seg) - (taps - 1):]
        y = sfft.irfft(sfft.rfft(seg, block_len) * spec, block_len, axis=1)[:, taps - 1:taps - 1 + m]
        if carry is not None:
            y = np.concatenate([carry, y], axis=1)
        carry = y[:, -(FRAME_LEN - HOP):]
        frames = sliding_window_view(y, FRAME_LEN, axis=1)[:, ::HOP] * window
        X = sfft.rfft(frames, axis=2)[:, :, 1:]
        acc.update(X[0].T, X[1].T)
        done += m
    return acc.estimate()


def default_grid(center=DEFAULT_GRID_CENTER, shape=(6, 5, 4), spacing=(0.04, 0.04, 0.08)):
    """Regular source grid centered on ``center`` (x fastest)."""
    axes = [c + s * (np.arange(n) - (n - 1) / 2.0) for c, n, s in zip(center, shape, spacing)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    return [tuple(float(round(v, 9)) for v in p) for p in pts]


def derive_seed(*keys):
    """Deterministic 63-bit seed from integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class RoomConfig:
    room_dims: tuple = DEFAULT_ROOM
    t60: float = 0.3
    mic1_pos: tuple = field(default_factory=lambda: default_mic_positions()[0])
    mic2_pos: tuple = field(default_factory=lambda: default_mic_positions()[1])
    duration_s: float = 10.0

    def to_dict(self):
        return {"room_dims": list(self.room_dims), "t60": self.t60,
                "mic1_pos": list(self.mic1_pos), "mic2_pos": list(self.mic2_pos),
                "duration_s": self.duration_s}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def scene(self, source_pos, **kw):
        return SceneSpec(room_dims=self.room_dims, t60=self.t60, source_pos=source_pos,
                         mic1_pos=self.mic1_pos, mic2_pos=self.mic2_pos, **kw)


@dataclass
class RtfDataset:
    """Clean RTFs split by grid position.

    ``train`` holds the pre-augmentation training RTFs; ``augmented`` the
    training set actually fed to the network (``None`` to train on ``train``).
    """

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    mean_rtf: np.ndarray
    provenance: dict = field(default_factory=dict)
    seed: int = 0
    room: dict = field(default_factory=dict)
    augmented: np.ndarray | None = None

    @property
    def n_features(self):
        return self.mean_rtf.shape[0]

    @property
    def training_set(self):
        return self.train if self.augmented is None else self.augmented

    def positions(self, split):
        return [tuple(p) for p in self.provenance.get(split, [])]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": DATASET_FORMAT,
            "n_features": int(self.n_features),
            "counts": {s: int(getattr(self, s).shape[0]) for s in SPLITS},
            "seed": int(self.seed),
            "provenance": {k: [list(p) for p in v] for k, v in self.provenance.items()},
            "room": self.room,
            "augmented": self.augmented is not None,
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        for split in SPLITS:
            io.write_f64_matrix(directory / f"{split}.f64", getattr(self, split))
        io.write_f64_matrix(directory / "mean.f64", self.mean_rtf)
        if self.augmented is not None:
            io.write_f64_matrix(directory / "augmented.f64", self.augmented)
        return directory

    @classmethod
    def load(cls, directory):
        """Load a dataset directory; ``mean.f64`` and ``augmented.f64`` are optional."""
        directory = Path(directory)
        meta_path = directory / "meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{meta_path} not found")
        meta = json.loads(meta_path.read_text())
        d = int(meta["n_features"])
        arrays = {s: io.read_f64_matrix(directory / f"{s}.f64", d) for s in SPLITS}
        mean_path = directory / "mean.f64"
        mean = (io.read_f64_matrix(mean_path, d)[0] if mean_path.exists()
                else arrays["train"].mean(axis=0))
        aug_path = directory / "augmented.f64"
        augmented = io.read_f64_matrix(aug_path, d) if aug_path.exists() else None
        return cls(train=arrays["train"], validation=arrays["validation"], test=arrays["test"],
                   mean_rtf=mean, provenance=meta.get("provenance", {}),
                   seed=int(meta.get("seed", 0)), room=meta.get("room", {}), augmented=augmented)


def clean_rtf(room, source_pos, seed, max_order=None):
    """RTF estimate from a noiseless WGN excitation of ``room.duration_s`` at ``source_pos``."""
    spec = room.scene(source_pos, noise_kind="awgn", snr_db=math.inf, seed=seed,
                      source_kind="wgn")
    rr = room_response(spec.room_dims, spec.t60, spec.source_pos, spec.mic1_pos, spec.mic2_pos,
                       max_order)
    return streamed_clean_rtf(rr, room.duration_s, seed)


def build_dataset(grid, room=None, n_test=20, n_val=10, seed=0, max_order=None):
    """Estimate clean RTFs over ``grid`` and split them at random by position.

    Every position gets a noiseless WGN scene with its own derived seed; the
    estimator runs on the clean microphone signals.
    """
    room = room or RoomConfig()
    grid = [tuple(float(v) for v in p) for p in grid]
    if len(set(grid)) != len(grid):
        raise ValueError("degenerate grid: duplicate positions")
    if len(grid) <= n_test + n_val:
        raise ValueError(f"grid of {len(grid)} positions cannot hold {n_test} test and "
                         f"{n_val} validation positions plus training data")
    rtfs = np.stack([clean_rtf(room, p, derive_seed(seed, i), max_order)
                     for i, p in enumerate(grid)])
    order = np.random.default_rng(seed).permutation(len(grid))
    idx = {"test": np.sort(order[:n_test]),
           "validation": np.sort(order[n_test:n_test + n_val]),
           "train": np.sort(order[n_test + n_val:])}
    train = rtfs[idx["train"]]
    return RtfDataset(
        train=train, validation=rtfs[idx["validation"]], test=rtfs[idx["test"]],
        mean_rtf=train.mean(axis=0),
        provenance={s: [grid[i] for i in idx[s]] for s in SPLITS},
        seed=int(seed), room=room.to_dict(),
    )


def augment(train, repeats=5, noise_fraction=0.01, seed=0):
    """Repeat every RTF ``repeats`` times and add white Gaussian perturbations.

    The perturbation variance is ``noise_fraction`` times the per-element
    variance of ``train`` averaged over elements.
    """
    train = np.asarray(train, dtype=float)
    if train.ndim != 2 or train.shape[0] == 0:
        raise ValueError("augment needs a non-empty 2-D training set")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if not 0 < noise_fraction <= 1:
        raise ValueError("noise_fraction must lie in (0, 1]")
    var = noise_fraction * float(np.mean(np.var(train, axis=0)))
    tiled = np.repeat(train, repeats, axis=0)
    rng = np.random.default_rng(seed)
    return tiled + math.sqrt(var) * rng.standard_normal(tiled.shape)


def center(v, mean_rtf):
    v = np.asarray(v, dtype=float)
    mean_rtf = np.asarray(mean_rtf, dtype=float)
    if v.shape[-1] != mean_rtf.shape[-1]:
        raise ValueError(f"length mismatch: {v.shape[-1]} vs {mean_rtf.shape[-1]}")
    return v - mean_rtf


def uncenter(v, mean_rtf):
    v = np.asarray(v, dtype=float)
    mean_rtf = np.asarray(mean_rtf, dtype=float)
    if v.shape[-1] != mean_rtf.shape[-1]:
        raise ValueError(f"length mismatch: {v.shape[-1]} vs {mean_rtf.shape[-1]}")
    return v + mean_rtf
