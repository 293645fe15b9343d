"""Synthetic acoustic scenes: image-method RIRs, ground-truth RTFs and noisy mixtures."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .signal import FRAME_LEN, SAMPLE_RATE, TimeSignal

SPEED_OF_SOUND = 343.0
NOISE_KINDS = ("awgn", "ps_wgn", "ps_speechlike", "ps_noise", "babble", "babble_and_noise")
SOURCE_KINDS = ("wgn", "speechlike")
_SINC_PHASES = 64

DEFAULT_ROOM = (6.0, 6.0, 2.4)
DEFAULT_GRID_CENTER = (1.9, 2.45, 1.15)
DEFAULT_ARRAY_AZIMUTH = 0.35
DEFAULT_MIC_SPACING = 0.10
DEFAULT_MIC_DISTANCE = 2.0


def default_mic_positions(grid_center=DEFAULT_GRID_CENTER, distance=DEFAULT_MIC_DISTANCE,
                          spacing=DEFAULT_MIC_SPACING, azimuth=DEFAULT_ARRAY_AZIMUTH):
    """Microphone pair ``distance`` meters from the grid center at the same height.

    The pair is centered on the horizontal ray at ``azimuth`` (radians from +x)
    and its axis is perpendicular to that ray.
    """
    cx, cy, cz = grid_center
    ax, ay = cx + distance * math.cos(azimuth), cy + distance * math.sin(azimuth)
    ux, uy = -math.sin(azimuth) * spacing / 2, math.cos(azimuth) * spacing / 2
    return (ax - ux, ay - uy, cz), (ax + ux, ay + uy, cz)


def _inside(pos, room_dims):
    return all(0.0 < p < d for p, d in zip(pos, room_dims))


def _vec3(v, name):
    arr = tuple(float(a) for a in v)
    if len(arr) != 3:
        raise ValueError(f"{name} must have three coordinates")
    return arr


@dataclass(frozen=True)
class SceneSpec:
    room_dims: tuple = DEFAULT_ROOM
    t60: float = 0.3
    source_pos: tuple = DEFAULT_GRID_CENTER
    mic1_pos: tuple = field(default_factory=lambda: default_mic_positions()[0])
    mic2_pos: tuple = field(default_factory=lambda: default_mic_positions()[1])
    interferer_positions: tuple = ()
    noise_kind: str = "awgn"
    snr_db: float = math.inf
    seed: int = 0
    source_kind: str = "wgn"

    def __post_init__(self):
        object.__setattr__(self, "room_dims", _vec3(self.room_dims, "room_dims"))
        for name in ("source_pos", "mic1_pos", "mic2_pos"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        object.__setattr__(
            self, "interferer_positions",
            tuple(_vec3(p, "interferer position") for p in self.interferer_positions),
        )
        if any(d <= 0 for d in self.room_dims):
            raise ValueError("room dimensions must be positive")
        if not self.t60 > 0:
            raise ValueError("t60 must be positive")
        for name in ("source_pos", "mic1_pos", "mic2_pos"):
            if not _inside(getattr(self, name), self.room_dims):
                raise ValueError(f"{name} {getattr(self, name)} is outside the room")
        for p in self.interferer_positions:
            if not _inside(p, self.room_dims):
                raise ValueError(f"interferer position {p} is outside the room")
        if self.mic1_pos == self.mic2_pos:
            raise ValueError("microphone positions must differ")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}")
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"source_kind must be one of {SOURCE_KINDS}")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "snr_db", float(self.snr_db))

    def to_dict(self):
        d = asdict(self)
        d["room_dims"] = list(self.room_dims)
        d["interferer_positions"] = [list(p) for p in self.interferer_positions]
        # JSON has no infinity literal
        d["snr_db"] = None if math.isinf(self.snr_db) else self.snr_db
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("snr_db") is None:
            d["snr_db"] = math.inf
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class RoomResponse:
    rir1: np.ndarray
    rir2: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        for name in ("rir1", "rir2"):
            r = np.asarray(getattr(self, name), dtype=float)
            if r.ndim != 1 or r.size < 1 or not np.all(np.isfinite(r)):
                raise ValueError(f"{name} must be a finite non-empty sequence")
            object.__setattr__(self, name, r)


@dataclass(frozen=True)
class MicObservation:
    x1: TimeSignal
    x2: TimeSignal
    c1: TimeSignal
    c2: TimeSignal
    v1: TimeSignal
    v2: TimeSignal


def sabine_reflection(room_dims, t60, c=SPEED_OF_SOUND):
    """Uniform wall reflection coefficient giving ``t60`` under Sabine's formula."""
    lx, ly, lz = room_dims
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    alpha = 24.0 * math.log(10.0) * volume / (c * surface * t60)
    if alpha > 1.0:
        raise ValueError(
            f"t60={t60} s is too short for a {lx}x{ly}x{lz} m room under Sabine's formula"
        )
    beta = math.sqrt(1.0 - alpha)
    if beta >= 1.0:
        raise ValueError("t60 yields a reflection coefficient >= 1")
    return beta


def default_rir_length(t60, sample_rate=SAMPLE_RATE):
    return int(math.ceil(1.5 * t60 * sample_rate))


def schroeder_t60(rir, sample_rate=SAMPLE_RATE, start_db=-5.0, stop_db=-25.0):
    """Reverberation time from a line fit to the Schroeder decay curve.

    The fit spans ``start_db`` to ``stop_db`` and is extrapolated to 60 dB.
    """
    rir = np.asarray(rir, dtype=float)
    edc = np.cumsum(rir[::-1] ** 2)[::-1]
    if edc[0] <= 0:
        raise ValueError("silent impulse response")
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / edc[0])
    i0 = int(np.argmax(edc_db <= start_db))
    i1 = int(np.argmax(edc_db <= stop_db))
    if i1 - i0 < 2:
        return (i1 - i0 + 1) / sample_rate * 60.0 / (start_db - stop_db)
    t = np.arange(i0, i1) / sample_rate
    slope = np.polyfit(t, edc_db[i0:i1], 1)[0]
    return -60.0 / slope


def _reference_pair(room_dims):
    dims = np.asarray(room_dims)
    return tuple(0.37 * dims), tuple(0.71 * dims)


@lru_cache(maxsize=64)
def calibrated_reflection(room_dims, t60, sample_rate=SAMPLE_RATE, c=SPEED_OF_SOUND):
    """Reflection coefficient whose image-method RIR decays with ``t60``.

    Solves for the coefficient matching the Schroeder T60 of a reference
    source/mic pair in the room. Sabine's formula alone overestimates the decay time of image-method RIRs
    in rooms with one short dimension, and cannot produce short T60s at all
    when its absorption exceeds one.
    """
    from scipy.optimize import brentq

    room_dims = tuple(float(d) for d in room_dims)
    src, mic = _reference_pair(room_dims)
    length = default_rir_length(t60, sample_rate)

    def decay(beta):
        r = simulate_rir(room_dims, None, src, mic, None, sample_rate, beta=beta,
                         length=length, c=c, sinc_width=0)
        return schroeder_t60(r, sample_rate) - t60

    # outside this bracket the decay fit is dominated by the direct path or by truncation
    lo, hi = 0.2, 0.97
    if decay(hi) < 0:
        raise ValueError(f"t60={t60} s needs a reflection coefficient >= 1 in this room")
    if decay(lo) > 0:
        raise ValueError(f"t60={t60} s is too short for this room")
    return float(brentq(decay, lo, hi, xtol=1e-4))


def simulate_rir(room_dims, t60, src_pos, mic_pos, max_order=None, sample_rate=SAMPLE_RATE, *,
                 beta=None, length=None, c=SPEED_OF_SOUND, sinc_width=64,
                 absorption="calibrated"):
    """Image-method RIR of a shoebox room with uniform wall reflection.

    Parameters
    ----------
    room_dims : sequence of 3 floats
        Room size in meters.
    t60 : float or None
        Target reverberation time; sets the wall reflection coefficient unless
        ``beta`` is given.
    src_pos, mic_pos : sequence of 3 floats
        Positions strictly inside the room.
    max_order : int, optional
        Cap on the total number of wall reflections per image. ``None`` keeps
        every image arriving within ``length``.
    beta : float, optional
        Explicit reflection coefficient in ``[0, 1)``.
    length : int, optional
        Number of taps; defaults to ``1.5 * t60`` seconds.
    sinc_width : int
        Taps of the Hann-windowed sinc realizing fractional delays (resolved
        to 1/64 sample). ``0`` rounds each image to the nearest sample.
    absorption : {"calibrated", "sabine"}
        How ``t60`` maps to the reflection coefficient.
        See :func:`calibrated_reflection`.
    """
    room_dims = _vec3(room_dims, "room_dims")
    src = np.array(_vec3(src_pos, "src_pos"))
    mic = np.array(_vec3(mic_pos, "mic_pos"))
    if not _inside(src, room_dims):
        raise ValueError(f"source position {tuple(src)} is outside the room")
    if not _inside(mic, room_dims):
        raise ValueError(f"microphone position {tuple(mic)} is outside the room")
    if max_order is not None and max_order < 0:
        raise ValueError("max_order must be >= 0")
    if beta is None:
        if t60 is None or not t60 > 0:
            raise ValueError("t60 must be positive when beta is not given")
        if absorption == "sabine":
            beta = sabine_reflection(room_dims, t60, c)
        elif absorption == "calibrated":
            beta = calibrated_reflection(room_dims, float(t60), int(sample_rate), c)
        else:
            raise ValueError(f"unknown absorption model {absorption!r}")
    elif not 0.0 <= beta < 1.0:
        raise ValueError("reflection coefficient must lie in [0, 1)")
    if beta == 0.0:
        max_order = 0
    half = sinc_width // 2
    direct = float(np.linalg.norm(src - mic)) / c * sample_rate
    if length is None:
        length = default_rir_length(t60, sample_rate) if t60 else int(direct) + sinc_width
    length = max(int(length), int(direct) + half + 1)

    dims = np.asarray(room_dims)
    max_samples = length + half
    reach = np.ceil(max_samples * c / sample_rate / (2.0 * dims)).astype(int) + 1
    if max_order is not None:
        reach = np.minimum(reach, max_order + 1)

    axes = []
    for axis in range(3):
        n = np.repeat(np.arange(-reach[axis], reach[axis] + 1), 2)
        q = np.tile([0, 1], n.size // 2)
        coord = (1 - 2 * q) * src[axis] + 2 * n * dims[axis] - mic[axis]
        axes.append((coord, np.abs(n - q) + np.abs(n)))
    (cx, ox), (cy, oy), (cz, oz) = axes
    dxy2 = (cx[:, None] ** 2 + cy[None, :] ** 2).ravel()
    oxy = (ox[:, None] + oy[None, :]).ravel()

    # image gains binned by integer delay and fractional-delay phase
    phases = _SINC_PHASES if sinc_width else 1
    hist = np.zeros(phases * (max_samples + 2))
    for z2, zo in zip(cz ** 2, oz):
        dist = np.sqrt(dxy2 + z2)
        delay = dist * (sample_rate / c)
        keep = delay < max_samples
        if max_order is not None:
            keep &= oxy + zo <= max_order
        if not keep.any():
            continue
        dist, delay = dist[keep], delay[keep]
        gain = np.power(beta, oxy[keep] + zo) / (4.0 * np.pi * dist)
        slot = np.rint(delay * phases).astype(np.int64)
        hist += np.bincount(slot, weights=gain, minlength=hist.size)
    if not sinc_width:
        return hist[:length].copy()
    hist = hist.reshape(-1, phases)
    acc = np.zeros(hist.shape[0] + sinc_width - 1)
    offsets = np.arange(-half + 1, half + 1)
    for p in range(phases):
        col = hist[:, p]
        if not col.any():
            continue
        t = offsets - p / phases
        kernel = 0.5 * (1.0 + np.cos(2.0 * np.pi * t / sinc_width)) * np.sinc(t)
        acc += np.convolve(col, kernel)
    # kernel tap m sits at sample n + m - half + 1
    return acc[half - 1:half - 1 + length].copy()


@lru_cache(maxsize=1024)
def _cached_rir(room_dims, t60, src, mic, max_order, sample_rate):
    rir = simulate_rir(room_dims, t60, src, mic, max_order, sample_rate)
    rir.setflags(write=False)
    return rir


def room_response(room_dims, t60, src_pos, mic1_pos, mic2_pos, max_order=None,
                  sample_rate=SAMPLE_RATE):
    """RIRs from one source to both microphones (memoized per geometry)."""
    key = (_vec3(room_dims, "room_dims"), float(t60), _vec3(src_pos, "src_pos"))
    r1 = _cached_rir(*key, _vec3(mic1_pos, "mic1_pos"), max_order, int(sample_rate))
    r2 = _cached_rir(*key, _vec3(mic2_pos, "mic2_pos"), max_order, int(sample_rate))
    return RoomResponse(r1, r2, sample_rate)


def _hop1_spectra(rir, frame_len, window):
    padded = np.concatenate([np.zeros(frame_len - 1), rir, np.zeros(frame_len - 1)])
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_len)
    return np.fft.rfft(frames * window, axis=1)[:, 1:]


def ground_truth_rtf(rr, fft_len=None, frame_len=FRAME_LEN, method="narrowband"):
    """Ground-truth RTF at the STFT bin frequencies, packed as ``[Re; Im]``.

    ``method="pointwise"`` evaluates ``G2/G1`` of the full-length frequency
    responses at the bin frequencies, Tikhonov-guarded as
    ``G2 conj(G1) / (|G1|^2 + eps)`` with ``eps = 1e-10 max|G1|^2``.
    ``fft_len`` must then be a multiple of ``frame_len``.

    ``method="narrowband"`` (default) returns the RTF that best maps the STFT
    of microphone 1 onto the STFT of microphone 2 for a white source,
    ``sum_t A2 conj(A1) / sum_t |A1|^2`` where ``A_m`` are the windowed spectra
    of the RIRs at every shift ``t``. This is the value the PSD-based
    estimator converges to; it coincides with ``G2/G1`` only when the RIRs
    are short compared to the frame.
    """
    rir1, rir2 = rr.rir1, rr.rir2
    if not np.any(rir1):
        raise ValueError("reference channel silent")
    n = max(rir1.size, rir2.size)
    if method == "narrowband":
        from .signal import analysis_window

        w = analysis_window(frame_len)
        a1 = _hop1_spectra(np.pad(rir1, (0, n - rir1.size)), frame_len, w)
        a2 = _hop1_spectra(np.pad(rir2, (0, n - rir2.size)), frame_len, w)
        p11 = np.sum(a1.real ** 2 + a1.imag ** 2, axis=0)
        eps = 1e-10 * np.max(p11)
        h = np.sum(a2 * np.conj(a1), axis=0) / (p11 + eps)
        return np.concatenate([h.real, h.imag])
    if method != "pointwise":
        raise ValueError(f"unknown method {method!r}")
    if fft_len is None:
        fft_len = frame_len * int(math.ceil(n / frame_len))
    if fft_len < n:
        raise ValueError(f"fft_len={fft_len} shorter than RIR length {n}")
    if fft_len % frame_len:
        raise ValueError("fft_len must be a multiple of frame_len")
    g1 = np.fft.rfft(rir1, fft_len)
    g2 = np.fft.rfft(rir2, fft_len)
    eps = 1e-10 * np.max(np.abs(g1) ** 2)
    step = fft_len // frame_len
    bins = step * np.arange(1, frame_len // 2 + 1)
    h = g2[bins] * np.conj(g1[bins]) / (np.abs(g1[bins]) ** 2 + eps)
    return np.concatenate([h.real, h.imag])


def mix_at_snr(clean_ref, noise_ref, snr_db):
    """Gain ``g`` such that ``clean_ref`` over ``g * noise_ref`` has ``snr_db``."""
    clean = clean_ref.samples if isinstance(clean_ref, TimeSignal) else np.asarray(clean_ref, float)
    noise = noise_ref.samples if isinstance(noise_ref, TimeSignal) else np.asarray(noise_ref, float)
    e_noise = float(np.mean(noise ** 2))
    e_clean = float(np.mean(clean ** 2))
    if e_noise == 0.0:
        raise ValueError("noise reference has zero energy")
    if e_clean == 0.0:
        raise ValueError("clean reference has zero energy")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return math.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))


def speechlike_noise(n, rng, sample_rate=SAMPLE_RATE, mod_hz=4.0):
    """White noise amplitude-modulated by a random envelope band-limited to ``mod_hz``."""
    sos = butter(2, mod_hz, fs=sample_rate, output="sos")
    pad = int(sample_rate / mod_hz)
    env = sosfilt(sos, rng.standard_normal(n + pad))[pad:]
    env = np.abs(env)
    env /= np.sqrt(np.mean(env ** 2)) + 1e-300
    return env * rng.standard_normal(n)


def colored_noise(n, rng, sample_rate=SAMPLE_RATE):
    """Stationary low-pass (roughly machine-like) noise."""
    sos = butter(2, 1000.0, fs=sample_rate, output="sos")
    x = sosfilt(sos, rng.standard_normal(n)) + 0.1 * rng.standard_normal(n)
    return x / np.std(x)


def babble_positions(mic1_pos, mic2_pos, room_dims, n=6, phase=0.0):
    """``n`` points on a horizontal circle of radius ``min(room)/2 - 0.5`` around the array."""
    if n < 4:
        raise ValueError("babble needs at least 4 interferers")
    center = (np.asarray(mic1_pos) + np.asarray(mic2_pos)) / 2.0
    radius = min(room_dims) / 2.0 - 0.5
    ang = phase + 2.0 * np.pi * np.arange(n) / n
    pts = [(center[0] + radius * math.cos(a), center[1] + radius * math.sin(a), center[2])
           for a in ang]
    for p in pts:
        if not _inside(p, room_dims):
            raise ValueError(f"babble position {p} falls outside the room")
    return tuple(tuple(float(v) for v in p) for p in pts)


def _excitation(kind, n, rng, sample_rate):
    if kind == "wgn":
        return rng.standard_normal(n)
    if kind == "speechlike":
        return speechlike_noise(n, rng, sample_rate)
    if kind == "noise":
        return colored_noise(n, rng, sample_rate)
    raise ValueError(kind)


def _render(spec, pos, signal, n, max_order, sample_rate):
    rr = room_response(spec.room_dims, spec.t60, pos, spec.mic1_pos, spec.mic2_pos,
                       max_order, sample_rate)
    return fftconvolve(signal, rr.rir1)[:n], fftconvolve(signal, rr.rir2)[:n]


def oogp_positions(room_dims, height=None, wall_distance=1.0):
    """Eight out-of-grid points ``wall_distance`` from the walls (corners and edge midpoints)."""
    lx, ly, lz = room_dims
    z = lz / 2.0 if height is None else height
    xs = (wall_distance, lx / 2.0, lx - wall_distance)
    ys = (wall_distance, ly / 2.0, ly - wall_distance)
    pts = [(x, y, z) for x in xs for y in ys if not (x == xs[1] and y == ys[1])]
    for p in pts:
        if not _inside(p, room_dims):
            raise ValueError(f"point {p} falls outside the room")
    return tuple(tuple(float(v) for v in p) for p in pts)


def _check_interferers(spec):
    kind = spec.noise_kind
    if kind != "awgn" and not spec.interferer_positions:
        raise ValueError(f"noise kind {kind!r} needs at least one interferer position")
    if kind in ("babble", "babble_and_noise") and len(spec.interferer_positions) < 4:
        raise ValueError(f"noise kind {kind!r} needs at least 4 interferer positions")


def render_components(spec, duration_s=10.0, max_order=None, sample_rate=SAMPLE_RATE,
                      with_noise=True):
    """Clean spatial images and unscaled noise images ``(c1, c2, v1, v2)``.

    The noise components are returned at their natural level; :func:`mix_at_snr`
    gives the gain that sets the requested SNR at microphone 1.
    """
    if duration_s < 1.0:
        raise ValueError("duration_s must be at least 1 s")
    _check_interferers(spec)
    kind = spec.noise_kind
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(spec.seed)
    src_rng, noise_rng = (np.random.default_rng(s) for s in rng.spawn(2))

    s = _excitation(spec.source_kind, n, src_rng, sample_rate)
    c1, c2 = _render(spec, spec.source_pos, s, n, max_order, sample_rate)
    v1 = np.zeros(n)
    v2 = np.zeros(n)
    if not with_noise:
        return c1, c2, v1, v2
    if kind == "awgn":
        v1 = noise_rng.standard_normal(n)
        v2 = noise_rng.standard_normal(n)
        return c1, c2, v1, v2
    if kind.startswith("ps_"):
        positions = spec.interferer_positions[:1]
        kinds = [{"ps_wgn": "wgn", "ps_speechlike": "speechlike", "ps_noise": "noise"}[kind]]
    elif kind == "babble":
        positions = spec.interferer_positions
        kinds = ["speechlike"] * len(positions)
    else:
        positions = spec.interferer_positions
        kinds = ["speechlike" if i % 2 == 0 else "noise" for i in range(len(positions))]
    for pos, k in zip(positions, kinds):
        e = _excitation(k, n, noise_rng, sample_rate)
        a, b = _render(spec, pos, e, n, max_order, sample_rate)
        v1 += a
        v2 += b
    return c1, c2, v1, v2


def synthesize_scene(spec, duration_s=10.0, max_order=None, sample_rate=SAMPLE_RATE):
    """Render the two microphone signals ``x_m = c_m + v_m`` of a scene.

    The RNG stream is derived from ``spec.seed`` alone, so identical specs give
    bit-identical observations.
    """
    noiseless = math.isinf(spec.snr_db) and spec.snr_db > 0
    c1, c2, v1, v2 = render_components(spec, duration_s, max_order, sample_rate,
                                       with_noise=not noiseless)
    if not noiseless:
        g = mix_at_snr(c1, v1, spec.snr_db)
        v1 = g * v1
        v2 = g * v2
    ts = lambda a: TimeSignal(a, sample_rate)  # noqa: E731
    return MicObservation(ts(c1 + v1), ts(c2 + v2), ts(c1), ts(c2), ts(v1), ts(v2))


def read_scene_manifest(path):
    """Scenes from a JSON-lines manifest, one :class:`SceneSpec` object per line."""
    scenes = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                scenes.append(SceneSpec.from_json(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return scenes


def write_scene_manifest(path, scenes):
    with open(path, "w") as f:
        for s in scenes:
            f.write(s.to_json() + "\n")


def synthesize_manifest(path, duration_s=10.0, max_order=None, sample_rate=SAMPLE_RATE):
    """Yield ``(spec, observation)`` for every scene of a manifest file."""
    for spec in read_scene_manifest(path):
        yield spec, synthesize_scene(spec, duration_s, max_order, sample_rate)
