"""SER metric and the SNR / noise-type / reverberation sweep."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .enhance import EnhanceConfig, ObservationSet, Variant, denoise, gt_reconstruct, ls_enhance
from .rtf import RoomConfig, derive_seed, estimate_rtf
from .room import (
    NOISE_KINDS, SOURCE_KINDS, babble_positions, ground_truth_rtf, mix_at_snr, oogp_positions,
    render_components, room_response,
)
from .signal import stft

SER_CAP_DB = 150.0
RESULT_COLUMNS = ("t60_s", "noise_kind", "snr_db", "variant", "mean_ser_db", "n_trials", "seed")
TRIAL_COLUMNS = ("t60_s", "noise_kind", "snr_db", "variant", "trial_idx", "ser_db", "seed")
N_BABBLE_SLOTS = 8


def ser_samples(truth, estimates):
    """Per-sample signal-to-error ratios in dB."""
    h = np.atleast_2d(np.asarray(truth, dtype=float))
    e = np.atleast_2d(np.asarray(estimates, dtype=float))
    if h.shape != e.shape:
        raise ValueError(f"truth and estimates differ in shape: {h.shape} vs {e.shape}")
    if h.shape[0] < 1:
        raise ValueError("need at least one sample")
    num = np.sum(h ** 2, axis=1)
    if np.any(num == 0.0):
        raise ValueError("zero-norm truth vector")
    err = np.sum((h - e) ** 2, axis=1)
    out = np.full(h.shape[0], SER_CAP_DB)
    ok = err >= 1e-15 * num
    out[ok] = 10.0 * np.log10(num[ok] / err[ok])
    return out


def ser(truth, estimates):
    """Mean signal-to-error ratio in dB; exact matches count as the 150 dB cap."""
    return float(np.mean(ser_samples(truth, estimates)))


@dataclass(frozen=True)
class SweepSpec:
    snr_grid: tuple = (-10.0, 0.0, 10.0, 20.0, 30.0)
    noise_kinds: tuple = ("babble",)
    t60_grid: tuple = (0.1, 0.3, 0.6)
    variants: tuple = ("raw", "mean", "dn", "ls", "gt")
    trials: int = 50
    seed: int = 0
    duration_s: float = 10.0
    source_kind: str = "speechlike"
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)

    def __post_init__(self):
        for name in ("snr_grid", "noise_kinds", "t60_grid", "variants"):
            v = tuple(getattr(self, name))
            if not v:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "snr_grid", tuple(float(s) for s in self.snr_grid))
        object.__setattr__(self, "t60_grid", tuple(float(t) for t in self.t60_grid))
        object.__setattr__(self, "variants", tuple(Variant.parse(v).value for v in self.variants))
        for k in self.noise_kinds:
            if k not in NOISE_KINDS:
                raise ValueError(f"unknown noise kind {k!r}")
        if any(t <= 0 for t in self.t60_grid):
            raise ValueError("t60 values must be positive")
        if any(math.isnan(s) for s in self.snr_grid):
            raise ValueError("snr values must not be NaN")
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.source_kind!r}")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        if self.duration_s < 1.0:
            raise ValueError("duration_s must be at least 1 s")
        if isinstance(self.enhance, dict):
            object.__setattr__(self, "enhance", EnhanceConfig(**self.enhance))

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["enhance"] = {"alpha": self.enhance.alpha, "iterations": self.enhance.iterations}
        for k in ("snr_grid", "noise_kinds", "t60_grid", "variants"):
            d[k] = list(d[k])
        return d


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    trial_rows: list = field(default_factory=list)

    def lookup(self, t60, noise_kind, snr_db, variant):
        for r in self.rows:
            if (r["t60_s"] == t60 and r["noise_kind"] == noise_kind
                    and r["snr_db"] == snr_db and r["variant"] == variant):
                return r["mean_ser_db"]
        raise KeyError((t60, noise_kind, snr_db, variant))

    def trials_for(self, t60, noise_kind, snr_db, variant):
        return np.array([r["ser_db"] for r in self.trial_rows
                         if r["t60_s"] == t60 and r["noise_kind"] == noise_kind
                         and r["snr_db"] == snr_db and r["variant"] == variant])

    def variant_means(self):
        out = {}
        for r in self.rows:
            out.setdefault(r["variant"], []).append(r["mean_ser_db"])
        return {k: float(np.mean(v)) for k, v in out.items()}

    @staticmethod
    def _write(path, columns, rows):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])

    def to_csv(self, path, trials_path=None):
        self._write(path, RESULT_COLUMNS, self.rows)
        if trials_path is not None:
            self._write(trials_path, TRIAL_COLUMNS, self.trial_rows)

    @classmethod
    def from_csv(cls, path):
        conv = {"t60_s": float, "snr_db": float, "mean_ser_db": float, "n_trials": int,
                "seed": int, "noise_kind": str, "variant": str}
        with open(path, newline="") as f:
            rows = [{k: conv[k](v) for k, v in r.items()} for r in csv.DictReader(f)]
        return cls(rows=rows)


def _select(obj, t60):
    if isinstance(obj, dict):
        for k, v in obj.items():
            if abs(float(k) - t60) < 1e-9:
                return v
        raise KeyError(f"no entry for t60 = {t60}")
    return obj


def trial_scene(room, source_pos, noise_kind, seed, source_kind="speechlike"):
    """Scene of one sweep trial with its interferer layout drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    if noise_kind in ("babble", "babble_and_noise"):
        slots = babble_positions(room.mic1_pos, room.mic2_pos, room.room_dims, n=N_BABBLE_SLOTS)
        n = int(rng.integers(4, N_BABBLE_SLOTS + 1))
        pick = np.sort(rng.choice(N_BABBLE_SLOTS, size=n, replace=False))
        interferers = tuple(slots[i] for i in pick)
    elif noise_kind.startswith("ps_"):
        slots = oogp_positions(room.room_dims, height=room.mic1_pos[2])
        interferers = (slots[int(rng.integers(len(slots)))],)
    else:
        interferers = ()
    return room.scene(source_pos, interferer_positions=interferers, noise_kind=noise_kind,
                      seed=int(rng.integers(2 ** 63)), source_kind=source_kind)


class _TrialFrames:
    """STFT frames of the clean and noise images, mixed per SNR in the STFT domain."""

    def __init__(self, spec, duration_s, max_order=None):
        c1, c2, v1, v2 = render_components(spec, duration_s, max_order)
        self.c1, self.v1 = c1, v1
        self.C = (stft(c1).data, stft(c2).data)
        self.V = (stft(v1).data, stft(v2).data)

    def observe(self, snr_db):
        if math.isinf(snr_db) and snr_db > 0:
            return ObservationSet(*self.C)
        g = mix_at_snr(self.c1, self.v1, snr_db)
        return ObservationSet(self.C[0] + g * self.V[0], self.C[1] + g * self.V[1])


def run_sweep(spec, dataset, params, params_ft=None, room=None, max_order=None,
              keep_trials=True):
    """Evaluate every variant on every (T60, noise kind, SNR) cell.

    ``dataset``, ``params`` and ``params_ft`` may be single objects or dicts keyed
    by T60. Trials cycle over the test positions; each trial renders one scene
    and reuses it across all SNRs so cells along the SNR axis are paired.
    """
    wants_ft = any(v in ("ft", "ft_gt") for v in spec.variants)
    if wants_ft and params_ft is None:
        raise ValueError("variants ft/ft_gt requested but no fine-tuned parameters given")
    table = ResultTable()
    for t60 in spec.t60_grid:
        ds = _select(dataset, t60)
        p = _select(params, t60)
        p_ft = _select(params_ft, t60) if wants_ft else None
        base = room or RoomConfig.from_dict(ds.room)
        cell_room = RoomConfig(base.room_dims, t60, base.mic1_pos, base.mic2_pos, base.duration_s)
        positions = ds.positions("test")
        truths = np.stack([
            ground_truth_rtf(room_response(cell_room.room_dims, t60, q, cell_room.mic1_pos,
                                           cell_room.mic2_pos, max_order))
            for q in positions])
        for kind in spec.noise_kinds:
            sers = {(s, v): [] for s in spec.snr_grid for v in spec.variants}
            for i in range(int(spec.trials)):
                j = i % len(positions)
                seed = derive_seed(spec.seed, round(t60 * 1e6), NOISE_KINDS.index(kind), i)
                scene = trial_scene(cell_room, positions[j], kind, seed, spec.source_kind)
                frames = _TrialFrames(scene, spec.duration_s, max_order)
                fixed = {}
                for snr in spec.snr_grid:
                    obs = frames.observe(snr)
                    est = _apply_variants(spec, obs, truths[j], ds, p, p_ft, fixed)
                    for v, h in est.items():
                        sers[(snr, v)].append(ser_samples(truths[j], h)[0])
            for snr in spec.snr_grid:
                for v in spec.variants:
                    vals = sers[(snr, v)]
                    table.rows.append({"t60_s": t60, "noise_kind": kind, "snr_db": snr,
                                       "variant": v, "mean_ser_db": float(np.mean(vals)),
                                       "n_trials": len(vals), "seed": int(spec.seed)})
                    if keep_trials:
                        table.trial_rows.extend(
                            {"t60_s": t60, "noise_kind": kind, "snr_db": snr, "variant": v,
                             "trial_idx": k, "ser_db": float(x), "seed": int(spec.seed)}
                            for k, x in enumerate(vals))
    return table


def _apply_variants(spec, obs, truth, ds, params, params_ft, fixed):
    mean = ds.mean_rtf
    out = {}
    raw = None
    if any(v in ("raw", "dn", "ls", "ft") for v in spec.variants):
        raw = estimate_rtf(obs.x1, obs.x2)
    for v in spec.variants:
        if v == "raw":
            out[v] = raw
        elif v == "mean":
            out[v] = mean
        elif v == "dn":
            out[v] = denoise(params, raw, mean)
        elif v == "ls":
            out[v] = ls_enhance(params, raw, obs, spec.enhance, mean)
        elif v == "ft":
            out[v] = denoise(params_ft, raw, mean)
        elif v == "gt":
            if v not in fixed:
                fixed[v] = gt_reconstruct(params, truth, mean)
            out[v] = fixed[v]
        elif v == "ft_gt":
            if v not in fixed:
                fixed[v] = gt_reconstruct(params_ft, truth, mean)
            out[v] = fixed[v]
    return out


def noisy_training_pairs(dataset, noise_kinds=("babble",), snr_grid=(-10.0, 0.0, 10.0, 20.0),
                         repeats=1, seed=0, duration_s=10.0, source_kind="speechlike",
                         max_order=None):
    """Noisy raw estimates paired with the clean training RTFs of the same positions.

    Returns ``(inputs, targets)``; each rendered scene is mixed at every SNR in
    ``snr_grid``.
    """
    room = RoomConfig.from_dict(dataset.room)
    positions = dataset.positions("train")
    inputs, targets = [], []
    for r in range(int(repeats)):
        for j, pos in enumerate(positions):
            kind = noise_kinds[(j + r) % len(noise_kinds)]
            s = derive_seed(seed, r, j, NOISE_KINDS.index(kind))
            frames = _TrialFrames(trial_scene(room, pos, kind, s, source_kind), duration_s,
                                  max_order)
            for snr in snr_grid:
                obs = frames.observe(float(snr))
                inputs.append(estimate_rtf(obs.x1, obs.x2))
                targets.append(dataset.train[j])
    return np.stack(inputs), np.stack(targets)
