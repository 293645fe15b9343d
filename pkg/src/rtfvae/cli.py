"""Command-line front end: ``rtfvae {dataset,train,finetune,enhance,sweep}``.

Every subcommand reads one JSON configuration; see ``rtfvae <cmd> --help``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .enhance import EnhanceConfig, ObservationSet, Variant, denoise, gt_reconstruct, ls_enhance
from .evaluation import SweepSpec, _TrialFrames, noisy_training_pairs, run_sweep, ser, trial_scene
from .room import default_mic_positions, ground_truth_rtf, room_response
from .rtf import RoomConfig, RtfDataset, augment, build_dataset, default_grid, derive_seed, estimate_rtf
from .vae import TrainingConfig, fine_tune, fit_vae, load_model, save_model

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

_MIC1, _MIC2 = default_mic_positions()

# (section, key) -> (default, description); the single source for defaults and --help.
CONFIG_KEYS = {
    "seed": (0, "global seed; dataset split, augmentation, training, fine-tuning and sweeps "
                "derive their streams from it"),
    "room": {
        "room_dims": ([6.0, 6.0, 2.4], "room size in meters"),
        "t60": (0.3, "reverberation time in seconds"),
        "mic1_pos": (list(_MIC1), "reference microphone position in meters"),
        "mic2_pos": (list(_MIC2), "second microphone position in meters"),
        "duration_s": (10.0, "length of the WGN excitation used for clean RTF estimates"),
        "max_order": (None, "image-method reflection order cap (null: all images within the RIR)"),
    },
    "dataset": {
        "grid_center": ([1.9, 2.45, 1.15], "center of the source position grid in meters"),
        "grid_shape": ([6, 5, 4], "grid points along x, y, z"),
        "grid_spacing": ([0.04, 0.04, 0.08], "grid spacing along x, y, z in meters"),
        "n_test": (20, "positions held out for testing"),
        "n_val": (10, "positions held out for validation"),
        "augment_repeats": (5, "copies of every training RTF in the augmented set"),
        "noise_fraction": (0.01, "augmentation noise variance relative to the mean RTF variance"),
    },
    "training": {
        "gamma": (0.95, "reconstruction weight of the cost (1 - gamma weighs the KL term)"),
        "sigma_x_sq": (0.5, "decoder variance; absorbed by gamma, stored for reference"),
        "batch_size": (128, "minibatch size"),
        "latent_dim": (5, "bottleneck dimension Q"),
        "hidden": ([256, 128, 64], "encoder hidden widths; the decoder mirrors them"),
        "lr": (1e-3, "initial Adam learning rate"),
        "lr_drop_factor": (5.0, "learning-rate divisor on a validation plateau"),
        "patience_lr": (5, "epochs without improvement before the learning rate drops"),
        "patience_stop": (10, "epochs without improvement before training stops"),
        "min_delta": (1e-3, "smallest validation-loss decrease counted as improvement"),
        "max_epochs": (500, "hard epoch limit"),
        "beta1": (0.9, "Adam first-moment decay"),
        "beta2": (0.999, "Adam second-moment decay"),
        "adam_eps": (1e-8, "Adam denominator offset"),
    },
    "finetune": {
        "epochs": (15, "fine-tuning epochs"),
        "lr": (1e-4, "fine-tuning learning rate"),
        "noise_kinds": (["babble"], "noise kinds of the synthetic noisy/clean pairs"),
        "snr_grid": ([-10.0, 0.0, 10.0, 20.0], "SNRs (dB) at which every pair scene is mixed"),
        "repeats": (1, "scenes rendered per training position"),
        "duration_s": (10.0, "scene length in seconds"),
        "source_kind": ("speechlike", "source excitation: wgn or speechlike"),
    },
    "enhancement": {
        "alpha": (2.0, "LS step size"),
        "iterations": (20, "LS iterations"),
        "variants": (["raw", "mean", "dn", "ls", "gt"],
                     "variants written by the enhance command"),
        "source_index": (0, "test position used by the enhance command"),
        "noise_kind": ("babble", "noise kind of the enhance scene"),
        "snr_db": (10.0, "SNR of the enhance scene in dB"),
        "duration_s": (10.0, "enhance scene length in seconds"),
        "source_kind": ("speechlike", "source excitation of the enhance scene"),
    },
    "sweep": {
        "snr_grid": ([-10.0, 0.0, 10.0, 20.0, 30.0], "SNR axis in dB"),
        "noise_kinds": (["babble"], "noise kinds; awgn, ps_wgn, ps_speechlike, ps_noise, "
                                    "babble, babble_and_noise"),
        "t60_grid": ([0.3], "reverberation times in seconds"),
        "variants": (["raw", "mean", "dn", "ls", "gt"], "raw, mean, dn, ls, ft, gt, ft_gt"),
        "trials": (50, "trials per cell"),
        "duration_s": (10.0, "scene length in seconds"),
        "source_kind": ("speechlike", "source excitation: wgn or speechlike"),
    },
    "paths": {
        "dataset_dir": ("dataset", "dataset directory"),
        "model": ("model.json", "trained model manifest (weights next to it as .f64)"),
        "model_ft": ("model_ft.json", "fine-tuned model manifest"),
        "results": ("results.csv", "sweep result table"),
        "trials": (None, "optional per-trial sweep CSV"),
        "enhanced": ("enhanced.f64", "enhance command output, one RTF row per variant"),
    },
}


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


def _help_epilog(sections):
    lines = ["configuration keys (JSON, all optional):", f"  seed  {CONFIG_KEYS['seed'][1]} "
             f"(default {json.dumps(CONFIG_KEYS['seed'][0])})"]
    for sec in sections:
        lines.append(f"  [{sec}]")
        for key, (default, desc) in CONFIG_KEYS[sec].items():
            lines.append(f"    {sec}.{key}  {desc} (default {json.dumps(default)})")
    lines.append("relative paths are resolved against the configuration file's directory")
    return "\n".join(lines)


def _line_of(text, key):
    """1-based line of the first ``"key"`` occurrence, for error messages."""
    i = text.find(f'"{key}"')
    return text.count("\n", 0, i) + 1 if i >= 0 else 1


def load_config(path, seed_override=None):
    """Parse and validate a configuration file, filling in defaults."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration: {exc.strerror}") from None
    text = raw.decode("utf-8", errors="replace")
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ConfigError(f"{path}: JSON parse error at byte offset {offset} "
                          f"(line {exc.lineno}, column {exc.colno}): {exc.msg}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = {"seed": CONFIG_KEYS["seed"][0]}
    for sec, keys in CONFIG_KEYS.items():
        if sec != "seed":
            cfg[sec] = {k: v[0] for k, v in keys.items()}
    for sec, value in user.items():
        if sec not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{_line_of(text, sec)}: unknown section {sec!r}")
        if sec == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"{path}: seed must be a non-negative integer")
            cfg["seed"] = value
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: section {sec!r} must be an object")
        for k, v in value.items():
            if k not in CONFIG_KEYS[sec]:
                raise ConfigError(f"{path}:{_line_of(text, k)}: unknown key {sec}.{k}")
            cfg[sec][k] = v
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    cfg["_base"] = path.resolve().parent
    _validate(cfg, path)
    return cfg


def _validate(cfg, path):
    try:
        room_config(cfg)
        training_config(cfg)
        enhance_config(cfg)
        sweep_spec(cfg)
        ds = cfg["dataset"]
        if int(ds["n_test"]) < 1 or int(ds["n_val"]) < 1:
            raise ValueError("dataset.n_test and dataset.n_val must be >= 1")
        if len(ds["grid_shape"]) != 3 or len(ds["grid_spacing"]) != 3:
            raise ValueError("dataset.grid_shape and grid_spacing need three entries")
        for v in cfg["enhancement"]["variants"]:
            Variant.parse(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def room_config(cfg):
    r = cfg["room"]
    room = RoomConfig(tuple(float(v) for v in r["room_dims"]), float(r["t60"]),
                      tuple(float(v) for v in r["mic1_pos"]),
                      tuple(float(v) for v in r["mic2_pos"]), float(r["duration_s"]))
    room.scene(tuple(cfg["dataset"]["grid_center"]))  # validates geometry
    return room


def training_config(cfg):
    return TrainingConfig(**cfg["training"], seed=cfg["seed"])


def enhance_config(cfg):
    e = cfg["enhancement"]
    return EnhanceConfig(alpha=float(e["alpha"]), iterations=int(e["iterations"]))


def sweep_spec(cfg):
    names = {f.name for f in fields(SweepSpec)}
    kw = {k: v for k, v in cfg["sweep"].items() if k in names}
    return SweepSpec(**kw, seed=cfg["seed"], enhance=enhance_config(cfg))


def _path(cfg, key, out=None):
    p = out if out is not None else cfg["paths"][key]
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else cfg["_base"] / p


def _load_dataset(cfg):
    d = _path(cfg, "dataset_dir")
    if not (d / "meta.json").exists():
        raise MissingArtifact(f"dataset not found at {d} (run the dataset command first)")
    return RtfDataset.load(d)


def _load_params(cfg, key):
    p = _path(cfg, key)
    if not p.with_suffix(".json").exists():
        raise MissingArtifact(f"model not found at {p}")
    enc, dec, mean, _ = load_model(p)
    return (enc, dec), mean


def cmd_dataset(cfg, out=None):
    room = room_config(cfg)
    ds_cfg = cfg["dataset"]
    seed = cfg["seed"]
    grid = default_grid(tuple(ds_cfg["grid_center"]), tuple(ds_cfg["grid_shape"]),
                        tuple(ds_cfg["grid_spacing"]))
    ds = build_dataset(grid, room, int(ds_cfg["n_test"]), int(ds_cfg["n_val"]), seed,
                       cfg["room"]["max_order"])
    ds.augmented = augment(ds.train, int(ds_cfg["augment_repeats"]),
                           float(ds_cfg["noise_fraction"]), derive_seed(seed, 1))
    target = ds.save(_path(cfg, "dataset_dir", out))
    truth = np.stack([ground_truth_rtf(room_response(room.room_dims, room.t60, q, room.mic1_pos,
                                                     room.mic2_pos, cfg["room"]["max_order"]))
                      for q in ds.positions("train")])
    print(f"train={ds.train.shape[0]} validation={ds.validation.shape[0]} "
          f"test={ds.test.shape[0]} augmented={ds.augmented.shape[0]}")
    print(f"clean estimate SER vs ground truth (train): {ser(truth, ds.train):.2f} dB")
    print(f"wrote {target}")
    return target


def _hyper(cfg):
    return {"training": training_config(cfg).to_dict(), "room": cfg["room"]}


def cmd_train(cfg, out=None):
    ds = _load_dataset(cfg)
    tc = training_config(cfg)
    m = ds.mean_rtf
    (enc, dec), report = fit_vae(ds.training_set - m, ds.validation - m, tc)
    path = save_model(_path(cfg, "model", out), enc, dec, m, _hyper(cfg), cfg["seed"])
    print(report.summary())
    print(f"wrote {path}")
    return path


def cmd_finetune(cfg, out=None):
    ds = _load_dataset(cfg)
    params, mean = _load_params(cfg, "model")
    ft = cfg["finetune"]
    pairs = noisy_training_pairs(ds, tuple(ft["noise_kinds"]), tuple(ft["snr_grid"]),
                                 int(ft["repeats"]), derive_seed(cfg["seed"], 2),
                                 float(ft["duration_s"]), ft["source_kind"],
                                 cfg["room"]["max_order"])
    (enc, dec), losses = fine_tune(params, pairs, mean, int(ft["epochs"]), float(ft["lr"]),
                                   training_config(cfg))
    for v in losses:
        if not math.isfinite(v):
            raise FloatingPointError("fine-tuning loss is not finite")
    hyper = _hyper(cfg)
    hyper["finetune"] = ft
    path = save_model(_path(cfg, "model_ft", out), enc, dec, mean, hyper, cfg["seed"])
    print(f"pairs={pairs[0].shape[0]} epochs={len(losses)} "
          f"final_loss={losses[-1] if losses else float('nan'):.6f}")
    print(f"wrote {path}")
    return path


def cmd_enhance(cfg, out=None):
    ds = _load_dataset(cfg)
    e = cfg["enhancement"]
    variants = [Variant.parse(v).value for v in e["variants"]]
    params, mean = _load_params(cfg, "model")
    params_ft = _load_params(cfg, "model_ft")[0] if {"ft", "ft_gt"} & set(variants) else None
    room = RoomConfig.from_dict(ds.room)
    positions = ds.positions("test")
    idx = int(e["source_index"])
    if not 0 <= idx < len(positions):
        raise ConfigError(f"enhancement.source_index must lie in [0, {len(positions)})")
    pos = positions[idx]
    scene = trial_scene(room, pos, e["noise_kind"], derive_seed(cfg["seed"], 3), e["source_kind"])
    obs = _TrialFrames(scene, float(e["duration_s"]), cfg["room"]["max_order"]).observe(
        float(e["snr_db"]))
    truth = ground_truth_rtf(room_response(room.room_dims, room.t60, pos, room.mic1_pos,
                                           room.mic2_pos, cfg["room"]["max_order"]))
    raw = estimate_rtf(obs.x1, obs.x2)
    rows = []
    for v in variants:
        if v == "raw":
            h = raw
        elif v == "mean":
            h = mean
        elif v == "dn":
            h = denoise(params, raw, mean)
        elif v == "ls":
            h = ls_enhance(params, raw, ObservationSet(obs.x1, obs.x2), enhance_config(cfg), mean)
        elif v == "ft":
            h = denoise(params_ft, raw, mean)
        elif v == "gt":
            h = gt_reconstruct(params, truth, mean)
        else:
            h = gt_reconstruct(params_ft, truth, mean)
        rows.append(h)
        print(f"{v:6s} SER {ser(truth, h):7.2f} dB")
    target = _path(cfg, "enhanced", out)
    io.write_f64_matrix(target, np.stack(rows))
    print(f"wrote {target} (rows: {', '.join(variants)})")
    return target


def cmd_sweep(cfg, out=None):
    ds = _load_dataset(cfg)
    spec = sweep_spec(cfg)
    params, _ = _load_params(cfg, "model")
    params_ft = None
    if {"ft", "ft_gt"} & set(spec.variants):
        params_ft = _load_params(cfg, "model_ft")[0]
    table = run_sweep(spec, ds, params, params_ft, max_order=cfg["room"]["max_order"],
                      keep_trials=cfg["paths"]["trials"] is not None)
    target = _path(cfg, "results", out)
    table.to_csv(target, _path(cfg, "trials"))
    for v, m in table.variant_means().items():
        print(f"{v:6s} mean SER {m:7.2f} dB")
    print(f"wrote {target}")
    return target


COMMANDS = {
    "dataset": (cmd_dataset, "estimate clean RTFs over the source grid and split them",
                ["room", "dataset", "paths"]),
    "train": (cmd_train, "train the VAE on the dataset", ["training", "paths"]),
    "finetune": (cmd_finetune, "fine-tune a trained VAE on synthetic noisy/clean pairs",
                 ["finetune", "training", "paths"]),
    "enhance": (cmd_enhance, "enhance the RTF of one synthetic scene (debugging)",
                ["enhancement", "paths"]),
    "sweep": (cmd_sweep, "run the SNR x noise-kind x T60 evaluation sweep",
              ["sweep", "enhancement", "room", "paths"]),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rtfvae", description="VAE-based RTF enhancement toolkit.",
        epilog="exit codes: 0 ok, 2 configuration error, 3 missing artifact, 4 numerical failure",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, desc, sections) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc,
                           epilog=_help_epilog(sections + [s for s in CONFIG_KEYS
                                                           if s not in sections and s != "seed"]),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the configuration's global seed")
        p.add_argument("--out", default=None, help="override the command's output path")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.seed_override)
        func(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
