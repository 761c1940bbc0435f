"""Command-line entry point for the road segmentation pipeline.

Subcommands cover dataset generation (synth), point-cloud projection
(project), training, evaluation, and the two experiment drivers
(conditions, sweep). Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.

Option precedence: explicit flags override values from --config (a JSON
file of option names), which override built-in defaults. Every run prints
its resolved configuration, and commands that produce outputs write the
same configuration beside them for provenance.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datastore, evalkit, micronet, synthworld
from .geometry import load_calibration, project_cloud
from .maskgen import NoiseConfig, build_sparse_gt, save_ground_truth
from .plyio import load_ply

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit with code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_DEFAULTS = {
    "synth": {"scenes": 20, "out": None, "seed": 0, "lidar_preset": "dense16", "size": 64,
              "noise_ratio": 0.5, "noise_region": 0.5, "val_fraction": 0.15},
    "project": {"cloud": None, "calib": None, "out_prefix": None, "noise_ratio": 0.5,
                "noise_region": 0.5, "seed": 0},
    "train": {"manifest": None, "out": None, "seed": 0, "epochs": 150, "batch_size": 8,
              "mix_ratio": None, "lr": 1e-3, "lr_final": 5e-4, "no_augment": False},
    "eval": {"checkpoint": None, "manifest": None, "threshold": 0.5, "overlay_dir": None},
    "conditions": {"manifest": None, "out": None, "seed": 0, "epochs": 150, "batch_size": 8,
                   "lr": 1e-3, "lr_final": 5e-4, "no_augment": False, "serial": False},
    "sweep": {"manifest": None, "out": None, "ratios": "0,0.25,0.5,1.0", "seed": 0,
              "epochs": 150, "batch_size": 8, "lr": 1e-3, "lr_final": 5e-4,
              "no_augment": False, "serial": False},
}

_REQUIRED = {
    "synth": ("out",),
    "project": ("cloud", "calib", "out_prefix"),
    "train": ("manifest", "out"),
    "eval": ("checkpoint", "manifest"),
    "conditions": ("manifest", "out"),
    "sweep": ("manifest", "out"),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="roadseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, help="number of scenes to generate")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--lidar-preset", choices=("dense16", "dense64", "dual32"))
    p.add_argument("--size", type=int, help="square image size (divisible by 4)")
    p.add_argument("--noise-ratio", type=float, help="noise points per projected point")
    p.add_argument("--noise-region", type=float, help="top image fraction receiving noise")
    p.add_argument("--val-fraction", type=float)

    p = sub.add_parser("project", help="project a labeled cloud into sparse masks")
    p.add_argument("--cloud", help="labeled PLY point cloud")
    p.add_argument("--calib", help="calibration JSON (K, T_camera_lidar, width, height)")
    p.add_argument("--out-prefix", help="output stem; writes <stem>_gt.png and <stem>_valid.png")
    p.add_argument("--noise-ratio", type=float)
    p.add_argument("--noise-region", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory for checkpoint and metrics")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mix-ratio", type=float,
                   help="fraction of train frames using dense masks (default: keep manifest kinds)")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final", type=float)
    p.add_argument("--no-augment", action="store_const", const=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--threshold", type=float)
    p.add_argument("--overlay-dir", help="also write prediction overlay PNGs here")

    p = sub.add_parser("conditions", help="run the three-regime supervision experiment")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final", type=float)
    p.add_argument("--no-augment", action="store_const", const=True)
    p.add_argument("--serial", action="store_const", const=True,
                   help="train conditions sequentially instead of in parallel")

    p = sub.add_parser("sweep", help="run the dense/sparse mixing-ratio sweep")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--ratios", help="comma-separated dense ratios, e.g. 0,0.25,0.5,1.0")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final", type=float)
    p.add_argument("--no-augment", action="store_const", const=True)
    p.add_argument("--serial", action="store_const", const=True)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", help="JSON file with defaults for any option")
        sp.set_defaults(**{k: None for k in _DEFAULTS[name]})
    return parser


def _resolve_config(args: argparse.Namespace) -> dict:
    cmd = args.command
    resolved = dict(_DEFAULTS[cmd])
    if args.config is not None:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        with open(cfg_path) as f:
            try:
                overrides = json.load(f)
            except json.JSONDecodeError as e:
                raise ValueError(f"config file {cfg_path} is not valid JSON: {e}") from e
        for key, value in overrides.items():
            norm = key.replace("-", "_")
            if norm not in resolved:
                raise ValueError(f"config file {cfg_path}: unknown option '{key}' for '{cmd}'")
            resolved[norm] = value
    for key in resolved:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
    missing = [k for k in _REQUIRED[cmd] if resolved.get(k) is None]
    if missing:
        raise ValueError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return resolved


def _echo_config(cmd: str, cfg: dict) -> None:
    print(f"roadseg {cmd} | seed: {cfg.get('seed', 'n/a')} | config: "
          + json.dumps(cfg, sort_keys=True))


def _write_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _train_config(cfg: dict, mix_ratio=None) -> micronet.TrainConfig:
    return micronet.TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]),
        mix_ratio=mix_ratio,
        augment=not bool(cfg["no_augment"]),
        lr_initial=float(cfg["lr"]),
        lr_final=float(cfg["lr_final"]),
    )


def _cmd_synth(cfg: dict) -> int:
    out = Path(cfg["out"])
    manifest = synthworld.generate_dataset(
        n_scenes=int(cfg["scenes"]),
        variation=synthworld.VariationConfig(),
        cam=synthworld.default_intrinsics(int(cfg["size"])),
        lidar=synthworld.lidar_preset(cfg["lidar_preset"]),
        out_dir=out,
        seed=int(cfg["seed"]),
        noise=NoiseConfig(density_ratio=float(cfg["noise_ratio"]),
                          region_fraction=float(cfg["noise_region"])),
        val_fraction=float(cfg["val_fraction"]),
    )
    _write_config(cfg, out / "run_config.json")
    print(f"wrote {manifest}")
    return EXIT_OK


def _cmd_project(cfg: dict) -> int:
    cloud = load_ply(cfg["cloud"])
    cam, t_cam_lidar = load_calibration(cfg["calib"])
    projected = project_cloud(cloud, cam, t_cam_lidar)
    noise = NoiseConfig(density_ratio=float(cfg["noise_ratio"]),
                        region_fraction=float(cfg["noise_region"]), seed=int(cfg["seed"]))
    gt = build_sparse_gt(projected, (cam.height, cam.width), noise)
    prefix = Path(cfg["out_prefix"])
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    gt_path, valid_path = save_ground_truth(gt, prefix)
    _write_config(cfg, prefix.parent / (prefix.name + "_config.json"))
    print(f"projected {len(projected)} points -> {gt_path}, {valid_path} "
          f"(valid pixels: {gt.valid_count})")
    return EXIT_OK


def _cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out / "run_config.json")
    mix = cfg["mix_ratio"]
    tc = _train_config(cfg, mix_ratio=None if mix is None else float(mix))
    _, metrics = micronet.train(
        cfg["manifest"], tc,
        checkpoint_path=out / "model.ckpt",
        metrics_path=out / "metrics.csv",
    )
    last = metrics[-1]
    print(f"trained {tc.epochs} epochs | final train_loss {last['train_loss']:.6f} "
          f"| val IoU {last['val_iou']:.4f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'metrics.csv'}")
    return EXIT_OK


def _cmd_eval(cfg: dict) -> int:
    value = evalkit.evaluate(cfg["checkpoint"], cfg["manifest"],
                             threshold=float(cfg["threshold"]))
    if cfg["overlay_dir"] is not None:
        written = evalkit.save_overlays(cfg["checkpoint"], cfg["manifest"], cfg["overlay_dir"],
                                        threshold=float(cfg["threshold"]))
        print(f"wrote {len(written)} overlay images to {cfg['overlay_dir']}")
    print(f"IoU {value}")
    return EXIT_OK


def _cmd_conditions(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out / "run_config.json")
    report = evalkit.run_conditions(cfg["manifest"], _train_config(cfg), out,
                                    parallel=not bool(cfg["serial"]))
    for name, value in report.conditions:
        print(f"{name}: {value:.4f}")
    print(f"wrote {out / 'conditions.csv'} ({report.runtime_seconds:.1f} s)")
    return EXIT_OK


def _cmd_sweep(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out / "run_config.json")
    try:
        ratios = [float(r) for r in str(cfg["ratios"]).split(",") if r.strip() != ""]
    except ValueError as e:
        raise ValueError(f"bad --ratios value '{cfg['ratios']}': {e}") from e
    report = evalkit.run_ratio_sweep(cfg["manifest"], ratios, _train_config(cfg), out,
                                     parallel=not bool(cfg["serial"]))
    for ratio, value in report.sweep:
        print(f"ratio_dense {ratio:g}: IoU {value:.4f}")
    print(f"wrote {out / 'sweep.csv'} ({report.runtime_seconds:.1f} s)")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "project": _cmd_project,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "conditions": _cmd_conditions,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except (ValueError, OSError) as e:
        print(f"roadseg {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE if "missing required option" in str(e) else EXIT_DATA
    _echo_config(args.command, cfg)
    try:
        return _COMMANDS[args.command](cfg)
    except FloatingPointError as e:
        print(f"roadseg {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as e:
        print(f"roadseg {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
