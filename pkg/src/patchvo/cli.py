"""Command-line entry point: ``patchvo {simulate,run,eval,compare-selectors}``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError
from .evaluation import TrajectoryFormatError, ate_rmse, auc_error, read_trajectory, write_trajectory
from .oracle import SceneConfig, generate_scene, write_scene
from .vo import SELECTORS, VOConfig, compare_selectors, run_vo


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonnegative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _scene_config_path(path: str) -> Path:
    """Accept a config file or a directory written by ``simulate``."""
    p = Path(path)
    if p.is_dir():
        p = p / "scene.cfg"
    if not p.is_file():
        raise FileNotFoundError(f"scene config not found: {path}")
    return p


def _load_scene(args, seed_override: bool):
    overrides = {}
    if seed_override and args.seed is not None:
        overrides["seed"] = args.seed
    cfg = SceneConfig.from_file(_scene_config_path(args.config), **overrides)
    return generate_scene(cfg)


def _vo_config(args, selector: str | None = None) -> VOConfig:
    return VOConfig(
        selector=selector or args.selector,
        patches=args.patches,
        window=args.window,
        radius=args.radius,
        noise=args.noise,
        seed=0 if args.seed is None else args.seed,
    )


# --- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    scene = _load_scene(args, seed_override=True)
    if args.noise is not None:
        from dataclasses import replace

        scene.config = replace(scene.config, flow_noise=args.noise)
    written = write_scene(scene, args.out, bundles=not args.no_frames)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_run(args) -> int:
    config = _vo_config(args)
    scene = _load_scene(args, seed_override=False)
    result = run_vo(scene, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(result.trajectory, out / "estimate.tum")
    with (out / "telemetry.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("frame,iter,cost\n")
        for frame, it, cost in result.telemetry:
            fh.write(f"{frame},{it},{cost!r}\n")
    with (out / "patches.txt").open("w", encoding="utf-8") as fh:
        for frame, pid, x, y, w in result.selections:
            fh.write(f"{frame} {pid} {x} {y} {w:.6f}\n")
    with (out / "points.txt").open("w", encoding="utf-8") as fh:
        for (frame, pid), (x, y, z) in zip(result.point_refs.tolist(), result.points.tolist()):
            fh.write(f"{frame} {pid} {x:.9f} {y:.9f} {z:.9f}\n")
    if result.flagged:
        for t in result.flagged:
            status = [r.status for f, r in result.reports if f == t]
            print(f"frame {t}: solver failed ({', '.join(status)}); constant-velocity pose used", file=sys.stderr)
        return 3
    print(f"tracked {len(result.trajectory)} frames; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    files = args.files
    if len(files) < 2 or len(files) % 2:
        raise ValueError("eval expects pairs of files: ESTIMATE REFERENCE [ESTIMATE REFERENCE ...]")
    rows = []
    for est_path, ref_path in zip(files[::2], files[1::2]):
        est = read_trajectory(est_path)
        ref = read_trajectory(ref_path)
        ate = ate_rmse(est, ref, align=args.align)
        rows.append((est_path, ref_path, ate))
        print(f"ate_rmse {ate:.6f}")
    auc = None
    if args.auc is not None:
        auc = auc_error([r[2] for r in rows], args.auc)
        print(f"auc {auc:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "metrics.csv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimate", "reference", "metric", "value"])
            for est_path, ref_path, ate in rows:
                w.writerow([est_path, ref_path, "ate_rmse", f"{ate:.6f}"])
            if auc is not None:
                w.writerow(["", "", "auc", f"{auc:.6f}"])
    return 0


def cmd_compare_selectors(args) -> int:
    scene = _load_scene(args, seed_override=False)
    stats = compare_selectors(scene, args.seeds, _vo_config(args, selector="adaptive"), bins=args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edges = np.linspace(0.0, 1.0, args.bins + 1)
    with (out / "selector_hist.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("bin,fraction,mode\n")
        for mode, s in stats.items():
            for k, frac in enumerate(s.histogram):
                fh.write(f"{edges[k]:.2f}-{edges[k + 1]:.2f},{frac:.6f},{mode}\n")
    with (out / "selector_summary.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("mode,seed,high_weight_fraction,ate_rmse\n")
        for mode, s in stats.items():
            for seed, frac, ate in zip(args.seeds, s.fractions, s.ates):
                fh.write(f"{mode},{seed},{frac:.6f},{ate:.9f}\n")
    for mode, s in stats.items():
        print(f"{mode} high_weight_fraction {s.mean_fraction:.6f} mean_ate {s.mean_ate:.6f}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchvo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def scene_args(p, out_default):
        p.add_argument("--config", required=True, help="scene config file or simulated scene directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--noise", type=_nonnegative_float, default=None, help="flow noise sigma in pixels")
        p.add_argument("--out", default=out_default)

    def vo_args(p):
        p.add_argument("--patches", type=_positive_int, default=100)
        p.add_argument("--window", type=_positive_int, default=10)
        p.add_argument("--radius", type=_positive_int, default=10)

    p = sub.add_parser("simulate", help="generate a synthetic scene and write it to disk")
    scene_args(p, "scene")
    p.add_argument("--no-frames", action="store_true", help="skip the per-frame .npy maps")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="track a scene and write the estimate")
    scene_args(p, "run")
    vo_args(p)
    p.add_argument("--selector", choices=SELECTORS, default="adaptive")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="ATE RMSE and AUC of estimate/reference pairs")
    p.add_argument("files", nargs="+", help="ESTIMATE REFERENCE [ESTIMATE REFERENCE ...]")
    p.add_argument("--align", action="store_true", help="similarity-align before measuring")
    p.add_argument("--auc", type=float, default=None, metavar="MAX", help="AUC over [0, MAX]")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-selectors", help="adaptive vs random patch selection")
    scene_args(p, "compare")
    vo_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--bins", type=_positive_int, default=10)
    p.set_defaults(func=cmd_compare_selectors)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrajectoryFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
