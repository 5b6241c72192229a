"""Command-line entry point: ``bevcontrast {pairs,pool,pretrain,probe,gradcheck,synth}``.

Exit codes: 0 success, 1 contract/data violation, 2 usage error or missing input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .bev import bev_pool, write_debug_csv
from .contrast import AlignMode
from .errors import BevContrastError
from .io_kitti import load_poses, load_scan, select_pairs

log = logging.getLogger("bevcontrast")

GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


def _existing(path):
    if path is not None and not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return path


def cmd_pairs(args):
    _existing(args.poses)
    _existing(args.times)
    track = load_poses(args.poses, _existing(args.calib), args.times, rate=args.rate)
    gap = {"by_time": args.dt} if args.dt is not None else {"by_dist": args.dd}
    pairs = select_pairs(track, **gap)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        key, val = next(iter(gap.items()))
        out.write(f"# {key}={val}\n# rate={args.rate}\n")
        out.write("index_a,index_b,gap\n")
        for p in pairs:
            out.write(f"{p.index_a},{p.index_b},{p.gap:.6f}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_pool(args):
    from .encoder import features, load_params

    cloud = load_scan(_existing(args.scan))
    params = load_params(_existing(args.ckpt))
    grid = bev_pool(features(cloud, params), cloud, args.cell_size, args.grid)
    write_debug_csv(grid, args.out, {"scan": args.scan, "cell_size": args.cell_size, "grid": args.grid,
                                     "dropped": grid.dropped})
    return 0


def _apply_overrides(cfg_dict, args):
    names = {"lr": "lr_max", "wd": "weight_decay", "epochs": "epochs", "batch_size": "batch_size",
             "dt": "delta_time", "dd": "delta_dist", "cell_size": "cell_size", "grid": "grid_size",
             "tau": "tau", "n_samples": "n_samples", "align": "align_mode", "seed": "seed"}
    for flag, field in names.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg_dict[field] = val
    if args.dd is not None:
        cfg_dict["pair_mode"] = "dist"
    elif args.dt is not None:
        cfg_dict["pair_mode"] = "time"
    return cfg_dict


def cmd_pretrain(args):
    import dataclasses
    import json

    from .trainer import TrainConfig, load_pairs, pretrain

    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_json(Path(_existing(args.config)).read_text())
    cfg = TrainConfig(**_apply_overrides(json.loads(cfg.to_json()), args))
    if not Path(args.data).is_dir():
        raise UsageError(f"no such directory: {args.data}")
    pairs = load_pairs(args.data, cfg)
    if not pairs:
        raise BevContrastError(f"no scan pairs found under {args.data}")
    params, metrics = pretrain(pairs, cfg, out_dir=args.out, resume=_existing(args.resume))
    last = metrics[-1]
    print(f"pairs={len(pairs)} steps={len(metrics)} loss[0]={metrics[0]['loss']:.4f} "
          f"loss[-1]={last['loss']:.4f}")
    log.info("config: %s", dataclasses.asdict(cfg))
    return 0


def cmd_probe(args):
    from .encoder import features, init_params, load_params
    from .synthbench import generate_scene, linear_probe, render_scan

    params = load_params(_existing(args.ckpt))
    baseline = init_params(args.init_seed, params.hidden, params.dim)
    scene = generate_scene(args.scene_seed, traj_len=max(args.scans, 2))
    accs = {"pretrained": [], "random_init": []}
    for k in range(args.scans):
        lc = render_scan(scene, k, args.points)
        accs["pretrained"].append(linear_probe(features(lc.cloud, params), lc.labels, split_seed=k))
        accs["random_init"].append(linear_probe(features(lc.cloud, baseline), lc.labels, split_seed=k))
    print(f"# scene_seed={args.scene_seed} scans={args.scans} points={args.points} init_seed={args.init_seed}")
    for name, vals in accs.items():
        print(f"{name} {np.mean(vals):.4f}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import gradcheck

    modes = [AlignMode.parse(m) for m in args.mode] if args.mode else list(AlignMode)
    worst = 0.0
    print(f"# seed={args.seed} h={args.h} tol={GRADCHECK_TOL}")
    for mode in modes:
        err, n_checked, n_skipped = gradcheck(args.seed, mode, n_points=args.points, hidden=args.hidden,
                                              dim=args.dim, h=args.h)
        worst = max(worst, err)
        print(f"{mode.value} max_rel_err={err:.3e} checked={n_checked} skipped_at_kinks={n_skipped}")
    print(f"max_rel_err={worst:.3e}")
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_synth(args):
    from .synthbench import export_dataset

    dirs = export_dataset(args.out, seed=args.seed, n_sequences=args.sequences, traj_len=args.scans,
                          n_points=args.points, noise_sigma=args.noise)
    for d in dirs:
        print(d)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="bevcontrast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pairs", help="list scan pairs selected by time or distance gap")
    s.add_argument("--poses", required=True)
    s.add_argument("--times")
    s.add_argument("--calib")
    s.add_argument("--rate", type=float, default=10.0, help="scan rate (Hz) when no times file")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--dt", type=float, help="minimum time gap (s)")
    g.add_argument("--dd", type=float, help="minimum travelled distance (m)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_pairs)

    s = sub.add_parser("pool", help="encode one scan and dump its BEV grid as CSV")
    s.add_argument("--scan", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cell-size", type=float, default=0.2)
    s.add_argument("--grid", type=int, default=512)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pool)

    s = sub.add_parser("pretrain", help="self-supervised pretraining on a KITTI-layout dataset")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--lr", type=float)
    s.add_argument("--wd", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--dt", type=float)
    g.add_argument("--dd", type=float)
    s.add_argument("--cell-size", type=float)
    s.add_argument("--grid", type=int)
    s.add_argument("--tau", type=float)
    s.add_argument("--n-samples", type=int)
    s.add_argument("--align", choices=[m.value for m in AlignMode])
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="linear-probe accuracy of pretrained vs random-init features")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene-seed", type=int, required=True)
    s.add_argument("--init-seed", type=int, default=0)
    s.add_argument("--scans", type=int, default=3)
    s.add_argument("--points", type=int, default=4096)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("gradcheck", help="finite-difference check of the end-to-end gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", action="append", choices=[m.value for m in AlignMode])
    s.add_argument("--points", type=int, default=30)
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--h", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="export a synthetic labelled dataset in KITTI layout")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, default=1)
    s.add_argument("--scans", type=int, default=20)
    s.add_argument("--points", type=int, default=2048)
    s.add_argument("--noise", type=float, default=0.02)
    s.set_defaults(func=cmd_synth)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"bevcontrast {args.command}: {exc}", file=sys.stderr)
        return 2
    except BevContrastError as exc:
        print(f"bevcontrast {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
