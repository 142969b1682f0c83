"""Command-line entry point.

Subcommands: gen-data, train, eval, sample, render-sweep, analyze-poses,
ablate. Every command accepts --seed and is reproducible under it. Exit
codes: 0 success, 1 usage error (bad flags, missing input files), 2 runtime
failure.
"""

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import cameras, evaluation, training
from .data import generate_dataset, load_dataset

DEFAULT_RUN_ROOT_ENV = "POVGAN_RUN_ROOT"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="povgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a procedural pose-imbalanced dataset")
    p.add_argument("--n", type=int, default=2000, help="number of images")
    p.add_argument("--yaw-std", type=float, default=15.0,
                   help="yaw standard deviation in degrees")
    p.add_argument("--pitch-std", type=float, default=5.0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train from a TOML config")
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--dataset", help="override the config's dataset path")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--run-name", help="run directory name (default: timestamp+hash)")
    p.add_argument("--run-root", default=None,
                   help=f"runs root (default ${DEFAULT_RUN_ROOT_ENV} or ./runs)")
    p.add_argument("--init-from", help="checkpoint to copy weights from")
    p.add_argument("--resume", help="checkpoint to resume training from")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-bin", type=int, default=512)
    p.add_argument("--auc-pairs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sample", help="render images from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--yaw", type=float, help="fixed yaw in degrees (default: sampled)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render-sweep",
                       help="horizontal strip of one identity over several yaws")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--yaws", default="-45,0,45",
                   help="comma-separated yaw list in degrees")
    p.add_argument("--out", help="output PNG path (default: sweep.png next to ckpt)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze-poses", help="pose-distribution stats of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="run the five ablation configurations")
    p.add_argument("--config", required=True, help="base TOML config")
    p.add_argument("--dataset", help="override the config's dataset path")
    p.add_argument("--steps", type=int, help="override total_steps per run")
    p.add_argument("--n-per-bin", type=int, default=128)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _dispatch(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure -> diagnostic, exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    return {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "sample": _cmd_sample,
        "render-sweep": _cmd_render_sweep,
        "analyze-poses": _cmd_analyze_poses,
        "ablate": _cmd_ablate,
    }[args.command](args)


def _load_train_config(args):
    if not os.path.exists(args.config):
        raise _UsageError(f"config file not found: {args.config}")
    config = training.load_config_toml(args.config)
    overrides = {}
    if getattr(args, "dataset", None) is not None:
        overrides["dataset"] = args.dataset
    if getattr(args, "steps", None) is not None:
        overrides["total_steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        import dataclasses
        config = dataclasses.replace(config, **overrides)
    if not config.dataset:
        raise _UsageError("no dataset path (config key `dataset` or --dataset)")
    if not os.path.isdir(config.dataset):
        raise _UsageError(f"dataset directory not found: {config.dataset}")
    return config


def _run_root(args):
    return args.run_root or os.environ.get(DEFAULT_RUN_ROOT_ENV, "runs")


def _cmd_gen_data(args) -> int:
    manifest = generate_dataset(
        n_images=args.n, yaw_std=math.radians(args.yaw_std), out_dir=args.out,
        seed=args.seed, resolution=args.resolution,
        pitch_std=math.radians(args.pitch_std))
    print(f"wrote {manifest.n_images} images under {manifest.root}")
    return 0


def _cmd_train(args) -> int:
    config = _load_train_config(args)
    if args.resume and not os.path.exists(args.resume):
        raise _UsageError(f"resume checkpoint not found: {args.resume}")
    if args.init_from and not os.path.exists(args.init_from):
        raise _UsageError(f"init checkpoint not found: {args.init_from}")
    root = _run_root(args)
    run_dir = os.path.join(root, args.run_name) if args.run_name \
        else training.default_run_dir(root, config)
    state, _ = training.run(config, run_dir, resume=args.resume,
                            init_from=args.init_from, quiet=args.quiet)
    print(f"finished at step {state.step}; run directory: {run_dir}")
    return 0


def _cmd_eval(args) -> int:
    if not os.path.exists(args.ckpt):
        raise _UsageError(f"checkpoint not found: {args.ckpt}")
    if not os.path.isdir(args.dataset):
        raise _UsageError(f"dataset directory not found: {args.dataset}")
    state = training.load_checkpoint(args.ckpt)
    dataset = load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    fake = evaluation.make_generator_sampler(state.generator,
                                             state.config.field, args.seed)
    ref = evaluation.make_reference_sampler(dataset.manifest, args.seed + 1)
    bins = evaluation.pose_binned_fid(fake, ref, state.embedder, rng,
                                      n_per_bin=args.n_per_bin)
    rows = {f: bins[f] for f in evaluation.PoseBins.NAMES}
    if state.config.use_pose_branch:
        rows["pose_auc"] = evaluation.pose_consistency_auc(
            state.discriminator, dataset, n_pairs=args.auc_pairs, rng=rng)
    rows["depth_error"] = _dataset_depth_error(state, dataset, rng)

    with open(os.path.join(args.out, "bins.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(evaluation.PoseBins.NAMES))
        writer.writerow([bins[f] for f in evaluation.PoseBins.NAMES])
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(sorted(rows.items()))
    with open(os.path.join(args.out, "report.md"), "w") as fh:
        fh.write("# Evaluation\n\n| metric | value |\n|---|---|\n")
        for key, value in sorted(rows.items()):
            fh.write(f"| {key} | {value:.6g} |\n")
    for key, value in sorted(rows.items()):
        print(f"{key}: {value:.6g}")
    return 0


def _dataset_depth_error(state, dataset, rng, n=64):
    """Mean aligned depth error of re-rendered dataset poses."""
    import torch
    from .fields import LatentPair

    cfg = state.config
    idx = rng.integers(0, len(dataset), min(n, len(dataset)))
    errors = []
    gen_rng = torch.Generator()
    gen_rng.manual_seed(int(rng.integers(2 ** 63 - 1)))
    with torch.no_grad():
        for i in idx:
            _, pose, ref_depth = dataset[int(i)]
            z = LatentPair.sample(cfg.field, 1, gen_rng)
            out = state.generator.render(LatentPair(z.z_fg[0], z.z_bg[0]), pose)
            gen_depth = torch.nn.functional.interpolate(
                out.depth[None, None], size=ref_depth.shape,
                mode="bilinear", align_corners=False)[0, 0].numpy()
            mask = ref_depth < dataset.manifest.far
            if mask.any():
                errors.append(evaluation.depth_error(gen_depth, ref_depth, mask))
    return float(np.mean(errors))


def _cmd_sample(args) -> int:
    import torch
    from .data import DEFAULT_FAR, DEFAULT_NEAR
    from .fields import LatentPair
    from PIL import Image

    if not os.path.exists(args.ckpt):
        raise _UsageError(f"checkpoint not found: {args.ckpt}")
    state = training.load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    gen_rng = torch.Generator()
    gen_rng.manual_seed(args.seed)
    dist = cameras.PoseDistribution.uniform()
    with torch.no_grad():
        for i in range(args.n):
            pose = cameras.pose_from_angles(math.radians(args.yaw), 0.0) \
                if args.yaw is not None else cameras.sample_pose(dist, rng)
            z = LatentPair.sample(state.config.field, 1, gen_rng)
            out = state.generator.render(LatentPair(z.z_fg[0], z.z_bg[0]), pose)
            Image.fromarray((out.rgb.numpy() * 255).round().astype(np.uint8)
                            ).save(os.path.join(args.out, f"sample_{i:04d}.png"))
    print(f"wrote {args.n} samples under {args.out}")
    return 0


def _cmd_render_sweep(args) -> int:
    if not os.path.exists(args.ckpt):
        raise _UsageError(f"checkpoint not found: {args.ckpt}")
    try:
        yaws = [math.radians(float(v)) for v in args.yaws.split(",") if v.strip()]
    except ValueError as exc:
        raise _UsageError(f"bad --yaws list {args.yaws!r}: {exc}")
    if not yaws:
        raise _UsageError("--yaws needs at least one angle")
    state = training.load_checkpoint(args.ckpt)
    strip, depth = evaluation.render_yaw_sweep(state.generator,
                                               state.config.field, yaws,
                                               seed=args.seed)
    out = args.out or os.path.join(os.path.dirname(args.ckpt) or ".", "sweep.png")
    evaluation._save_png(strip, out)
    depth_out = out[:-4] + "_depth.png" if out.endswith(".png") else out + "_depth.png"
    evaluation._save_png(depth, depth_out)
    print(f"wrote {out} and {depth_out}")
    return 0


def _cmd_analyze_poses(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not os.path.isdir(args.dataset):
        raise _UsageError(f"dataset directory not found: {args.dataset}")
    _, poses = cameras.read_pose_csv(os.path.join(args.dataset, "poses.csv"))
    os.makedirs(args.out, exist_ok=True)
    yaws = np.degrees([p.yaw for p in poses])
    pitches = np.degrees([p.pitch for p in poses])

    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].hist(yaws, bins=36, range=(-90, 90))
    axes[0].set_xlabel("yaw (deg)")
    axes[1].hist(pitches, bins=18, range=(-45, 45))
    axes[1].set_xlabel("pitch (deg)")
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, "pose_hist.png"), dpi=110,
                metadata={"Software": None})
    plt.close(fig)

    stats = {
        "n": len(poses),
        "yaw_mean_deg": float(np.mean(yaws)),
        "yaw_std_deg": float(np.std(yaws)),
        "frac_within_30deg": float(np.mean(np.abs(yaws) < 30.0)),
        "pitch_std_deg": float(np.std(pitches)),
    }
    with open(os.path.join(args.out, "pose_stats.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stat", "value"])
        writer.writerows(sorted(stats.items()))
    for key, value in sorted(stats.items()):
        print(f"{key}: {value}")
    return 0


def _cmd_ablate(args) -> int:
    base = _load_train_config(args)
    os.makedirs(args.out, exist_ok=True)
    dataset = load_dataset(base.dataset)
    table = []
    for name, config in training.build_ablation_matrix(base):
        run_dir = os.path.join(args.out, name)
        print(f"=== {name} ===", flush=True)
        state, _ = training.run(config, run_dir, quiet=args.quiet)
        rng = np.random.default_rng(config.seed)
        fake = evaluation.make_generator_sampler(state.generator, config.field,
                                                 config.seed)
        ref = evaluation.make_reference_sampler(dataset.manifest, config.seed + 1)
        bins = evaluation.pose_binned_fid(fake, ref, state.embedder, rng,
                                          n_per_bin=args.n_per_bin)
        with open(os.path.join(run_dir, "bins.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(evaluation.PoseBins.NAMES))
            writer.writerow([bins[f] for f in evaluation.PoseBins.NAMES])
        row = {"variant": name, **{f"fid_{k}": v for k, v in bins.items()}}
        if config.use_pose_branch:
            row["pose_auc"] = evaluation.pose_consistency_auc(
                state.discriminator, dataset, n_pairs=min(512, 4 * len(dataset)),
                rng=rng)
        table.append(row)

    keys = ["variant", "fid_near_frontal", "fid_steep", "fid_extrapolated",
            "pose_auc"]
    with open(os.path.join(args.out, "comparison.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in table:
            writer.writerow([row.get(k, "") for k in keys])
    with open(os.path.join(args.out, "comparison.md"), "w") as fh:
        fh.write("| " + " | ".join(keys) + " |\n")
        fh.write("|" + "---|" * len(keys) + "\n")
        for row in table:
            fh.write("| " + " | ".join(
                f"{row[k]:.4g}" if isinstance(row.get(k), float) else str(row.get(k, ""))
                for k in keys) + " |\n")
    print(f"comparison table: {os.path.join(args.out, 'comparison.csv')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
