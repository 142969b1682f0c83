"""Metrics: Frechet distance over a fixed embedding ("fid-lite"), affine-
aligned depth error, pose-binned quality curves, and a pose-consistency AUC
probe of the discriminator's pose branch.

fid-lite embeds images with the frozen random embedder, so absolute values
are not comparable to any published numbers; only comparisons within this
repository (between runs, ablations, or pose bins) are meaningful.
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .cameras import (DEFAULT_FOCAL, DEFAULT_RADIUS, PoseDistribution,
                      pose_from_angles, sample_negative_pose)
from .data import DatasetManifest, SceneSpec, render_scene_analytic
from .errors import StatisticalValidityError
from .fields import LatentPair
from .torchutil import to_nchw

# ---------------------------------------------------------------------------
# Frechet distance over embedded images
# ---------------------------------------------------------------------------


@dataclass
class FeatureStats:
    mean: np.ndarray        # (d,)
    covariance: np.ndarray  # (d, d)
    count: int

    @classmethod
    def from_features(cls, features) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        return cls(mean=features.mean(axis=0),
                   covariance=np.cov(features, rowvar=False),
                   count=features.shape[0])


def _psd_sqrt(matrix):
    """Symmetric PSD square root via eigendecomposition, clipping negatives."""
    sym = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    return (eigvecs * root) @ eigvecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^{1/2}), clipped at 0."""
    sqrt_a = _psd_sqrt(a.covariance)
    inner = _psd_sqrt(sqrt_a @ b.covariance @ sqrt_a)
    value = (float(np.sum((a.mean - b.mean) ** 2))
             + float(np.trace(a.covariance + b.covariance)) - 2.0 * float(np.trace(inner)))
    return max(value, 0.0)


def embed_images(images, embedder, batch=256):
    """images [N,H,W,3] in [0,1] (array or tensor) -> embeddings [N,d]."""
    chunks = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            chunks.append(embedder(to_nchw(images[i:i + batch])).numpy())
    return np.concatenate(chunks, axis=0)


def fid_lite(images_a, images_b, embedder, min_per_dim=2) -> float:
    """Frechet distance between the two image sets' embedding Gaussians."""
    features_a = embed_images(images_a, embedder)
    features_b = embed_images(images_b, embedder)
    needed = min_per_dim * features_a.shape[1]
    if len(features_a) < needed or len(features_b) < needed:
        raise StatisticalValidityError(
            f"fid_lite needs at least {needed} images per set for a stable "
            f"covariance, got {len(features_a)} and {len(features_b)}")
    return frechet_distance(FeatureStats.from_features(features_a),
                            FeatureStats.from_features(features_b))


# ---------------------------------------------------------------------------
# Depth error
# ---------------------------------------------------------------------------


def depth_error(gen_depth, ref_depth, fg_mask) -> float:
    """MSE after affine alignment; invariant to affine maps of either input.

    The reference is standardized over the mask and the generated depth is
    least-squares fitted (scale + shift) onto it, which removes the affine
    ambiguity of both arguments.
    """
    gen_depth = np.asarray(gen_depth, dtype=np.float64)
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    mask = np.asarray(fg_mask, dtype=bool)
    if gen_depth.shape != ref_depth.shape or gen_depth.shape != mask.shape:
        raise ValueError("depth_error inputs must share one shape")
    if not mask.any():
        raise ValueError("depth_error is undefined on an empty foreground mask")
    g = gen_depth[mask]
    r = ref_depth[mask]
    r_std = r.std()
    r = (r - r.mean()) / (r_std if r_std > 1e-12 else 1.0)
    design = np.stack([g, np.ones_like(g)], axis=1)
    coef, *_ = np.linalg.lstsq(design, r, rcond=None)
    residual = design @ coef - r
    return float(np.mean(residual ** 2))


# ---------------------------------------------------------------------------
# Pose bins
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseBins:
    """Named yaw ranges partitioning [-90, 90] degrees."""

    frontal: float = math.radians(30.0)       # |yaw| < frontal
    steep: float = math.radians(50.0)         # frontal <= |yaw| < steep
    limit: float = math.radians(90.0)         # steep <= |yaw| <= limit

    NAMES = ("near_frontal", "steep", "extrapolated")

    def bin_of(self, yaw: float) -> str:
        a = abs(yaw)
        if a > self.limit:
            raise ValueError(f"yaw {yaw} outside [-pi/2, pi/2]")
        if a < self.frontal:
            return "near_frontal"
        if a < self.steep:
            return "steep"
        return "extrapolated"

    def sample_yaw(self, name: str, rng) -> float:
        lo, hi = {"near_frontal": (0.0, self.frontal),
                  "steep": (self.frontal, self.steep),
                  "extrapolated": (self.steep, self.limit)}[name]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return sign * rng.uniform(lo, hi)


def sample_bin_poses(bins, name, n, rng, pitch_range=(-math.radians(15), math.radians(15)),
                     radius=DEFAULT_RADIUS, focal=DEFAULT_FOCAL):
    return [pose_from_angles(bins.sample_yaw(name, rng),
                             rng.uniform(*pitch_range), radius, focal)
            for _ in range(n)]


def make_generator_sampler(generator, field_cfg, seed=0):
    """images(poses) closure rendering fresh latents at the given poses."""
    gen_rng = torch.Generator()
    gen_rng.manual_seed(seed)

    def sampler(poses):
        out = []
        with torch.no_grad():
            for i in range(0, len(poses), 32):
                chunk = poses[i:i + 32]
                z = LatentPair.sample(field_cfg, len(chunk), gen_rng)
                rgb = generator.render_batch(z, chunk)["rgb"]
                out.append(rgb.permute(0, 2, 3, 1).numpy())
        return np.concatenate(out, axis=0)

    return sampler


def make_reference_sampler(manifest: DatasetManifest, seed=0):
    """images(poses) closure rendering fresh analytic scenes at the poses."""
    rng = np.random.default_rng(seed)

    def sampler(poses):
        out = []
        for pose in poses:
            spec = SceneSpec.random(int(rng.integers(2 ** 63 - 1)))
            rgb, _ = render_scene_analytic(spec, pose, manifest.resolution,
                                           manifest.near, manifest.far)
            out.append(rgb)
        return np.stack(out)

    return sampler


def pose_binned_fid(fake_sampler, ref_sampler, embedder, rng, bins=None,
                    n_per_bin=512, **pose_kwargs) -> dict:
    """fid_lite per pose bin, fakes and references sampled in-bin."""
    bins = bins or PoseBins()
    rng = np.random.default_rng(rng)
    result = {}
    for name in PoseBins.NAMES:
        fake_poses = sample_bin_poses(bins, name, n_per_bin, rng, **pose_kwargs)
        ref_poses = sample_bin_poses(bins, name, n_per_bin, rng, **pose_kwargs)
        fakes = fake_sampler(fake_poses)
        refs = ref_sampler(ref_poses)
        if fakes.shape[1:] != refs.shape[1:]:
            raise ValueError(f"fake images {fakes.shape[1:]} and references "
                             f"{refs.shape[1:]} must share a resolution")
        result[name] = fid_lite(fakes, refs, embedder)
    return result


# ---------------------------------------------------------------------------
# Pose-consistency AUC
# ---------------------------------------------------------------------------


def rank_auc(pos_scores, neg_scores) -> float:
    """ROC-AUC via the Mann-Whitney rank statistic (ties get average rank)."""
    from scipy.stats import rankdata

    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    ranks = rankdata(np.concatenate([pos_scores, neg_scores]))
    n_pos, n_neg = len(pos_scores), len(neg_scores)
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def pose_consistency_auc(disc, dataset, n_pairs=1000, rng=None,
                         min_separation=math.radians(10.0)) -> float:
    """AUC of the mean pose-match score separating matched from mismatched
    real image/pose pairs."""
    rng = np.random.default_rng(rng)
    empirical = PoseDistribution.empirical(dataset.poses)
    idx = rng.integers(0, len(dataset), n_pairs)
    images = to_nchw(np.stack([dataset[int(i)][0] for i in idx]))
    matched = [dataset.poses[int(i)] for i in idx]
    mismatched = [sample_negative_pose(p, empirical, min_separation, rng)
                  for p in matched]
    scores = []
    with torch.no_grad():
        for poses in (matched, mismatched):
            chunk_scores = []
            for i in range(0, n_pairs, 256):
                chunk_scores.append(disc.pose_match_score(
                    images[i:i + 256], poses[i:i + 256]).mean(dim=1).numpy())
            scores.append(np.concatenate(chunk_scores))
    return rank_auc(scores[0], scores[1])


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, {name: np.array([float(r[i]) for r in body])
                    for i, name in enumerate(header)}


def emit_report(run_dir, yaws_deg=(-45, -22.5, 0, 22.5, 45)) -> list:
    """Write plots, a summary table, and a yaw-sweep strip into run_dir.

    Re-emission over the same inputs writes identical files. Returns the
    list of files written.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .training import load_checkpoint, load_config_toml

    written = []

    def save_fig(fig, name):
        path = os.path.join(run_dir, name)
        fig.savefig(path, dpi=110, metadata={"Software": None})
        plt.close(fig)
        written.append(path)

    metrics_path = os.path.join(run_dir, "metrics.csv")
    summary_rows = []
    if os.path.exists(metrics_path):
        header, cols = _read_csv(metrics_path)
        if len(cols["step"]):
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
            for key in ("l_adv_gen", "l_adv_dis", "l_pose_gen", "l_pose_dis"):
                axes[0].plot(cols["step"], cols[key], label=key, linewidth=0.8)
            axes[0].legend(fontsize=6)
            axes[0].set_xlabel("step")
            axes[0].set_title("adversarial / pose losses")
            for key in ("l_z", "l_c", "l_d", "r1"):
                axes[1].plot(cols["step"], cols[key], label=key, linewidth=0.8)
            axes[1].legend(fontsize=6)
            axes[1].set_xlabel("step")
            axes[1].set_title("regularizers")
            fig.tight_layout()
            save_fig(fig, "losses.png")
            summary_rows += [(k, float(cols[k][-1])) for k in header if k != "step"]

    bins_path = os.path.join(run_dir, "bins.csv")
    if os.path.exists(bins_path):
        _, cols = _read_csv(bins_path)
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        names = PoseBins.NAMES
        values = [cols[name][-1] for name in names]
        ax.bar(range(len(names)), values)
        ax.set_xticks(range(len(names)), names, fontsize=7)
        ax.set_ylabel("fid_lite")
        ax.set_title("image quality by pose bin")
        fig.tight_layout()
        save_fig(fig, "bins.png")
        summary_rows += list(zip((f"fid_{n}" for n in names), values))

    eval_path = os.path.join(run_dir, "eval.csv")
    if os.path.exists(eval_path):
        _, cols = _read_csv(eval_path)
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.plot(cols["step"], cols["pose_auc"], marker="o", markersize=2)
        ax.set_xlabel("step")
        ax.set_ylabel("pose-consistency AUC")
        ax.set_ylim(0.0, 1.05)
        fig.tight_layout()
        save_fig(fig, "pose_auc.png")
        summary_rows.append(("pose_auc", float(cols["pose_auc"][-1])))

    config_path = os.path.join(run_dir, "config.toml")
    ckpts = sorted(p for p in os.listdir(run_dir) if p.endswith(".ckpt"))
    if ckpts and os.path.exists(config_path):
        config = load_config_toml(config_path)
        state = load_checkpoint(os.path.join(run_dir, ckpts[-1]))
        strip, depth_strip = render_yaw_sweep(
            state.generator, config.field,
            [math.radians(d) for d in yaws_deg], seed=config.seed)
        _save_png(strip, os.path.join(run_dir, "sweep.png"))
        _save_png(depth_strip, os.path.join(run_dir, "sweep_depth.png"))
        written += [os.path.join(run_dir, "sweep.png"),
                    os.path.join(run_dir, "sweep_depth.png")]
        # Pose histogram of the training dataset (if still present).
        if os.path.isdir(config.dataset):
            from .cameras import read_pose_csv
            _, poses = read_pose_csv(os.path.join(config.dataset, "poses.csv"))
            fig, ax = plt.subplots(figsize=(4.2, 3.2))
            ax.hist([math.degrees(p.yaw) for p in poses], bins=36,
                    range=(-90, 90))
            ax.set_xlabel("yaw (degrees)")
            ax.set_ylabel("images")
            ax.set_title("training pose distribution")
            fig.tight_layout()
            save_fig(fig, "pose_hist.png")

    summary_path = os.path.join(run_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(summary_rows)
    written.append(summary_path)

    report_path = os.path.join(run_dir, "report.md")
    with open(report_path, "w") as fh:
        fh.write("# Run report\n\n| metric | value |\n|---|---|\n")
        for key, value in summary_rows:
            fh.write(f"| {key} | {value:.6g} |\n")
        fh.write("\nPlots: losses.png, bins.png, pose_auc.png, sweep.png, "
                 "sweep_depth.png, pose_hist.png (where inputs exist).\n")
    written.append(report_path)
    return written


def render_yaw_sweep(generator, field_cfg, yaws, seed=0, radius=DEFAULT_RADIUS,
                     focal=DEFAULT_FOCAL):
    """One identity rendered at each yaw; returns (rgb strip, depth strip)."""
    gen_rng = torch.Generator()
    gen_rng.manual_seed(seed)
    z = LatentPair.sample(field_cfg, 1, gen_rng)
    panels, depths = [], []
    with torch.no_grad():
        for yaw in yaws:
            out = generator.render(
                LatentPair(z.z_fg[0], z.z_bg[0]),
                pose_from_angles(yaw, 0.0, radius, focal))
            panels.append(out.rgb.numpy())
            depths.append(out.depth.numpy())
    strip = np.concatenate(panels, axis=1)
    cfg = generator.render_cfg
    norm = [(d - cfg.near) / (cfg.far - cfg.near) for d in depths]
    depth_strip = np.concatenate(norm, axis=1).clip(0.0, 1.0)
    return strip, np.repeat(depth_strip[..., None], 3, axis=-1)


def _save_png(array, path):
    from PIL import Image
    Image.fromarray((np.clip(array, 0.0, 1.0) * 255.0).round().astype(np.uint8)
                    ).save(path)
