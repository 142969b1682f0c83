"""Alternating G/D training with pose-matching supervision and uniform pose
sampling mixed into the adversarial poses.

Pose wiring per step:
  * adversarial fakes (both updates) render at poses from the AUPS mixture
    of the dataset's empirical pose distribution and a uniform distribution;
  * pose-matching and identity-regularization fakes render at poses drawn
    only from the empirical distribution;
  * real images always pair with their ground-truth poses as positives, and
    negatives are rejection-sampled from the empirical distribution.

Every random draw comes from a named stream (see rng.RngHub), so toggling a
feature never shifts the draws of another, and two configs that share a
feature see identical streams for it.
"""

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, fields, replace, asdict

import numpy as np
import torch

from . import losses as L
from .cameras import (DEFAULT_MIN_SEPARATION, DEFAULT_UNIFORM_PITCH,
                      DEFAULT_UNIFORM_YAW, PoseDistribution, sample_pose,
                      sample_negative_pose)
from .checkpoint import load_archive, save_archive
from .data import load_dataset
from .discriminator import DiscConfig, DualDiscriminator
from .errors import ConfigurationError, TrainingDivergedError
from .fields import FieldConfig, LatentPair
from .losses import IdentityEmbedder, LossWeights
from .renderer import Generator, RenderConfig
from .rng import RngHub, derive_seed
from .torchutil import frozen, init_module, to_nchw

LOSS_COLUMNS = ["step", "l_adv_gen", "l_pose_gen", "l_z", "l_c", "l_d",
                "l_adv_dis", "l_pose_dis", "r1"]
EXTRA_COLUMNS = ["l_reg_dis", "l_reg_gen", "acc_real", "acc_fake"]


@dataclass
class TrainConfig:
    dataset: str = ""
    total_steps: int = 2000
    batch_size: int = 16
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    seed: int = 0
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    # ablation switches
    use_pose_branch: bool = True
    use_pose_matching: bool = True
    use_pose_regression_baseline: bool = False
    use_aups: bool = True
    use_identity_reg: bool = True
    use_density_reg: bool = True
    # cadences and sampling details
    r1_interval: int = 16
    reg_interval: int = 1
    checkpoint_every: int = 1000
    eval_every: int = 0           # 0: evaluate only at the end of run()
    eval_pairs: int = 256
    id_batch: int = 1
    min_neg_separation: float = DEFAULT_MIN_SEPARATION
    uniform_yaw: tuple = DEFAULT_UNIFORM_YAW
    uniform_pitch: tuple = DEFAULT_UNIFORM_PITCH
    density_points: int = 128
    density_sigma: float = 0.05
    # sub-architectures
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    disc: DiscConfig = dataclasses.field(default_factory=DiscConfig)

    def __post_init__(self):
        if self.use_pose_matching and not self.use_pose_branch:
            raise ConfigurationError(
                "pose matching needs the pose branch (use_pose_branch)")
        if self.use_pose_matching and self.use_pose_regression_baseline:
            raise ConfigurationError(
                "pose matching and the regression baseline are mutually exclusive")
        if self.disc.image_resolution != self.render.output_resolution:
            raise ConfigurationError(
                "discriminator resolution must equal the render output resolution")


_SUBCONFIGS = {"weights": LossWeights, "field": FieldConfig,
               "render": RenderConfig, "disc": DiscConfig}


def config_to_flat(config: TrainConfig) -> dict:
    """Flatten to a single key space (sub-config fields keep their names)."""
    flat = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in _SUBCONFIGS:
            flat.update(asdict(value))
        elif isinstance(value, tuple):
            flat[f.name] = list(value)
        else:
            flat[f.name] = value
    return flat


def config_from_flat(flat: dict) -> TrainConfig:
    flat = dict(flat)
    kwargs = {}
    for name, cls in _SUBCONFIGS.items():
        sub = {}
        for f in fields(cls):
            if f.name in flat:
                sub[f.name] = flat.pop(f.name)
        kwargs[name] = cls(**sub)
    for f in fields(TrainConfig):
        if f.name in flat:
            value = flat.pop(f.name)
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    if flat:
        raise ConfigurationError(f"unknown config keys: {sorted(flat)}")
    return TrainConfig(**kwargs)


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(config_to_flat(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def emit_toml(flat: dict) -> str:
    """Serialize a flat config dict as TOML (flat key space, sorted keys)."""
    lines = []
    for key in sorted(flat):
        value = flat[key]
        if isinstance(value, bool):
            lines.append(f"{key} = {'true' if value else 'false'}")
        elif isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        elif isinstance(value, (list, tuple)):
            lines.append(f"{key} = [{', '.join(repr(float(v)) for v in value)}]")
        else:
            lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"


def load_config_toml(path) -> TrainConfig:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return config_from_flat(tomllib.load(fh))


# ---------------------------------------------------------------------------
# Train state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    step: int
    generator: Generator
    discriminator: DualDiscriminator
    embedder: IdentityEmbedder
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: RngHub
    pose_pool: list


def build_state(config: TrainConfig, pose_pool) -> TrainState:
    """Fresh networks and optimizers; weights from per-module seed streams."""
    seed = config.seed
    gen = Generator(config.field, config.render)
    init_module(gen.synthesizer, derive_seed(seed, "init.synthesizer"))
    init_module(gen.decoder, derive_seed(seed, "init.decoder"))
    init_module(gen.background, derive_seed(seed, "init.background"))
    init_module(gen.upsampler, derive_seed(seed, "init.upsampler"),
                final_zero="conv3")
    disc = DualDiscriminator(config.disc, with_pose_branch=config.use_pose_branch)
    init_module(disc.shared, derive_seed(seed, "init.disc.shared"))
    init_module(disc.image_head, derive_seed(seed, "init.disc.image_head"))
    init_module(disc.regression_head, derive_seed(seed, "init.disc.regression"))
    if config.use_pose_branch:
        init_module(disc.pose_head, derive_seed(seed, "init.disc.pose_head"))
        init_module(disc.pose_encoder, derive_seed(seed, "init.disc.pose_encoder"))
    embedder = IdentityEmbedder(derive_seed(seed, "init.embedder"))

    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_d, betas=betas)
    return TrainState(config=config, step=0, generator=gen, discriminator=disc,
                      embedder=embedder, opt_g=opt_g, opt_d=opt_d,
                      rng=RngHub(seed), pose_pool=list(pose_pool))


def _pose_distributions(config: TrainConfig, pose_pool):
    empirical = PoseDistribution.empirical(pose_pool)
    if config.use_aups:
        adversarial = PoseDistribution.aups(
            pose_pool, mixture_ratio=config.weights.mixture_ratio,
            yaw_range=config.uniform_yaw, pitch_range=config.uniform_pitch)
    else:
        adversarial = empirical
    return empirical, adversarial


def _draw(dist, rng, n):
    return [sample_pose(dist, rng) for _ in range(n)]


def _negatives(positives, dist, config, rng):
    return [sample_negative_pose(p, dist, config.min_neg_separation, rng)
            for p in positives]


# ---------------------------------------------------------------------------
# One training step
# ---------------------------------------------------------------------------


def train_step(state: TrainState, batch, config: TrainConfig) -> dict:
    """One D update then one G update; returns the loss/pose record."""
    images_real, poses_real = batch
    images_real = images_real if isinstance(images_real, torch.Tensor) \
        else to_nchw(images_real)
    n = images_real.shape[0]
    w = config.weights
    gen, disc, hub = state.generator, state.discriminator, state.rng
    empirical, adversarial = _pose_distributions(config, state.pose_pool)
    pose_matching = config.use_pose_matching and w.lambda_pose > 0
    regression = config.use_pose_regression_baseline and w.lambda_pose > 0
    identity = config.use_identity_reg and (w.lambda_z > 0 or w.lambda_c > 0) \
        and state.step % config.reg_interval == 0
    density = config.use_density_reg and w.lambda_d > 0 \
        and state.step % config.reg_interval == 0
    record = {"step": state.step}

    # ---- discriminator update -------------------------------------------
    z = LatentPair.sample(config.field, n, hub.torch("latent.dis.adv"))
    poses_adv = _draw(adversarial, hub.np("pose.adv_dis"), n)
    with torch.no_grad():
        fake_adv = gen.render_batch(z, poses_adv, hub.torch("jitter.dis.adv"))["rgb"]
    r1_weight = w.lambda_r1 * config.r1_interval \
        if state.step % config.r1_interval == 0 else 0.0
    gan_d = L.gan_loss_dis(images_real, fake_adv, disc, r1_weight)

    pose_d = torch.zeros(())
    reg_d = torch.zeros(())
    if pose_matching:
        z_pm = LatentPair.sample(config.field, n, hub.torch("latent.dis.pm"))
        poses_pm = _draw(empirical, hub.np("pose.pm_dis"), n)
        with torch.no_grad():
            fake_pm = gen.render_batch(z_pm, poses_pm,
                                       hub.torch("jitter.dis.pm"))["rgb"]
        neg_rng = hub.np("pose.neg_dis")
        pose_d = L.pose_loss_dis(
            images_real, poses_real, _negatives(poses_real, empirical, config, neg_rng),
            fake_pm, poses_pm, _negatives(poses_pm, empirical, config, neg_rng),
            disc)
    elif regression:
        reg_d = (L.pose_regression_loss(images_real, poses_real, disc)
                 + L.pose_regression_loss(fake_adv, poses_adv, disc))
    total_d = L.total_loss_dis(gan_d.total, pose_d + reg_d, w)

    state.opt_d.zero_grad(set_to_none=True)
    total_d.backward()
    state.opt_d.step()

    # ---- generator update ------------------------------------------------
    z = LatentPair.sample(config.field, n, hub.torch("latent.gen.adv"))
    poses_adv_g = _draw(adversarial, hub.np("pose.adv_gen"), n)
    fake = gen.render_batch(z, poses_adv_g, hub.torch("jitter.gen.adv"))["rgb"]
    gan_g = L.gan_loss_gen(fake, disc)

    pose_g = torch.zeros(())
    reg_g = torch.zeros(())
    if pose_matching:
        z_pm = LatentPair.sample(config.field, n, hub.torch("latent.gen.pm"))
        poses_pm_g = _draw(empirical, hub.np("pose.pm_gen"), n)
        fake_pm = gen.render_batch(z_pm, poses_pm_g, hub.torch("jitter.gen.pm"))["rgb"]
        negs = _negatives(poses_pm_g, empirical, config, hub.np("pose.neg_gen"))
        pose_g = L.pose_loss_gen(fake_pm, poses_pm_g, negs, disc)
    elif regression:
        with frozen(disc):
            reg_g = L.pose_regression_loss(fake, poses_adv_g, disc)

    l_z = torch.zeros(())
    l_c = torch.zeros(())
    if identity:
        m = config.id_batch
        z1 = LatentPair.sample(config.field, m, hub.torch("latent.id"))
        z2 = LatentPair.sample(config.field, m, hub.torch("latent.id"))
        pose_rng = hub.np("pose.id")
        pose_shared = sample_pose(empirical, pose_rng)
        l_z = L.identity_loss_z(gen, z1, z2, pose_shared, state.embedder,
                                hub.torch("jitter.id.z"))
        z_c = LatentPair.sample(config.field, m, hub.torch("latent.id"))
        pose_a = sample_pose(empirical, pose_rng)
        pose_b = _distinct_pose(pose_a, empirical, pose_rng)
        if pose_b is not None:
            l_c = L.identity_loss_c(gen, z_c, pose_a, pose_b, state.embedder,
                                    w.eps_c, hub.torch("jitter.id.c"))

    l_d = torch.zeros(())
    if density:
        z_d = LatentPair.sample(config.field, 1, hub.torch("latent.density"))
        l_d = L.density_reg(gen, z_d.z_fg, sigma_perturb=config.density_sigma,
                            n_points=config.density_points,
                            generator=hub.torch("density.points"))

    total_g = L.total_loss_gen(gan_g, pose_g + reg_g, l_z, l_c, l_d, w)
    state.opt_g.zero_grad(set_to_none=True)
    total_g.backward()
    state.opt_g.step()
    state.step += 1

    with torch.no_grad():
        logit_real = disc.image_logit(images_real)
        logit_fake = disc.image_logit(fake.detach())

    def _f(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    record.update({
        "l_adv_gen": _f(gan_g), "l_pose_gen": _f(pose_g),
        "l_z": _f(l_z), "l_c": _f(l_c), "l_d": _f(l_d),
        "l_adv_dis": _f(gan_d.adv), "l_pose_dis": _f(pose_d),
        "r1": _f(gan_d.r1),
        "l_reg_dis": _f(reg_d), "l_reg_gen": _f(reg_g),
        "acc_real": float((logit_real > 0).float().mean()),
        "acc_fake": float((logit_fake < 0).float().mean()),
        "poses_adv_dis": [p.yaw for p in poses_adv],
        "poses_adv_gen": [p.yaw for p in poses_adv_g],
        "poses_pm_dis": [p.yaw for p in poses_pm] if pose_matching else [],
        "poses_pm_gen": [p.yaw for p in poses_pm_g] if pose_matching else [],
    })
    _check_finite(record, state)
    return record


def _distinct_pose(pose_a, dist, rng, max_tries=16):
    """A second pose guaranteed different from pose_a, or None if the
    support is a single pose (the contrast loss is skipped then)."""
    for _ in range(max_tries):
        pose_b = sample_pose(dist, rng)
        if not np.array_equal(pose_b.flat, pose_a.flat):
            return pose_b
    return None


def _check_finite(record, state):
    bad = [k for k in LOSS_COLUMNS + EXTRA_COLUMNS
           if k in record and not math.isfinite(record[k])]
    if bad:
        norms = {
            "gen_weight_norm": float(sum(p.pow(2).sum() for p in
                                         state.generator.parameters()).sqrt()),
            "disc_weight_norm": float(sum(p.pow(2).sum() for p in
                                          state.discriminator.parameters()).sqrt()),
        }
        record = dict(record, **norms)
        raise TrainingDivergedError(
            f"non-finite loss components {bad} at step {record['step']}", record)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path):
    arrays = {}
    for prefix, module in (("gen", state.generator),
                           ("disc", state.discriminator)):
        for name, p in module.state_dict().items():
            arrays[f"weights/{prefix}/{name}"] = p.detach().numpy()
    for prefix, opt, module in (("opt_g", state.opt_g, state.generator),
                                ("opt_d", state.opt_d, state.discriminator)):
        for name, p in module.named_parameters():
            st = opt.state.get(p)
            if st is None:
                continue
            arrays[f"{prefix}/{name}/step"] = np.asarray(float(st["step"]))
            arrays[f"{prefix}/{name}/exp_avg"] = st["exp_avg"].numpy()
            arrays[f"{prefix}/{name}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
    arrays["pose_pool"] = np.stack([p.flat for p in state.pose_pool])
    manifest = {
        "step": state.step,
        "config": config_to_flat(state.config),
        "config_hash": config_hash(state.config),
        "rng": state.rng.state_dict(),
    }
    save_archive(path, arrays, manifest)


def load_checkpoint(path, config: TrainConfig = None) -> TrainState:
    """Rebuild a TrainState from an archive.

    With `config` given, its hash must match the archived one (resume
    safety); otherwise the archived config is used as-is.
    """
    from .cameras import CameraPose, angles_from_pose

    arrays, manifest = load_archive(path)
    archived = config_from_flat(manifest["config"])
    if config is not None and config_hash(config) != manifest["config_hash"]:
        raise ConfigurationError(
            f"checkpoint {path} was written under config hash "
            f"{manifest['config_hash']}, not {config_hash(config)}")
    config = archived if config is None else config

    pool = []
    for flat in arrays["pose_pool"]:
        flat = np.array(flat)
        flat.flags.writeable = False
        yaw, pitch, radius, focal = angles_from_pose(
            CameraPose(0, 0, 1, 1, flat))
        pool.append(CameraPose(yaw, pitch, radius, focal, flat))

    state = build_state(config, pool)
    state.step = int(manifest["step"])
    _load_weights(state, arrays)
    for prefix, opt, module in (("opt_g", state.opt_g, state.generator),
                                ("opt_d", state.opt_d, state.discriminator)):
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}/exp_avg"
            if key not in arrays:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(arrays[f"{prefix}/{name}/step"])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(
                    arrays[f"{prefix}/{name}/exp_avg_sq"].copy()),
            }
    state.rng.load_state_dict(manifest["rng"])
    return state


def _load_weights(state, arrays):
    for prefix, module in (("gen", state.generator),
                           ("disc", state.discriminator)):
        sd = {}
        for name in module.state_dict():
            key = f"weights/{prefix}/{name}"
            if key not in arrays:
                raise ConfigurationError(f"checkpoint is missing {key}")
            sd[name] = torch.from_numpy(arrays[key].copy())
        module.load_state_dict(sd)


def load_weights_only(state: TrainState, path):
    """Transfer-learning init: copy network weights, keep step/opt/rng fresh."""
    arrays, _ = load_archive(path)
    _load_weights(state, arrays)


# ---------------------------------------------------------------------------
# The run loop
# ---------------------------------------------------------------------------


def default_run_dir(run_root, config):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return os.path.join(run_root, f"{stamp}-{config_hash(config)}")


def run(config: TrainConfig, run_dir, resume=None, init_from=None,
        log_every: int = 50, quiet: bool = False):
    """Train for config.total_steps; returns (state, history of records)."""
    dataset = load_dataset(config.dataset)
    if resume is not None:
        state = load_checkpoint(resume, config)
    else:
        state = build_state(config, dataset.poses)
        if init_from is not None:
            load_weights_only(state, init_from)

    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.toml"), "w") as fh:
        fh.write(emit_toml(config_to_flat(config)))

    metrics_path = os.path.join(run_dir, "metrics.csv")
    fresh = state.step == 0 or not os.path.exists(metrics_path)
    metrics = open(metrics_path, "w" if fresh else "a", newline="")
    writer = csv.writer(metrics)
    if fresh:
        writer.writerow(LOSS_COLUMNS + EXTRA_COLUMNS)

    history = []
    data_rng = state.rng.np("data")
    try:
        while state.step < config.total_steps:
            idx = data_rng.integers(0, len(dataset), config.batch_size)
            images = to_nchw(np.stack([dataset[int(i)][0] for i in idx]))
            poses = [dataset.poses[int(i)] for i in idx]
            record = train_step(state, (images, poses), config)
            history.append(record)
            writer.writerow([record[k] for k in LOSS_COLUMNS + EXTRA_COLUMNS])
            if not quiet and (record["step"] % log_every == 0
                              or state.step == config.total_steps):
                print(f"step {record['step']:6d}  adv_g {record['l_adv_gen']:.3f}"
                      f"  adv_d {record['l_adv_dis']:.3f}"
                      f"  pose_d {record['l_pose_dis']:.3f}"
                      f"  acc(r/f) {record['acc_real']:.2f}/{record['acc_fake']:.2f}",
                      flush=True)
            if state.step % config.checkpoint_every == 0 \
                    or state.step == config.total_steps:
                save_checkpoint(state, _ckpt_path(run_dir, state.step))
            if config.eval_every and state.step % config.eval_every == 0:
                _eval_hook(state, dataset, config, run_dir)
        if state.step == 0:
            save_checkpoint(state, _ckpt_path(run_dir, 0))
    finally:
        metrics.close()
    return state, history


def _ckpt_path(run_dir, step):
    return os.path.join(run_dir, f"checkpoint_{step:07d}.ckpt")


def _eval_hook(state, dataset, config, run_dir):
    from .evaluation import pose_consistency_auc

    if not config.use_pose_branch:
        return
    rng = np.random.default_rng(derive_seed(config.seed, "eval") + state.step)
    auc = pose_consistency_auc(state.discriminator, dataset,
                               n_pairs=config.eval_pairs, rng=rng,
                               min_separation=config.min_neg_separation)
    path = os.path.join(run_dir, "eval.csv")
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "pose_auc"])
        writer.writerow([state.step, auc])


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

ABLATION_NAMES = ["baseline", "baseline_aups", "full_no_id", "full",
                  "pose_regression"]


def build_ablation_matrix(base: TrainConfig):
    """The five experiment rows: plain baseline, +AUPS, full-minus-identity,
    full method, and full with the regression loss swapped in."""
    rows = [
        ("baseline", dict(use_pose_branch=False, use_pose_matching=False,
                          use_pose_regression_baseline=False, use_aups=False,
                          use_identity_reg=False)),
        ("baseline_aups", dict(use_pose_branch=False, use_pose_matching=False,
                               use_pose_regression_baseline=False, use_aups=True,
                               use_identity_reg=False)),
        ("full_no_id", dict(use_pose_branch=True, use_pose_matching=True,
                            use_pose_regression_baseline=False, use_aups=True,
                            use_identity_reg=False)),
        ("full", dict(use_pose_branch=True, use_pose_matching=True,
                      use_pose_regression_baseline=False, use_aups=True,
                      use_identity_reg=True)),
        ("pose_regression", dict(use_pose_branch=True, use_pose_matching=False,
                                 use_pose_regression_baseline=True, use_aups=True,
                                 use_identity_reg=True)),
    ]
    return [(name, replace(base, **flags)) for name, flags in rows]
