"""Training objectives.

Pose-matching terms score the elementwise product of the discriminator's
pose feature and the encoded camera, softplus applied elementwise and
averaged over the embedding and the batch:

    matched pair   -> softplus(-product)   (want a large positive product)
    mismatched pair-> softplus(+product)   (want a large negative product)

The generator's pose loss uses its fakes with their rendering pose as the
positive and an independently drawn pose as the negative. The discriminator's
version applies both terms to real and fake images alike, so its pose branch
grades pose agreement regardless of realism.

Adversarial terms are the non-saturating GAN loss, with an R1 gradient
penalty on real images inside the discriminator loss. Identity
regularization pushes different latents apart (L_z) and holds one latent's
identity steady across poses (L_c); density regularization penalizes the
mean absolute density change under small point perturbations.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .torchutil import frozen, leaky_relu

IDENTITY_EMBED_DIM = 64


@dataclass
class LossWeights:
    lambda_pose: float = 1.0
    lambda_z: float = 0.5
    lambda_c: float = 0.25
    lambda_d: float = 0.25
    lambda_r1: float = 1.0
    eps_c: float = 1e-8
    mixture_ratio: float = 0.5   # AUPS: fraction of adversarial poses drawn uniformly

    def __post_init__(self):
        for name in ("lambda_pose", "lambda_z", "lambda_c", "lambda_d", "lambda_r1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eps_c <= 0:
            raise ValueError("eps_c must be > 0")


def softplus_h(x):
    """Overflow-safe softplus, h(x) = ln(1 + e^x); accepts tensors or floats."""
    if isinstance(x, torch.Tensor):
        return F.softplus(x)
    if x > 30.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def matched_term(product):
    """Mean softplus(-product): low when matched pairs score high."""
    return F.softplus(-product).mean()


def mismatched_term(product):
    """Mean softplus(+product): low when mismatched pairs score low."""
    return F.softplus(product).mean()


def pose_match_objective(score_pos, score_neg):
    """The two-term pose objective on raw score vectors."""
    return matched_term(score_pos) + mismatched_term(score_neg)


def pose_loss_gen(fake_images, poses_pos, poses_neg, disc):
    """Generator pose-matching loss; discriminator treated as constant."""
    with frozen(disc):
        score_pos = disc.pose_match_score(fake_images, poses_pos)
        score_neg = disc.pose_match_score(fake_images, poses_neg)
    return pose_match_objective(score_pos, score_neg)


def pose_loss_dis(real_images, poses_real_pos, poses_real_neg,
                  fake_images, poses_fake_pos, poses_fake_neg, disc):
    """Discriminator pose-matching loss over real and fake positives/negatives."""
    fake_images = fake_images.detach()
    return (matched_term(disc.pose_match_score(real_images, poses_real_pos))
            + matched_term(disc.pose_match_score(fake_images, poses_fake_pos))
            + mismatched_term(disc.pose_match_score(real_images, poses_real_neg))
            + mismatched_term(disc.pose_match_score(fake_images, poses_fake_neg)))


def gan_loss_gen(fake_images, disc):
    """Non-saturating generator loss, mean h(-logit(fake))."""
    with frozen(disc):
        return F.softplus(-disc.image_logit(fake_images)).mean()


class DisGanLoss(NamedTuple):
    total: torch.Tensor
    adv: torch.Tensor
    r1: torch.Tensor


def r1_penalty(real_images, disc):
    """Mean squared norm of the realness gradient w.r.t. real pixels."""
    images = real_images.detach().requires_grad_(True)
    logits = disc.image_logit(images)
    (grad,) = torch.autograd.grad(logits.sum(), images, create_graph=True)
    return grad.pow(2).sum(dim=tuple(range(1, grad.ndim))).mean()


def gan_loss_dis(real_images, fake_images, disc, lambda_r1) -> DisGanLoss:
    """Non-saturating discriminator loss with R1 on real images.

    `lambda_r1` is the effective weight at this step (0 skips the gradient
    computation entirely, e.g. off-cadence lazy-R1 steps).
    """
    adv = (F.softplus(disc.image_logit(fake_images.detach())).mean()
           + F.softplus(-disc.image_logit(real_images)).mean())
    if lambda_r1 > 0:
        r1 = r1_penalty(real_images, disc)
        return DisGanLoss(total=adv + lambda_r1 * r1, adv=adv, r1=r1)
    return DisGanLoss(total=adv, adv=adv, r1=torch.zeros(()))


# ---------------------------------------------------------------------------
# Identity regularization
# ---------------------------------------------------------------------------


class IdentityEmbedder(nn.Module):
    """Frozen random conv net mapping images to unit-norm 64-vectors.

    Stands in for a pretrained face-identity network: similarities in a
    fixed embedding are all the identity losses need. Weights are seeded
    and never trained; gradients still flow to the input image.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        kw = dict(kernel_size=3, stride=2, padding=1)
        self.conv1 = nn.Conv2d(3, 16, **kw)
        self.conv2 = nn.Conv2d(16, 32, **kw)
        self.conv3 = nn.Conv2d(32, IDENTITY_EMBED_DIM, **kw)
        self.proj = nn.Linear(IDENTITY_EMBED_DIM, IDENTITY_EMBED_DIM)
        gen = torch.Generator()
        gen.manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p[0].numel() if p.ndim > 1 else 1
                p.copy_(torch.randn(p.shape, generator=gen) / fan_in ** 0.5)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images):
        """[B, 3, H, W] -> [B, 64] unit vectors."""
        h = leaky_relu(self.conv1(images))
        h = leaky_relu(self.conv2(h))
        h = leaky_relu(self.conv3(h))
        h = self.proj(h.mean(dim=(2, 3)))
        return F.normalize(h, dim=-1, eps=1e-12)


def identity_similarity(images_a, images_b, embedder):
    """L_z core: mean cosine similarity between the two embedding batches."""
    return (embedder(images_a) * embedder(images_b)).sum(dim=-1).mean()


def identity_contrast(images_a, images_b, embedder, eps_c=1e-8):
    """L_c core: (1 - cosine) / (L1 pixel distance + eps), batch-averaged."""
    cos = (embedder(images_a) * embedder(images_b)).sum(dim=-1)
    l1 = (images_a - images_b).abs().sum(dim=tuple(range(1, images_a.ndim)))
    return ((1.0 - cos) / (l1 + eps_c)).mean()


def identity_loss_z(gen, z1, z2, pose, embedder, generator=None):
    """Render z1 and z2 at one shared pose and score their similarity."""
    img1 = gen.render_batch(z1, [pose] * z1.z_fg.shape[0], generator)["rgb"]
    img2 = gen.render_batch(z2, [pose] * z2.z_fg.shape[0], generator)["rgb"]
    return identity_similarity(img1, img2, embedder)


def identity_loss_c(gen, z, pose_a, pose_b, embedder, eps_c=1e-8, generator=None):
    """Render one latent at two poses; penalize identity drift per pixel moved."""
    if np.array_equal(pose_a.flat, pose_b.flat):
        raise ValueError("identity_loss_c needs two distinct poses")
    batch = z.z_fg.shape[0]
    img1 = gen.render_batch(z, [pose_a] * batch, generator)["rgb"]
    img2 = gen.render_batch(z, [pose_b] * batch, generator)["rgb"]
    return identity_contrast(img1, img2, embedder, eps_c)


# ---------------------------------------------------------------------------
# Density regularization and the regression baseline
# ---------------------------------------------------------------------------


def density_smoothness(density_fn, n_points, sigma_perturb, generator=None):
    """Mean |density(x) - density(x + noise)| over uniform cube points."""
    x = torch.rand(n_points, 3, generator=generator) * 2.0 - 1.0
    delta = torch.randn(n_points, 3, generator=generator) * sigma_perturb
    return (density_fn(x) - density_fn(x + delta)).abs().mean()


def density_reg(gen, z_fg, pose=None, sigma_perturb=0.05, n_points=256,
                generator=None):
    """Density smoothness of the tri-plane field for one latent batch."""
    if z_fg.ndim == 1:
        z_fg = z_fg[None]
    planes = gen.synthesize_triplane(z_fg, pose).planes
    total = 0.0
    for i in range(planes.shape[0]):
        field = gen.foreground_field(planes[i])
        total = total + density_smoothness(lambda x: field(x)[0], n_points,
                                           sigma_perturb, generator)
    return total / planes.shape[0]


def pose_regression_loss(images, poses, disc):
    """Squared error of the linear (yaw, pitch) readout; ablation baseline."""
    pred = disc.regress_pose(images)
    target = torch.as_tensor(
        [[p.yaw, p.pitch] for p in poses], dtype=pred.dtype)
    return (pred - target).pow(2).sum(dim=-1).mean()


# ---------------------------------------------------------------------------
# Totals
# ---------------------------------------------------------------------------


def total_loss_gen(adv, pose, l_z, l_c, l_d, weights: LossWeights):
    """adv + lambda_pose*pose + (lambda_z*L_z + lambda_c*L_c) + lambda_d*L_d."""
    return (adv + weights.lambda_pose * pose
            + weights.lambda_z * l_z + weights.lambda_c * l_c
            + weights.lambda_d * l_d)


def total_loss_dis(adv, pose, weights: LossWeights):
    """adv (R1 included) + lambda_pose*pose."""
    return adv + weights.lambda_pose * pose
