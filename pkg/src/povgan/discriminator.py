"""Dual-branched discriminator: shared conv trunk, realness head, pose head,
and a pose encoder.

The realness branch never sees the camera pose; pose information enters only
through the encoder, whose embedding is multiplied elementwise with the pose
branch's image feature to score image/pose agreement. Both heads end in
linear layers; the losses apply softplus to the raw products and logits.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .cameras import CameraPose
from .errors import ConfigurationError
from .torchutil import leaky_relu


@dataclass
class DiscConfig:
    image_resolution: int = 32
    base_channels: int = 32
    pose_embed_dim: int = 32
    head_hidden: int = 128
    encoder_hidden: int = 64

    def __post_init__(self):
        if self.image_resolution % 16 != 0:
            raise ConfigurationError(
                "image_resolution must be divisible by 16 (four stride-2 convs)")

    @property
    def shared_feature_dim(self):
        return 4 * self.base_channels * (self.image_resolution // 16) ** 2


@dataclass
class DiscOutput:
    image_logit: torch.Tensor   # [B] realness, pre-sigmoid
    pose_feature: torch.Tensor  # [B, K]


def poses_to_tensor(poses, dtype=torch.float32):
    """CameraPose, flat array, or a sequence of either -> [B, 25] tensor."""
    if isinstance(poses, torch.Tensor):
        return poses.to(dtype).reshape(-1, 25)
    if isinstance(poses, CameraPose):
        poses = [poses]
    rows = [p.flat if isinstance(p, CameraPose) else np.asarray(p) for p in poses]
    return torch.as_tensor(np.stack(rows), dtype=dtype)


class SharedBlock(nn.Module):
    """Four stride-2 convs then flatten; the trunk both heads read from."""

    def __init__(self, cfg: DiscConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        kw = dict(kernel_size=3, stride=2, padding=1)
        self.conv1 = nn.Conv2d(3, c, **kw)
        self.conv2 = nn.Conv2d(c, 2 * c, **kw)
        self.conv3 = nn.Conv2d(2 * c, 4 * c, **kw)
        self.conv4 = nn.Conv2d(4 * c, 4 * c, **kw)

    def forward(self, images):
        res = self.cfg.image_resolution
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (res, res):
            raise ValueError(
                f"expected images [B, 3, {res}, {res}], got {tuple(images.shape)}")
        h = leaky_relu(self.conv1(images))
        h = leaky_relu(self.conv2(h))
        h = leaky_relu(self.conv3(h))
        h = leaky_relu(self.conv4(h))
        return h.flatten(1)


class _Head(nn.Module):
    def __init__(self, in_dim, hidden, out_dim):
        super().__init__()
        self.l1 = nn.Linear(in_dim, hidden)
        self.l2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.l2(leaky_relu(self.l1(x)))


class PoseEncoder(nn.Module):
    """Flat 25-vector camera parameters -> K-dim embedding."""

    def __init__(self, cfg: DiscConfig):
        super().__init__()
        self.net = _Head(25, cfg.encoder_hidden, cfg.pose_embed_dim)

    def forward(self, pose_flat):
        return self.net(pose_flat)


class DualDiscriminator(nn.Module):
    def __init__(self, cfg: DiscConfig, with_pose_branch: bool = True):
        super().__init__()
        self.cfg = cfg
        self.shared = SharedBlock(cfg)
        self.image_head = _Head(cfg.shared_feature_dim, cfg.head_hidden, 1)
        self.with_pose_branch = with_pose_branch
        if with_pose_branch:
            self.pose_head = _Head(cfg.shared_feature_dim, cfg.head_hidden,
                                   cfg.pose_embed_dim)
            self.pose_encoder = PoseEncoder(cfg)
        # Linear yaw/pitch readout for the pose-regression ablation baseline.
        self.regression_head = nn.Linear(cfg.shared_feature_dim, 2)

    def shared_block(self, images):
        return self.shared(images)

    def image_logit(self, images):
        """Realness logit D^si = image_head(shared(.)), shape [B]."""
        return self.image_head(self.shared(images)).squeeze(-1)

    def pose_feature(self, images):
        """Pose feature D^sp = pose_head(shared(.)), shape [B, K]."""
        self._require_pose_branch()
        return self.pose_head(self.shared(images))

    def encode_pose(self, poses):
        """Pose embedding of CameraPose(s) or flat vectors, shape [B, K]."""
        self._require_pose_branch()
        dtype = next(self.pose_encoder.parameters()).dtype
        return self.pose_encoder(poses_to_tensor(poses, dtype))

    def pose_match_score(self, images, poses):
        """Elementwise product D^sp(image) * embed(pose), shape [B, K]."""
        feature = self.pose_feature(images)
        embedding = self.encode_pose(poses)
        if feature.shape[-1] != embedding.shape[-1]:
            raise ConfigurationError(
                f"pose feature dim {feature.shape[-1]} != embedding dim "
                f"{embedding.shape[-1]}")
        return feature * embedding

    def regress_pose(self, images):
        """(yaw, pitch) readout used by the regression baseline, shape [B, 2]."""
        return self.regression_head(self.shared(images))

    def forward(self, images) -> DiscOutput:
        shared = self.shared(images)
        pose_feature = self.pose_head(shared) if self.with_pose_branch else None
        return DiscOutput(image_logit=self.image_head(shared).squeeze(-1),
                          pose_feature=pose_feature)

    def _require_pose_branch(self):
        if not self.with_pose_branch:
            raise ConfigurationError(
                "discriminator was built without a pose branch")
