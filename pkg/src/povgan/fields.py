"""Neural scene representation: tri-plane foreground field and background MLP.

The foreground is three axis-aligned feature planes over [-1,1]^3. A point's
plane feature is the sum of bilinear lookups on its three projections; a small
MLP decodes that feature into (density, appearance feature). The background
is an MLP over positionally-encoded 3D points, conditioned on its own latent.

Shape conventions: latents [B, Z], planes [B, 3, C, R, R], point batches
[N, 3] or [B, N, 3], features channel-last.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .torchutil import leaky_relu


@dataclass
class FieldConfig:
    z_fg_dim: int = 64
    z_bg_dim: int = 512
    plane_channels: int = 16
    plane_resolution: int = 32
    feature_dim: int = 16          # first 3 channels are RGB after activation
    decoder_hidden: int = 64
    mapping_hidden: int = 128
    bg_hidden: int = 64
    bg_pe_octaves: int = 4
    pose_conditioned_mapping: bool = False

    def __post_init__(self):
        if self.feature_dim < 3:
            raise ValueError("feature_dim must be >= 3 (RGB channels)")


@dataclass
class LatentPair:
    """Foreground and background latents driving one scene."""

    z_fg: torch.Tensor
    z_bg: torch.Tensor

    @classmethod
    def sample(cls, cfg: FieldConfig, batch: int, generator=None):
        return cls(z_fg=torch.randn(batch, cfg.z_fg_dim, generator=generator),
                   z_bg=torch.randn(batch, cfg.z_bg_dim, generator=generator))


@dataclass
class TriPlane:
    """Three feature planes (XY, XZ, YZ) over the [-1,1]^3 cube."""

    planes: torch.Tensor  # [3, C, R, R] or [B, 3, C, R, R]


@dataclass
class FieldSample:
    density: torch.Tensor   # [...], >= 0
    feature: torch.Tensor   # [..., F], first 3 channels in [0, 1]


class PlaneSynthesizer(nn.Module):
    """Maps z_fg (optionally with the flat camera vector) to tri-planes."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = cfg.z_fg_dim + (25 if cfg.pose_conditioned_mapping else 0)
        self.hidden = nn.Linear(in_dim, cfg.mapping_hidden)
        self.out = nn.Linear(cfg.mapping_hidden,
                             3 * cfg.plane_channels * cfg.plane_resolution ** 2)

    def forward(self, z_fg, pose_flat=None):
        if self.cfg.pose_conditioned_mapping:
            if pose_flat is None:
                raise ValueError("pose-conditioned mapping needs pose_flat")
            z_fg = torch.cat([z_fg, pose_flat.to(z_fg.dtype)], dim=-1)
        planes = self.out(leaky_relu(self.hidden(z_fg)))
        c, r = self.cfg.plane_channels, self.cfg.plane_resolution
        return planes.view(*z_fg.shape[:-1], 3, c, r, r)


def _bilinear_plane(plane, uv):
    """Bilinear lookup on one plane. plane [C,R,R], uv [N,2] in [-1,1].

    plane[c, i, j] is the texel at coordinates (u_j, v_i) with
    u_j = -1 + 2j/(R-1) (align-corners grid); out-of-range uv clamps.
    """
    res = plane.shape[-1]
    p = (uv.clamp(-1.0, 1.0) + 1.0) * 0.5 * (res - 1)
    i0 = p.floor().clamp(0, res - 2).to(torch.long)
    frac = p - i0.to(p.dtype)
    fu, fv = frac[:, 0], frac[:, 1]
    j0, i0 = i0[:, 0], i0[:, 1]
    c00 = plane[:, i0, j0]          # [C, N]
    c01 = plane[:, i0, j0 + 1]
    c10 = plane[:, i0 + 1, j0]
    c11 = plane[:, i0 + 1, j0 + 1]
    top = c00 + (c01 - c00) * fu
    bot = c10 + (c11 - c10) * fu
    return (top + (bot - top) * fv).T  # [N, C]


def query_triplane(planes, points):
    """Sum of the three plane lookups at each point's projections.

    planes: TriPlane or tensor [3, C, R, R]; points: [N, 3], clamped to the
    cube. Returns [N, C].
    """
    if isinstance(planes, TriPlane):
        planes = planes.planes
    xy = _bilinear_plane(planes[0], points[:, (0, 1)])
    xz = _bilinear_plane(planes[1], points[:, (0, 2)])
    yz = _bilinear_plane(planes[2], points[:, (1, 2)])
    return xy + xz + yz


def rgb_feature_activation(raw):
    """Squash the first 3 channels to [0,1]; pass the rest through."""
    return torch.cat([torch.sigmoid(raw[..., :3]), raw[..., 3:]], dim=-1)


class FeatureDecoder(nn.Module):
    """Plane feature -> (density, appearance feature)."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.decoder_hidden
        self.l1 = nn.Linear(cfg.plane_channels, h)
        self.l2 = nn.Linear(h, h)
        self.out = nn.Linear(h, 1 + cfg.feature_dim)

    def forward(self, feature) -> FieldSample:
        raw = self.out(leaky_relu(self.l2(leaky_relu(self.l1(feature)))))
        density = torch.nn.functional.softplus(raw[..., 0])
        return FieldSample(density=density,
                           feature=rgb_feature_activation(raw[..., 1:]))


def positional_encoding(x, octaves: int):
    """[..., 3] -> [..., 3 + 6*octaves]: raw coords plus sin/cos ladders."""
    terms = [x]
    for k in range(octaves):
        scaled = x * (torch.pi * 2.0 ** k)
        terms.append(torch.sin(scaled))
        terms.append(torch.cos(scaled))
    return torch.cat(terms, dim=-1)


class BackgroundField(nn.Module):
    """z_bg-conditioned MLP over encoded 3D points.

    The input layer is linear in concat(pe(x), z_bg), so the z_bg projection
    is computed once per scene and broadcast over points.
    """

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.cfg = cfg
        self.pe_dim = 3 + 6 * cfg.bg_pe_octaves
        h = cfg.bg_hidden
        self.l1 = nn.Linear(self.pe_dim + cfg.z_bg_dim, h)
        self.l2 = nn.Linear(h, h)
        self.out = nn.Linear(h, cfg.feature_dim)

    def forward(self, z_bg, points):
        """z_bg [B, Z], points [B, N, 3] -> [B, N, F]."""
        w = self.l1.weight
        z_term = z_bg @ w[:, self.pe_dim:].T + self.l1.bias  # [B, h]
        pe = positional_encoding(points, self.cfg.bg_pe_octaves)
        h = pe @ w[:, :self.pe_dim].T + z_term[:, None, :]
        raw = self.out(leaky_relu(self.l2(leaky_relu(h))))
        return rgb_feature_activation(raw)
