"""Ray-marched volume rendering, background compositing, and upsampling.

The discrete quadrature along a ray with samples t_1 < ... < t_S and spacings
delta_i uses the standard emission-absorption weights

    w_i = T_i * (1 - exp(-sigma_i * delta_i)),   T_i = exp(-sum_{j<i} sigma_j delta_j)

so that sum_i w_i + exp(-sum_i sigma_i delta_i) = 1 identically. The rendered
foreground feature is sum_i w_i f_i, expected depth is the w-weighted mean of
t (defined as `far` on empty rays), and the residual transmittance weights the
background feature during compositing: out = fg + T_bg * bg.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .cameras import CameraPose, RayBundle, generate_rays
from .fields import (FieldConfig, LatentPair, PlaneSynthesizer, FeatureDecoder,
                     BackgroundField, TriPlane, query_triplane)
from .torchutil import leaky_relu

_EMPTY_EPS = 1e-12


@dataclass
class RenderConfig:
    samples_per_ray: int = 24
    near: float = 1.2
    far: float = 4.2
    neural_resolution: int = 16
    output_resolution: int = 32

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.output_resolution < self.neural_resolution:
            raise ValueError("output_resolution must be >= neural_resolution")
        if not self.near < self.far:
            raise ValueError("near must be < far")


@dataclass
class RenderOutput:
    """One rendered view (channel-last, numpy-friendly tensors)."""

    feature_map: torch.Tensor    # [H, W, F] composited low-res features
    rgb: torch.Tensor            # [Ho, Wo, 3] in [0, 1]
    depth: torch.Tensor          # [H, W] expected termination depth
    transmittance: torch.Tensor  # [H, W] residual foreground transparency


def sample_depths(n_rays, cfg: RenderConfig, generator=None, *, dtype=torch.float32):
    """Stratified per-ray depths: one sample per equal bin of [near, far].

    With no generator the bin midpoints are used (deterministic); otherwise
    each ray jitters independently within its bins.
    """
    span = (cfg.far - cfg.near) / cfg.samples_per_ray
    if generator is None:
        u = torch.full((n_rays, cfg.samples_per_ray), 0.5, dtype=dtype)
    else:
        u = torch.rand(n_rays, cfg.samples_per_ray, generator=generator, dtype=dtype)
    offsets = torch.arange(cfg.samples_per_ray, dtype=dtype)
    return cfg.near + (offsets + u) * span


def march_rays(origins, directions, field, cfg: RenderConfig, generator=None,
               return_points=False):
    """March a flat batch of rays through a field closure.

    origins, directions: [N, 3] tensors; field: points [M, 3] ->
    (density [M], feature [M, F]). Returns (feature [N, F], depth [N],
    transmittance [N]) and optionally the sample points and depths.
    """
    n = origins.shape[0]
    t = sample_depths(n, cfg, generator, dtype=origins.dtype)          # [N, S]
    delta = torch.cat([t[:, 1:] - t[:, :-1],
                       cfg.far - t[:, -1:]], dim=1)                    # [N, S]
    points = origins[:, None, :] + t[..., None] * directions[:, None, :]
    density, feat = field(points.reshape(-1, 3))
    density = density.view(n, -1)
    feat = feat.view(n, density.shape[1], -1)

    tau = density * delta
    accum = torch.cumsum(tau, dim=1)
    trans_before = torch.exp(-(accum - tau))       # T_i, exclusive cumsum
    weights = trans_before * (1.0 - torch.exp(-tau))
    feature = (weights[..., None] * feat).sum(dim=1)
    transmittance = torch.exp(-accum[:, -1])

    wsum = weights.sum(dim=1)
    depth_fg = (weights * t).sum(dim=1) / wsum.clamp_min(_EMPTY_EPS)
    depth = torch.where(wsum > _EMPTY_EPS, depth_fg,
                        torch.full_like(wsum, cfg.far))
    if return_points:
        return feature, depth, transmittance, points, t
    return feature, depth, transmittance


def march(rays: RayBundle, field, cfg: RenderConfig, generator=None):
    """RayBundle wrapper around `march_rays`; returns [H, W, ...] maps.

    Tensor dtype follows the bundle's arrays (float64 numpy by default).
    """
    h, w = rays.origins.shape[:2]
    origins = torch.as_tensor(rays.origins).reshape(-1, 3)
    dirs = torch.as_tensor(rays.directions).reshape(-1, 3)
    feature, depth, trans = march_rays(origins, dirs, field, cfg, generator)
    return feature.view(h, w, -1), depth.view(h, w), trans.view(h, w)


def composite(fg, transmittance, bg):
    """Over-composite pre-weighted foreground with background features."""
    return fg + transmittance[..., None] * bg


class Upsampler(nn.Module):
    """Bilinear upsample plus a 3-layer convolutional refiner.

    The first three feature channels are the low-res RGB and bypass the
    refiner as a skip, so a zero-initialized final conv (the default init
    used by `build_generator`) makes the output exactly the bilinear
    upsample of the low-res RGB.
    """

    def __init__(self, cfg: FieldConfig, out_resolution: int):
        super().__init__()
        self.out_resolution = out_resolution
        kw = dict(kernel_size=3, padding=1, padding_mode="replicate")
        self.conv1 = nn.Conv2d(cfg.feature_dim, 32, **kw)
        self.conv2 = nn.Conv2d(32, 32, **kw)
        self.conv3 = nn.Conv2d(32, 3, **kw)

    def forward(self, feature_map):
        """[B, F, H, W] -> [B, 3, out_res, out_res] in [0, 1]."""
        up = torch.nn.functional.interpolate(
            feature_map, size=(self.out_resolution, self.out_resolution),
            mode="bilinear", align_corners=False)
        residual = self.conv3(leaky_relu(self.conv2(leaky_relu(self.conv1(up)))))
        return (up[:, :3] + residual).clamp(0.0, 1.0)


class Generator(nn.Module):
    """Full image generator: tri-plane synthesis, marching, compositing, SR."""

    def __init__(self, field_cfg: FieldConfig, render_cfg: RenderConfig):
        super().__init__()
        self.field_cfg = field_cfg
        self.render_cfg = render_cfg
        self.synthesizer = PlaneSynthesizer(field_cfg)
        self.decoder = FeatureDecoder(field_cfg)
        self.background = BackgroundField(field_cfg)
        self.upsampler = Upsampler(field_cfg, render_cfg.output_resolution)

    def synthesize_triplane(self, z_fg, pose: CameraPose = None) -> TriPlane:
        """Planes for one latent [Z] (or a batch [B, Z])."""
        flat = None
        if self.field_cfg.pose_conditioned_mapping:
            if pose is None:
                raise ValueError("pose-conditioned mapping needs the camera pose")
            pose_list = pose if isinstance(pose, (list, tuple)) else [pose]
            flat = torch.as_tensor(np.stack([p.flat for p in pose_list]),
                                   dtype=z_fg.dtype)
            if z_fg.ndim == 1:
                flat = flat[0]
        return TriPlane(planes=self.synthesizer(z_fg, flat))

    def foreground_field(self, planes):
        """Field closure for `march` over one scene's planes [3, C, R, R]."""
        if isinstance(planes, TriPlane):
            planes = planes.planes

        def field(points):
            clamped = points.clamp(-1.0, 1.0)
            sample = self.decoder(query_triplane(planes, clamped))
            return sample.density, sample.feature

        return field

    def render_batch(self, z: LatentPair, poses, generator=None):
        """Render B scenes at B poses; returns dict of [B, ...] tensors.

        Feature maps and rgb come back channel-first for the discriminator;
        `render` converts to the channel-last RenderOutput layout.
        """
        poses = list(poses)
        batch = len(poses)
        cfg = self.render_cfg
        res = cfg.neural_resolution
        dtype = z.z_fg.dtype
        planes = self.synthesizer(
            z.z_fg, torch.as_tensor(np.stack([p.flat for p in poses]), dtype=dtype)
            if self.field_cfg.pose_conditioned_mapping else None)

        bundles = [generate_rays(p, res, cfg.near, cfg.far) for p in poses]
        origins = torch.as_tensor(np.stack([b.origins for b in bundles]),
                                  dtype=dtype)
        dirs = torch.as_tensor(np.stack([b.directions for b in bundles]),
                               dtype=dtype)

        feats, depths, transs = [], [], []
        for i in range(batch):
            field = self.foreground_field(planes[i])
            feat, depth, trans, points, _ = march_rays(
                origins[i].reshape(-1, 3), dirs[i].reshape(-1, 3), field, cfg,
                generator, return_points=True)
            bg = self.background(z.z_bg[i:i + 1],
                                 points.reshape(1, -1, 3).clamp(-1.0, 1.0))
            bg = bg.view(-1, cfg.samples_per_ray, bg.shape[-1]).mean(dim=1)
            feats.append(composite(feat, trans, bg))
            depths.append(depth)
            transs.append(trans)

        feature_map = torch.stack(feats).view(batch, res, res, -1)
        feature_map = feature_map.permute(0, 3, 1, 2)
        rgb = self.upsampler(feature_map)
        return {
            "feature_map": feature_map,                      # [B, F, h, w]
            "rgb": rgb,                                      # [B, 3, H, W]
            "depth": torch.stack(depths).view(batch, res, res),
            "transmittance": torch.stack(transs).view(batch, res, res),
        }

    def render(self, z: LatentPair, pose: CameraPose, generator=None) -> RenderOutput:
        """Render a single scene; accepts unbatched latents."""
        z_fg = z.z_fg if z.z_fg.ndim == 2 else z.z_fg[None]
        z_bg = z.z_bg if z.z_bg.ndim == 2 else z.z_bg[None]
        out = self.render_batch(LatentPair(z_fg, z_bg), [pose], generator)
        return RenderOutput(
            feature_map=out["feature_map"][0].permute(1, 2, 0),
            rgb=out["rgb"][0].permute(1, 2, 0),
            depth=out["depth"][0],
            transmittance=out["transmittance"][0],
        )
