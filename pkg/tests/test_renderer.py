import math

import numpy as np
import pytest
import torch

from fdcheck import check_param_grads, rel_err
from conftest import tiny_field_cfg, tiny_render_cfg
from povgan.cameras import generate_rays, pose_from_angles
from povgan.fields import LatentPair
from povgan.renderer import (Generator, RenderConfig, Upsampler, composite,
                             march, march_rays, sample_depths)
from povgan.torchutil import init_module


def straight_rays(n, near=1.0, far=3.0):
    origins = torch.zeros(n, 3, dtype=torch.float64)
    dirs = torch.zeros(n, 3, dtype=torch.float64)
    dirs[:, 2] = 1.0
    return origins, dirs, RenderConfig(samples_per_ray=8, near=near, far=far,
                                       neural_resolution=2, output_resolution=2)


def constant_field(sigma, feature):
    def field(points):
        n = points.shape[0]
        return (torch.full((n,), sigma, dtype=points.dtype),
                torch.as_tensor(feature, dtype=points.dtype).expand(n, -1))
    return field


class TestMarch:
    def test_zero_density(self):
        origins, dirs, cfg = straight_rays(5)
        feat, depth, trans = march_rays(origins, dirs,
                                        constant_field(0.0, [1.0, 2.0, 3.0]), cfg)
        np.testing.assert_allclose(trans.numpy(), 1.0, atol=1e-12)
        np.testing.assert_allclose(feat.numpy(), 0.0, atol=1e-12)
        np.testing.assert_allclose(depth.numpy(), cfg.far, atol=1e-12)

    @pytest.mark.parametrize("sigma", [0.3, 1.0, 2.5])
    def test_beer_lambert_homogeneous(self, sigma):
        """T matches exp(-sigma L) within the O(1/N) discretization bound."""
        origins = torch.zeros(1, 3, dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        length = 2.0
        for n in (16, 32, 64):
            cfg = RenderConfig(samples_per_ray=n, near=1.0, far=1.0 + length,
                               neural_resolution=2, output_resolution=2)
            _, _, trans = march_rays(origins, dirs,
                                     constant_field(sigma, [1.0]), cfg)
            exact = math.exp(-sigma * length)
            bound = exact * (math.exp(sigma * length / (2 * n)) - 1.0) * 1.001
            assert abs(float(trans) - exact) <= bound

    def test_beer_lambert_error_halves(self):
        origins = torch.zeros(1, 3, dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        errors = []
        for n in (16, 32, 64):
            cfg = RenderConfig(samples_per_ray=n, near=1.0, far=3.0,
                               neural_resolution=2, output_resolution=2)
            _, _, trans = march_rays(origins, dirs, constant_field(1.0, [1.0]),
                                     cfg)
            errors.append(abs(float(trans) - math.exp(-2.0)))
        assert errors[1] <= errors[0] / 2
        assert errors[2] <= errors[1] / 2

    def test_opaque_slab_depth(self):
        """A dense thin slab at depth d: depth -> d, transmittance -> 0."""
        slab_lo, slab_hi = 1.8, 1.9

        def field(points):
            z = points[:, 2]
            sigma = torch.where((z >= slab_lo) & (z <= slab_hi),
                                torch.full_like(z, 500.0),
                                torch.zeros_like(z))
            return sigma, torch.ones(points.shape[0], 1, dtype=points.dtype)

        origins = torch.zeros(1, 3, dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        cfg = RenderConfig(samples_per_ray=4096, near=1.0, far=3.0,
                           neural_resolution=2, output_resolution=2)
        _, depth, trans = march_rays(origins, dirs, field, cfg)
        assert float(trans) < 1e-12
        assert abs(float(depth) - slab_lo) < 5e-3  # opaque: terminates at entry

    def test_weight_normalization_identity(self):
        """sum(w) + T == 1 under the discrete formulas."""
        rng = np.random.default_rng(0)
        n = 2000
        origins = torch.as_tensor(rng.uniform(-1, 1, (n, 3)))
        dirs = torch.as_tensor(rng.normal(size=(n, 3)))
        dirs = dirs / dirs.norm(dim=1, keepdim=True)

        def field(points):
            sigma = (points * 3).sin().sum(dim=1).abs() * 2.0
            return sigma, torch.ones(points.shape[0], 1, dtype=points.dtype)

        cfg = RenderConfig(samples_per_ray=24, near=0.5, far=3.5,
                           neural_resolution=2, output_resolution=2)
        t = sample_depths(n, cfg, torch.Generator().manual_seed(0),
                          dtype=torch.float64)
        delta = torch.cat([t[:, 1:] - t[:, :-1], cfg.far - t[:, -1:]], dim=1)
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        sigma, _ = field(pts.reshape(-1, 3))
        tau = (sigma.view(n, -1) * delta)
        accum = torch.cumsum(tau, dim=1)
        weights = torch.exp(-(accum - tau)) * (1 - torch.exp(-tau))
        total = weights.sum(dim=1) + torch.exp(-accum[:, -1])
        np.testing.assert_allclose(total.numpy(), 1.0, atol=1e-6)

    def test_transmittance_monotone(self):
        rng = np.random.default_rng(3)
        sigma = torch.as_tensor(rng.uniform(0, 5, (100, 24)))
        delta = torch.as_tensor(rng.uniform(0.01, 0.2, (100, 24)))
        partial = torch.exp(-torch.cumsum(sigma * delta, dim=1))
        assert (partial[:, 1:] <= partial[:, :-1] + 1e-15).all()

    def test_quadrature_convergence_vs_oracle(self):
        """Rendered feature error vs the N=4096 oracle halves as N doubles."""
        def field(points):
            z = points[:, 2]
            sigma = 1.0 + 0.2 * torch.sin(0.7 * z)
            feat = torch.stack([0.5 + 0.2 * torch.cos(0.5 * z),
                                0.8 + 0.1 * z], dim=1)
            return sigma, feat

        origins = torch.zeros(1, 3, dtype=torch.float64)
        dirs = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)

        def render(n):
            cfg = RenderConfig(samples_per_ray=n, near=1.0, far=3.0,
                               neural_resolution=2, output_resolution=2)
            feat, _, _ = march_rays(origins, dirs, field, cfg)
            return feat.numpy()[0]

        oracle = render(4096)
        errors = [np.abs(render(n) - oracle).max() for n in (16, 32, 64)]
        assert errors[1] <= errors[0] / 2
        assert errors[2] <= errors[1] / 2

    def test_stratified_sampling_stays_in_bins(self):
        cfg = RenderConfig(samples_per_ray=10, near=1.0, far=2.0,
                           neural_resolution=2, output_resolution=2)
        t = sample_depths(100, cfg, torch.Generator().manual_seed(7))
        width = (cfg.far - cfg.near) / cfg.samples_per_ray
        lo = cfg.near + torch.arange(10) * width
        assert (t >= lo).all() and (t < lo + width).all()
        assert (t[:, 1:] > t[:, :-1]).all()

    def test_march_raybundle_wrapper(self):
        rays = generate_rays(pose_from_angles(0.0, 0.0), 4, 1.0, 3.0)
        cfg = RenderConfig(samples_per_ray=6, near=1.0, far=3.0,
                           neural_resolution=4, output_resolution=4)
        feat, depth, trans = march(rays, constant_field(0.5, [1.0, 0.0]), cfg)
        assert feat.shape == (4, 4, 2)
        assert depth.shape == (4, 4) and trans.shape == (4, 4)


class TestComposite:
    def test_empty_foreground(self):
        bg = torch.rand(5, 3)
        out = composite(torch.zeros(5, 3), torch.ones(5), bg)
        assert torch.equal(out, bg)

    def test_opaque_foreground(self):
        fg = torch.rand(5, 3)
        out = composite(fg, torch.zeros(5), torch.rand(5, 3))
        assert torch.equal(out, fg)

    def test_half_transmittance_arithmetic(self):
        out = composite(torch.full((1, 1), 0.2), torch.full((1,), 0.5),
                        torch.full((1, 1), 0.8))
        assert float(out) == pytest.approx(0.6, abs=1e-7)


class TestUpsampler:
    def test_identity_initialized_refiner(self):
        cfg = tiny_field_cfg()
        up = Upsampler(cfg, 16)
        init_module(up, 0, final_zero="conv3")
        gen = torch.Generator().manual_seed(0)
        feat = torch.rand(2, cfg.feature_dim, 8, 8, generator=gen)
        expected = torch.nn.functional.interpolate(
            feat, size=(16, 16), mode="bilinear", align_corners=False)[:, :3]
        assert torch.equal(up(feat), expected.clamp(0, 1))

    def test_constant_input_constant_output(self):
        """Spatial constancy survives bilinear + replicate-padded convs."""
        cfg = tiny_field_cfg()
        up = Upsampler(cfg, 16)
        init_module(up, 3)
        feat = torch.full((1, cfg.feature_dim, 8, 8), 0.4)
        out = up(feat)
        spatial_spread = (out.amax(dim=(2, 3)) - out.amin(dim=(2, 3)))
        assert float(spatial_spread.max()) < 1e-6

    def test_output_in_unit_range(self):
        cfg = tiny_field_cfg()
        up = Upsampler(cfg, 16)
        init_module(up, 4)
        out = up(torch.randn(1, cfg.feature_dim, 8, 8) * 5)
        assert (out >= 0).all() and (out <= 1).all()

    def test_refiner_gradient_fd(self):
        cfg = tiny_field_cfg()
        up = Upsampler(cfg, 8).double()
        init_module(up, 5)
        # Keep outputs inside (0, 1) so the clamp is inactive, and bias the
        # hidden convs away from the leaky-relu kink (finite differences are
        # meaningless across the kink).
        with torch.no_grad():
            for p in up.parameters():
                p *= 0.05
            up.conv1.bias += 0.5
            up.conv2.bias += 0.5
        gen = torch.Generator().manual_seed(1)
        feat = torch.rand(1, cfg.feature_dim, 4, 4, dtype=torch.float64,
                          generator=gen) * 0.5 + 0.25
        h1 = torch.nn.functional.leaky_relu(up.conv1(
            torch.nn.functional.interpolate(feat, size=(8, 8), mode="bilinear",
                                            align_corners=False)), 0.2)
        assert float(up.conv1(torch.nn.functional.interpolate(
            feat, size=(8, 8), mode="bilinear",
            align_corners=False)).abs().min()) > 1e-3
        assert float(up.conv2(h1).abs().min()) > 1e-3
        probe = torch.randn(1, 3, 8, 8, dtype=torch.float64, generator=gen)
        check_param_grads(lambda: (up(feat) * probe).sum(), up, tol=1e-3,
                          max_entries=16)


def build_generator(seed=0, **render_overrides):
    gen = Generator(tiny_field_cfg(), tiny_render_cfg(**render_overrides))
    init_module(gen.synthesizer, seed + 1)
    init_module(gen.decoder, seed + 2)
    init_module(gen.background, seed + 3)
    init_module(gen.upsampler, seed + 4, final_zero="conv3")
    return gen


class TestRender:
    def test_deterministic(self):
        gen = build_generator()
        z = LatentPair.sample(gen.field_cfg, 1, torch.Generator().manual_seed(0))
        z = LatentPair(z.z_fg[0], z.z_bg[0])
        pose = pose_from_angles(0.2, 0.05)
        a = gen.render(z, pose)
        b = gen.render(z, pose)
        assert torch.equal(a.rgb, b.rgb)
        assert torch.equal(a.depth, b.depth)
        assert torch.equal(a.feature_map, b.feature_map)
        assert torch.equal(a.transmittance, b.transmittance)

    def test_pose_dependence(self):
        gen = build_generator()
        z = LatentPair.sample(gen.field_cfg, 1, torch.Generator().manual_seed(1))
        z = LatentPair(z.z_fg[0], z.z_bg[0])
        a = gen.render(z, pose_from_angles(0.0, 0.0))
        b = gen.render(z, pose_from_angles(0.6, 0.0))
        assert float((a.rgb - b.rgb).abs().mean()) > 0

    def test_output_contracts(self):
        gen = build_generator()
        z = LatentPair.sample(gen.field_cfg, 1, torch.Generator().manual_seed(2))
        z = LatentPair(z.z_fg[0], z.z_bg[0])
        out = gen.render(z, pose_from_angles(-0.4, 0.1))
        cfg = gen.render_cfg
        assert out.rgb.shape == (16, 16, 3)
        assert out.feature_map.shape == (8, 8, gen.field_cfg.feature_dim)
        assert (out.rgb >= 0).all() and (out.rgb <= 1).all()
        assert (out.transmittance >= 0).all() and (out.transmittance <= 1).all()
        assert (out.depth >= cfg.near).all() and (out.depth <= cfg.far).all()

    def test_zero_density_gives_background(self):
        """Decoder rigged to emit ~zero density: image == upsampled bg."""
        gen = build_generator()
        with torch.no_grad():
            gen.decoder.out.weight.zero_()
            gen.decoder.out.bias.zero_()
            gen.decoder.out.bias[0] = -10.0  # density = softplus(-10) ~ 4.5e-5
        z = LatentPair.sample(gen.field_cfg, 1, torch.Generator().manual_seed(3))
        pose = pose_from_angles(0.1, 0.0)
        out = gen.render(LatentPair(z.z_fg[0], z.z_bg[0]), pose)

        # independent background-only composition over the same sample points
        cfg = gen.render_cfg
        rays = generate_rays(pose, cfg.neural_resolution, cfg.near, cfg.far)
        origins = torch.as_tensor(rays.origins, dtype=torch.float32).reshape(-1, 3)
        dirs = torch.as_tensor(rays.directions, dtype=torch.float32).reshape(-1, 3)
        t = sample_depths(origins.shape[0], cfg)
        pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :])
        with torch.no_grad():
            bg = gen.background(z.z_bg, pts.reshape(1, -1, 3).clamp(-1, 1))
        bg = bg.view(-1, cfg.samples_per_ray, bg.shape[-1]).mean(dim=1)
        res = cfg.neural_resolution
        bg_map = bg.view(res, res, -1).permute(2, 0, 1)[None]
        with torch.no_grad():
            expected = gen.upsampler(bg_map)[0].permute(1, 2, 0)
        assert float((out.rgb - expected).abs().max()) < 1e-3
        assert float(out.transmittance.min()) > 0.999

    def test_render_batch_matches_single(self):
        gen = build_generator()
        z = LatentPair.sample(gen.field_cfg, 2, torch.Generator().manual_seed(4))
        poses = [pose_from_angles(0.0, 0.0), pose_from_angles(0.5, -0.1)]
        batch = gen.render_batch(z, poses)
        single = gen.render(LatentPair(z.z_fg[1], z.z_bg[1]), poses[1])
        np.testing.assert_allclose(batch["rgb"][1].permute(1, 2, 0).detach(),
                                   single.rgb.detach(), atol=1e-6)

    def test_end_to_end_gradient_to_latent(self):
        """d(mean pixel)/d(z_fg) matches central differences on a 4x4 render."""
        gen = build_generator(seed=9).double()
        pose = pose_from_angles(0.15, 0.0)
        gen.render_cfg.neural_resolution = 4
        gen.render_cfg.output_resolution = 8
        g = torch.Generator().manual_seed(5)
        z_fg = torch.randn(1, gen.field_cfg.z_fg_dim, dtype=torch.float64,
                           generator=g)
        z_bg = torch.randn(1, gen.field_cfg.z_bg_dim, dtype=torch.float64,
                           generator=g)
        z_fg.requires_grad_(True)

        def loss():
            out = gen.render_batch(LatentPair(z_fg, z_bg), [pose])
            return out["rgb"].mean()

        value = loss()
        (grad,) = torch.autograd.grad(value, z_fg)
        eps = 1e-5
        rng = np.random.default_rng(0)
        for i in sorted(rng.choice(z_fg.numel(), size=6, replace=False)):
            with torch.no_grad():
                z_fg.reshape(-1)[i] += eps
            plus = float(loss().detach())
            with torch.no_grad():
                z_fg.reshape(-1)[i] -= 2 * eps
            minus = float(loss().detach())
            with torch.no_grad():
                z_fg.reshape(-1)[i] += eps
            fd = (plus - minus) / (2 * eps)
            assert rel_err(float(grad.reshape(-1)[i]), fd, floor=1e-8) < 1e-3
