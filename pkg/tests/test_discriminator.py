import numpy as np
import pytest
import torch

from fdcheck import check_input_grad, check_param_grads
from conftest import tiny_disc_cfg
from povgan.cameras import pose_from_angles
from povgan.discriminator import (DiscConfig, DualDiscriminator,
                                  poses_to_tensor)
from povgan.errors import ConfigurationError
from povgan.torchutil import init_module


def build_disc(seed=0, **overrides):
    disc = DualDiscriminator(tiny_disc_cfg(**overrides))
    init_module(disc.shared, seed + 1)
    init_module(disc.image_head, seed + 2)
    init_module(disc.pose_head, seed + 3)
    init_module(disc.pose_encoder, seed + 4)
    init_module(disc.regression_head, seed + 5)
    return disc


def random_images(n, res=16, seed=0):
    return torch.rand(n, 3, res, res, generator=torch.Generator().manual_seed(seed))


class TestSharedBlock:
    def test_deterministic(self):
        disc = build_disc()
        x = random_images(2)
        assert torch.equal(disc.shared_block(x), disc.shared_block(x))

    def test_sensitivity(self):
        disc = build_disc()
        zeros = torch.zeros(1, 3, 16, 16)
        ones = torch.ones(1, 3, 16, 16)
        assert (disc.shared_block(zeros) - disc.shared_block(ones)).abs().max() > 0

    def test_shape_error(self):
        disc = build_disc()
        with pytest.raises(ValueError):
            disc.shared_block(torch.rand(1, 3, 8, 8))
        with pytest.raises(ValueError):
            disc.shared_block(torch.rand(3, 16, 16))

    def test_input_gradient_fd(self):
        disc = build_disc().double()
        probe = torch.randn(1, disc.cfg.shared_feature_dim, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(3))
        x = random_images(1, seed=4).double()
        check_input_grad(lambda t: (disc.shared_block(t) * probe).sum(), x,
                         tol=1e-3, max_entries=48)


class TestHeads:
    def test_zero_initialized_heads_output_zero(self):
        disc = build_disc()
        with torch.no_grad():
            disc.image_head.l2.weight.zero_()
            disc.image_head.l2.bias.zero_()
            disc.pose_head.l2.weight.zero_()
            disc.pose_head.l2.bias.zero_()
        x = random_images(3, seed=1)
        assert torch.equal(disc.image_logit(x), torch.zeros(3))
        assert torch.equal(disc.pose_feature(x),
                           torch.zeros(3, disc.cfg.pose_embed_dim))

    def test_deterministic(self):
        disc = build_disc()
        x = random_images(2, seed=2)
        assert torch.equal(disc.image_logit(x), disc.image_logit(x))
        assert torch.equal(disc.pose_feature(x), disc.pose_feature(x))

    def test_image_head_gradient_fd(self):
        disc = build_disc().double()
        x = random_images(2, seed=5).double()
        check_param_grads(lambda: disc.image_logit(x).sum(), disc.image_head,
                          tol=1e-3)

    def test_pose_head_gradient_fd(self):
        disc = build_disc().double()
        x = random_images(2, seed=6).double()
        probe = torch.randn(2, disc.cfg.pose_embed_dim, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(7))
        check_param_grads(lambda: (disc.pose_feature(x) * probe).sum(),
                          disc.pose_head, tol=1e-3)


class TestPoseEncoder:
    def test_deterministic_and_pure(self):
        disc = build_disc()
        pose = pose_from_angles(0.3, 0.1)
        a = disc.encode_pose(pose)
        b = disc.encode_pose(pose)
        assert torch.equal(a, b)

    def test_pose_sensitivity(self):
        disc = build_disc()
        a = disc.encode_pose(pose_from_angles(0.0, 0.0))
        b = disc.encode_pose(pose_from_angles(np.pi / 4, 0.0))
        assert (a - b).norm() > 0

    def test_gradient_fd(self):
        disc = build_disc().double()
        poses = [pose_from_angles(0.2, -0.1), pose_from_angles(-0.4, 0.2)]
        probe = torch.randn(2, disc.cfg.pose_embed_dim, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(8))
        check_param_grads(lambda: (disc.encode_pose(poses) * probe).sum(),
                          disc.pose_encoder, tol=1e-3)

    def test_finite(self):
        disc = build_disc()
        embeddings = disc.encode_pose([pose_from_angles(y, 0.0)
                                       for y in np.linspace(-1.5, 1.5, 50)])
        assert torch.isfinite(embeddings).all()


class TestPoseMatchScore:
    def test_zero_encoder_annihilates(self):
        disc = build_disc()
        with torch.no_grad():
            disc.pose_encoder.net.l2.weight.zero_()
            disc.pose_encoder.net.l2.bias.zero_()
        score = disc.pose_match_score(random_images(2, seed=9),
                                      [pose_from_angles(0.1, 0.0)] * 2)
        assert torch.equal(score, torch.zeros_like(score))

    def test_unit_pose_feature_is_identity_factor(self):
        disc = build_disc()
        with torch.no_grad():
            disc.pose_head.l2.weight.zero_()
            disc.pose_head.l2.bias.fill_(1.0)
        poses = [pose_from_angles(0.2, 0.05), pose_from_angles(-0.3, -0.1)]
        score = disc.pose_match_score(random_images(2, seed=10), poses)
        np.testing.assert_allclose(score.detach().numpy(),
                                   disc.encode_pose(poses).detach().numpy(),
                                   atol=1e-7)

    def test_matches_scalar_product_oracle(self):
        disc = build_disc(seed=3)
        x = random_images(3, seed=11)
        poses = [pose_from_angles(y, 0.0) for y in (-0.5, 0.0, 0.5)]
        score = disc.pose_match_score(x, poses).detach().numpy()
        feature = disc.pose_feature(x).detach().numpy()
        embedding = disc.encode_pose(poses).detach().numpy()
        expected = np.empty_like(score)
        for i in range(score.shape[0]):
            for k in range(score.shape[1]):
                expected[i, k] = feature[i, k] * embedding[i, k]
        np.testing.assert_allclose(score, expected, atol=1e-6)

    def test_bilinear_in_embedding(self):
        disc = build_disc()
        x = random_images(1, seed=12)
        pose = pose_from_angles(0.25, 0.0)
        base = disc.pose_match_score(x, pose)
        with torch.no_grad():
            disc.pose_encoder.net.l2.weight *= 3.0
            disc.pose_encoder.net.l2.bias *= 3.0
        assert torch.allclose(disc.pose_match_score(x, pose), 3.0 * base,
                              atol=1e-6)


class TestBranchSeparation:
    def test_image_head_perturbation_never_moves_pose_score(self):
        disc = build_disc(seed=4)
        x = random_images(2, seed=13)
        poses = [pose_from_angles(0.3, 0.0)] * 2
        before = disc.pose_match_score(x, poses).detach().clone()
        with torch.no_grad():
            disc.image_head.l1.weight += 1.0
            disc.image_head.l2.weight -= 0.5
        assert torch.equal(disc.pose_match_score(x, poses).detach(), before)

    def test_pose_perturbation_never_moves_image_logit(self):
        disc = build_disc(seed=5)
        x = random_images(2, seed=14)
        before = disc.image_logit(x).detach().clone()
        with torch.no_grad():
            disc.pose_head.l1.weight += 1.0
            disc.pose_encoder.net.l1.weight -= 2.0
            disc.regression_head.weight += 3.0
        assert torch.equal(disc.image_logit(x).detach(), before)


class TestMisc:
    def test_forward_output(self):
        disc = build_disc()
        out = disc(random_images(4, seed=15))
        assert out.image_logit.shape == (4,)
        assert out.pose_feature.shape == (4, disc.cfg.pose_embed_dim)

    def test_logits_finite_on_many_images(self):
        disc = build_disc(seed=6)
        for start in range(0, 10_000, 1000):
            x = random_images(1000, seed=16 + start)
            out = disc(x)
            assert torch.isfinite(out.image_logit).all()
            assert torch.isfinite(out.pose_feature).all()

    def test_without_pose_branch(self):
        disc = DualDiscriminator(tiny_disc_cfg(), with_pose_branch=False)
        x = random_images(1, seed=17)
        assert disc(x).pose_feature is None
        with pytest.raises(ConfigurationError):
            disc.pose_feature(x)
        with pytest.raises(ConfigurationError):
            disc.encode_pose(pose_from_angles(0.0, 0.0))

    def test_resolution_must_be_divisible(self):
        with pytest.raises(ConfigurationError):
            DiscConfig(image_resolution=20)

    def test_poses_to_tensor_variants(self):
        pose = pose_from_angles(0.1, 0.05)
        single = poses_to_tensor(pose)
        several = poses_to_tensor([pose, pose.flat])
        assert single.shape == (1, 25)
        assert several.shape == (2, 25)
        assert torch.equal(several[0], several[1])

    def test_regression_head_shape(self):
        disc = build_disc()
        assert disc.regress_pose(random_images(3, seed=18)).shape == (3, 2)
