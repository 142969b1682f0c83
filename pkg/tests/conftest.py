import math
import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from povgan.data import generate_dataset
from povgan.discriminator import DiscConfig
from povgan.fields import FieldConfig
from povgan.renderer import RenderConfig
from povgan.training import TrainConfig

settings.register_profile("suite", deadline=None, max_examples=30,
                          derandomize=True)
settings.load_profile("suite")

torch.set_num_threads(min(8, os.cpu_count() or 1))


def tiny_field_cfg(**overrides):
    base = dict(z_fg_dim=8, z_bg_dim=8, plane_channels=4, plane_resolution=8,
                feature_dim=6, decoder_hidden=8, mapping_hidden=16,
                bg_hidden=8, bg_pe_octaves=2)
    base.update(overrides)
    return FieldConfig(**base)


def tiny_render_cfg(**overrides):
    base = dict(samples_per_ray=6, neural_resolution=8, output_resolution=16)
    base.update(overrides)
    return RenderConfig(**base)


def tiny_disc_cfg(**overrides):
    base = dict(image_resolution=16, base_channels=4, pose_embed_dim=4,
                head_hidden=8, encoder_hidden=8)
    base.update(overrides)
    return DiscConfig(**base)


def tiny_train_cfg(dataset_dir, **overrides):
    base = dict(dataset=str(dataset_dir), total_steps=4, batch_size=3,
                checkpoint_every=1000, eval_pairs=8, density_points=32,
                id_batch=1, field=tiny_field_cfg(), render=tiny_render_cfg(),
                disc=tiny_disc_cfg())
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """16x16 dataset of 24 images shared by training/eval tests."""
    out = tmp_path_factory.mktemp("data") / "tinyset"
    generate_dataset(24, math.radians(15.0), out, seed=11, resolution=16)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
