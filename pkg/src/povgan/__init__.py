"""Desk-scale 3D-aware GAN with a dual-branched discriminator, pose-matching
losses, and uniform pose sampling mixed into the adversarial poses."""

from .cameras import (CameraPose, PoseDistribution, RayBundle, generate_rays,
                      pose_from_angles, angles_from_pose, sample_pose,
                      sample_negative_pose)
from .data import DatasetManifest, SceneSpec, generate_dataset, load_dataset, \
    render_scene_analytic
from .discriminator import DiscConfig, DiscOutput, DualDiscriminator
from .fields import FieldConfig, FieldSample, LatentPair, TriPlane, query_triplane
from .losses import IdentityEmbedder, LossWeights
from .renderer import Generator, RenderConfig, RenderOutput, composite, march
from .training import TrainConfig, TrainState, build_ablation_matrix, \
    build_state, run, train_step

__version__ = "0.1.0"
