"""Camera poses, pose-sampling distributions, and pinhole ray generation.

Conventions
-----------
* World frame is right-handed with +y up. Cameras sit on a sphere around
  the origin and look at the origin.
* yaw is rotation about +y; yaw 0 puts the camera on +z ("frontal") and
  positive yaw moves it toward +x. pitch is elevation; positive moves the
  camera up.
* The extrinsic is a 4x4 camera-to-world matrix, OpenGL style: the camera
  looks along its local -z, local +x is image-right, local +y image-up.
* The intrinsic is 3x3 in normalized image coordinates: zero skew, equal
  focal lengths in units of the image side, principal point at (0.5, 0.5).
* A pose is flattened to 25 numbers: row-major 4x4 extrinsic followed by
  row-major 3x3 intrinsic.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, SamplingError

YAW_RANGE = (-math.pi / 2, math.pi / 2)
PITCH_RANGE = (-math.pi / 4, math.pi / 4)

DEFAULT_RADIUS = 2.7
DEFAULT_FOCAL = 1.5

# Uniform-component defaults: the pose range the imbalanced datasets cover.
DEFAULT_UNIFORM_YAW = (-math.radians(50.0), math.radians(50.0))
DEFAULT_UNIFORM_PITCH = (-math.radians(15.0), math.radians(15.0))

DEFAULT_MIN_SEPARATION = math.radians(10.0)


@dataclass(frozen=True)
class CameraPose:
    """A camera on the origin-centered sphere, plus its flat 25-vector."""

    yaw: float
    pitch: float
    radius: float
    focal: float
    flat: np.ndarray  # (25,) float64, extrinsic (16) + intrinsic (9)

    @property
    def extrinsic(self) -> np.ndarray:
        return self.flat[:16].reshape(4, 4)

    @property
    def intrinsic(self) -> np.ndarray:
        return self.flat[16:].reshape(3, 3)

    @property
    def position(self) -> np.ndarray:
        return self.flat[[3, 7, 11]]

    def __eq__(self, other):
        return isinstance(other, CameraPose) and np.array_equal(self.flat, other.flat)

    def __hash__(self):
        return hash(self.flat.tobytes())


def pose_from_angles(yaw: float, pitch: float, radius: float = DEFAULT_RADIUS,
                     focal: float = DEFAULT_FOCAL) -> CameraPose:
    """Build the canonical look-at pose for (yaw, pitch, radius, focal).

    The flat vector is a pure function of the arguments; rebuilding from
    the same angles reproduces it bit for bit.
    """
    if not (YAW_RANGE[0] <= yaw <= YAW_RANGE[1]):
        raise ValueError(f"yaw {yaw} outside [{YAW_RANGE[0]}, {YAW_RANGE[1]}]")
    if not (PITCH_RANGE[0] <= pitch <= PITCH_RANGE[1]):
        raise ValueError(f"pitch {pitch} outside [{PITCH_RANGE[0]}, {PITCH_RANGE[1]}]")
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if focal <= 0:
        raise ValueError(f"focal must be positive, got {focal}")

    sy, cy = math.sin(yaw), math.cos(yaw)
    sp, cp = math.sin(pitch), math.cos(pitch)
    # Camera z axis points from the origin toward the camera (camera looks -z).
    zx, zy, zz = sy * cp, sp, cy * cp
    px, py, pz = radius * zx, radius * zy, radius * zz
    # right = normalize(cross(world_up, z)); world_up = (0, 1, 0).
    rx, rz = zz, -zx
    rnorm = math.hypot(rx, rz)  # = cos(pitch) > 0 within the pitch range
    rx, rz = rx / rnorm, rz / rnorm
    # up = cross(z, right)
    ux = zy * rz
    uy = zz * rx - zx * rz
    uz = -zy * rx

    flat = np.array([
        rx, ux, zx, px,
        0.0, uy, zy, py,
        rz, uz, zz, pz,
        0.0, 0.0, 0.0, 1.0,
        focal, 0.0, 0.5,
        0.0, focal, 0.5,
        0.0, 0.0, 1.0,
    ])
    flat.flags.writeable = False
    return CameraPose(yaw=yaw, pitch=pitch, radius=radius, focal=focal, flat=flat)


def angles_from_pose(pose: CameraPose) -> tuple:
    """Recover (yaw, pitch, radius, focal) from a pose's flat vector."""
    px, py, pz = (float(pose.flat[3]), float(pose.flat[7]), float(pose.flat[11]))
    radius = math.sqrt(px * px + py * py + pz * pz)
    yaw = math.atan2(px, pz)
    pitch = math.asin(max(-1.0, min(1.0, py / radius)))
    return yaw, pitch, radius, float(pose.flat[16])


def angular_distance(a: CameraPose, b: CameraPose) -> float:
    """Great-circle distance between the two view directions, in radians."""
    va = _unit_direction(a.yaw, a.pitch)
    vb = _unit_direction(b.yaw, b.pitch)
    cross = np.cross(va, vb)
    return math.atan2(float(np.linalg.norm(cross)), float(np.dot(va, vb)))


def _unit_direction(yaw, pitch):
    cp = math.cos(pitch)
    return np.array([math.sin(yaw) * cp, math.sin(pitch), math.cos(yaw) * cp])


# ---------------------------------------------------------------------------
# Pose distributions
# ---------------------------------------------------------------------------

KIND_DATASET = "dataset-empirical"
KIND_UNIFORM = "uniform"
KIND_AUPS = "aups-mixture"
_KINDS = (KIND_DATASET, KIND_UNIFORM, KIND_AUPS)


@dataclass
class PoseDistribution:
    """A distribution over camera poses.

    `aups-mixture` draws each sample from the uniform component with
    probability `mixture_ratio` (per-sample Bernoulli), otherwise from a
    uniform-at-random index into `dataset_poses`.
    """

    kind: str
    dataset_poses: list = None
    uniform_yaw_range: tuple = DEFAULT_UNIFORM_YAW
    uniform_pitch_range: tuple = DEFAULT_UNIFORM_PITCH
    mixture_ratio: float = 0.5
    radius: float = DEFAULT_RADIUS
    focal: float = DEFAULT_FOCAL

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(f"unknown pose distribution kind {self.kind!r}")
        if not 0.0 <= self.mixture_ratio <= 1.0:
            raise ConfigurationError(f"mixture_ratio {self.mixture_ratio} outside [0, 1]")

    @classmethod
    def empirical(cls, poses):
        return cls(kind=KIND_DATASET, dataset_poses=list(poses))

    @classmethod
    def uniform(cls, yaw_range=DEFAULT_UNIFORM_YAW, pitch_range=DEFAULT_UNIFORM_PITCH,
                radius=DEFAULT_RADIUS, focal=DEFAULT_FOCAL):
        return cls(kind=KIND_UNIFORM, uniform_yaw_range=tuple(yaw_range),
                   uniform_pitch_range=tuple(pitch_range), radius=radius, focal=focal)

    @classmethod
    def aups(cls, poses, mixture_ratio=0.5, yaw_range=DEFAULT_UNIFORM_YAW,
             pitch_range=DEFAULT_UNIFORM_PITCH, radius=DEFAULT_RADIUS,
             focal=DEFAULT_FOCAL):
        return cls(kind=KIND_AUPS, dataset_poses=list(poses),
                   uniform_yaw_range=tuple(yaw_range),
                   uniform_pitch_range=tuple(pitch_range),
                   mixture_ratio=mixture_ratio, radius=radius, focal=focal)


def sample_pose(dist: PoseDistribution, rng) -> CameraPose:
    """Draw one pose; deterministic given the numpy Generator state."""
    rng = np.random.default_rng(rng)
    if dist.kind == KIND_UNIFORM:
        return _sample_uniform(dist, rng)
    if dist.kind == KIND_DATASET:
        return _sample_empirical(dist, rng)
    # aups-mixture: per-sample Bernoulli choice of component
    if rng.random() < dist.mixture_ratio:
        return _sample_uniform(dist, rng)
    return _sample_empirical(dist, rng)


def _sample_uniform(dist, rng):
    yaw = rng.uniform(*dist.uniform_yaw_range)
    pitch = rng.uniform(*dist.uniform_pitch_range)
    return pose_from_angles(yaw, pitch, dist.radius, dist.focal)


def _sample_empirical(dist, rng):
    if not dist.dataset_poses:
        raise ConfigurationError(
            f"{dist.kind} sampling needs a non-empty dataset_poses list")
    return dist.dataset_poses[int(rng.integers(len(dist.dataset_poses)))]


def sample_negative_pose(positive: CameraPose, dist: PoseDistribution,
                         min_separation: float = DEFAULT_MIN_SEPARATION,
                         rng=None, max_tries: int = 200) -> CameraPose:
    """Rejection-sample a pose at least `min_separation` away from `positive`."""
    if min_separation <= 0:
        raise ValueError(f"min_separation must be positive, got {min_separation}")
    rng = np.random.default_rng(rng)
    for _ in range(max_tries):
        candidate = sample_pose(dist, rng)
        if angular_distance(candidate, positive) >= min_separation:
            return candidate
    raise SamplingError(
        f"no pose at least {min_separation} rad from the positive pose after "
        f"{max_tries} draws; the distribution support looks degenerate")


# ---------------------------------------------------------------------------
# Ray generation
# ---------------------------------------------------------------------------


@dataclass
class RayBundle:
    """One pinhole ray per pixel; directions are unit vectors."""

    origins: np.ndarray     # (H, W, 3)
    directions: np.ndarray  # (H, W, 3)
    near: float
    far: float


def rays_from_camera(extrinsic: np.ndarray, intrinsic: np.ndarray,
                     resolution: int, near: float, far: float) -> RayBundle:
    """Cast one ray per pixel center through an arbitrary pinhole camera."""
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    fx, fy = intrinsic[0, 0], intrinsic[1, 1]
    cx, cy = intrinsic[0, 2], intrinsic[1, 2]
    rot = extrinsic[:3, :3]
    pos = extrinsic[:3, 3]

    pix = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(pix, pix, indexing="xy")  # u: column, v: row (top -> down)
    d_cam = np.stack([(u - cx) / fx, (cy - v) / fy, -np.ones_like(u)], axis=-1)
    d_world = d_cam @ rot.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pos, d_world.shape).copy()
    return RayBundle(origins=origins, directions=d_world, near=near, far=far)


def generate_rays(pose: CameraPose, resolution: int,
                  near: float = 1.2, far: float = 4.2) -> RayBundle:
    """Rays through every pixel center of `pose`'s image plane.

    The center of the image plane projects to the look-at point, so for odd
    resolutions the middle pixel's ray passes through the origin.
    """
    return rays_from_camera(pose.extrinsic, pose.intrinsic, resolution, near, far)


# ---------------------------------------------------------------------------
# Pose CSV (one record per image; column order is normative)
# ---------------------------------------------------------------------------

_EXTRINSIC_COLS = [f"e{i:02d}" for i in range(16)]
_INTRINSIC_COLS = [f"k{i:02d}" for i in range(9)]
POSE_CSV_COLUMNS = ["image_id", "yaw_rad", "pitch_rad", "radius", "focal",
                    *_EXTRINSIC_COLS, *_INTRINSIC_COLS]


def write_pose_csv(path, image_ids, poses):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_CSV_COLUMNS)
        for image_id, pose in zip(image_ids, poses):
            writer.writerow([image_id, repr(float(pose.yaw)), repr(float(pose.pitch)),
                             repr(float(pose.radius)), repr(float(pose.focal)),
                             *(repr(float(x)) for x in pose.flat)])


def read_pose_csv(path):
    """Returns parallel lists (image_ids, poses)."""
    image_ids, poses = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != POSE_CSV_COLUMNS:
            raise ConfigurationError(f"unexpected pose CSV header in {path}")
        for row in reader:
            image_ids.append(row[0])
            flat = np.array([float(x) for x in row[5:]])
            flat.flags.writeable = False
            poses.append(CameraPose(yaw=float(row[1]), pitch=float(row[2]),
                                    radius=float(row[3]), focal=float(row[4]),
                                    flat=flat))
    return image_ids, poses
