"""Procedural multi-view dataset: analytic renders of randomized head-proxy
scenes under a controllable, deliberately frontal-heavy pose distribution.

Each scene is a Lambertian ellipsoid with surface blobs under one directional
light, over a vertical-gradient background. Blob placement is constrained so
every scene carries side-view-only information: blobs[0] is a flush surface
patch far enough around the side to be invisible from any |yaw| <= 20 degrees
(flush means hemisphere-exact visibility: no bump pokes past the silhouette),
and blobs[1] is a bump on one side only, so mirrored views never match.

Directory layout (normative; third-party datasets may use it too):
    images/NNNNNN.png      8-bit RGB
    depth/NNNNNN.f32       raw little-endian float32, H*W row-major
    poses.csv              see cameras.POSE_CSV_COLUMNS
    manifest.json          counts, distribution parameters, seed
"""

import json
import math
import os
from dataclasses import dataclass, asdict, field

import numpy as np
from PIL import Image

from . import cameras
from .cameras import CameraPose, generate_rays, pose_from_angles, write_pose_csv

AMBIENT = 0.25
DEFAULT_NEAR = 1.2
DEFAULT_FAR = 4.2

# Two blobs are guaranteed invisible from the frontal cone (|yaw| <=
# HIDDEN_SAFE_YAW, |pitch| <= 15 deg) yet visible from steep yaw:
#
# blobs[0], a flush surface patch: at camera distance 2.7 the low-elevation
# horizon sits well short of 90 degrees; frontal-cone cameras see surface
# azimuths up to ~102 degrees while a 50-degree camera reaches ~114+. The
# patch's front rim is pinned inside that gap by solving for the radius, and
# painting is clipped to the FLUSH_EL_BAND elevation band so the patch cannot
# peek over the top of the head.
FLUSH_FRONT_RIM_AZ = (math.radians(102.5), math.radians(105.0))
FLUSH_CENTER_AZ = (math.radians(134.0), math.radians(142.0))
FLUSH_EL_BAND = math.radians(12.0)
HIDDEN_SAFE_YAW = math.radians(20.0)
#
# blobs[1], a silhouette bump: a sphere far around the back whose apparent
# lateral extent stays inside the head's outline for frontal-cone cameras but
# pokes beyond the silhouette from steep same-side yaw (like an ear). Its
# distance from the origin is solved per scene, in angular (perspective-aware)
# terms since the bump sits behind the origin plane and projects smaller.
SIL_BUMP_AZ = (math.radians(156.0), math.radians(164.0))
SIL_BUMP_VIS_MARGIN = 0.05   # radians beyond the silhouette at yaw 50 (~2.5 px)
SIL_BUMP_HID_MARGIN = 0.01   # radians inside the silhouette at yaw 20
# blobs[2]: one-sided bump inside the visible range, breaking mirror symmetry.
ASYM_AZIMUTH = (math.radians(42.0), math.radians(68.0))


@dataclass
class SceneSpec:
    """Parameters of one procedural scene; all geometry inside [-1,1]^3.

    The first `n_flush` blobs are flush surface patches (painted decals on
    the ellipsoid); the rest are protruding spheres.
    """

    seed: int
    axes: np.ndarray        # (3,) ellipsoid semi-axes
    albedo: np.ndarray      # (3,) base color
    blob_centers: np.ndarray  # (n_blobs, 3)
    blob_radii: np.ndarray    # (n_blobs,)
    blob_colors: np.ndarray   # (n_blobs, 3)
    bg_top: np.ndarray      # (3,)
    bg_bottom: np.ndarray   # (3,)
    light_dir: np.ndarray   # (3,) unit, points toward the light
    n_flush: int = 1

    @classmethod
    def random(cls, seed: int) -> "SceneSpec":
        rng = np.random.default_rng(seed)
        axes = rng.uniform([0.50, 0.56, 0.48], [0.62, 0.70, 0.60])
        albedo = rng.uniform(0.25, 0.80, 3)

        side = rng.choice([-1.0, 1.0])
        centers, radii, colors = [], [], []

        el = rng.uniform(-0.03, 0.06)
        center = _surface_point(axes, side * rng.uniform(*FLUSH_CENTER_AZ), el, 1.0)
        rim = _surface_point(axes, side * rng.uniform(*FLUSH_FRONT_RIM_AZ), el, 1.0)
        centers.append(center)
        radii.append(float(np.linalg.norm(center - rim)))
        colors.append(_contrasting_color(rng, albedo))

        side_b = rng.choice([-1.0, 1.0])
        az_b = rng.uniform(*SIL_BUMP_AZ)
        r_b = rng.uniform(0.15, 0.20)
        dist_b = _solve_bump_distance(axes, az_b, r_b)
        el_b = rng.uniform(-0.05, 0.15)
        centers.append(dist_b * np.array([
            side_b * math.sin(az_b) * math.cos(el_b), math.sin(el_b),
            math.cos(az_b) * math.cos(el_b)]))
        radii.append(r_b)
        colors.append(rng.uniform(0.1, 0.9, 3))

        az = rng.choice([-1.0, 1.0]) * rng.uniform(*ASYM_AZIMUTH)
        el = rng.uniform(-0.25, 0.45)
        centers.append(_surface_point(axes, az, el, 1.01))
        radii.append(rng.uniform(0.18, 0.26))
        colors.append(_contrasting_color(rng, albedo))

        for _ in range(rng.integers(0, 2)):
            az = rng.uniform(-1.3, 1.3)
            el = rng.uniform(-0.5, 0.9)
            centers.append(_surface_point(axes, az, el, 1.0))
            radii.append(rng.uniform(0.08, 0.16))
            colors.append(rng.uniform(0.1, 0.9, 3))

        lx = rng.choice([-1.0, 1.0]) * rng.uniform(0.35, 0.60)
        light = np.array([lx, rng.uniform(0.40, 0.70), rng.uniform(0.50, 0.80)])
        light /= np.linalg.norm(light)

        return cls(seed=int(seed), axes=axes, albedo=albedo,
                   blob_centers=np.array(centers), blob_radii=np.array(radii),
                   blob_colors=np.array(colors),
                   bg_top=rng.uniform(0.05, 0.45, 3),
                   bg_bottom=rng.uniform(0.45, 0.95, 3),
                   light_dir=light)


def _surface_point(axes, azimuth, elevation, scale):
    """Point on (slightly outside) the ellipsoid in direction (azimuth, elevation)."""
    d = np.array([math.sin(azimuth) * math.cos(elevation), math.sin(elevation),
                  math.cos(azimuth) * math.cos(elevation)])
    t = 1.0 / math.sqrt(float(np.sum((d / axes) ** 2)))
    return d * t * scale


def _solve_bump_distance(axes, az_b, r_b, camera_dist=2.7):
    """Distance from the origin for the silhouette bump's center.

    The bump edge's angular offset from the view axis, seen from a camera at
    yaw g on the bump's side, is (d*sin(az-g) + r) / (D + d*|cos(az-g)|).
    The lower bound makes it clear the silhouette by SIL_BUMP_VIS_MARGIN at
    yaw 50; the upper keeps it SIL_BUMP_HID_MARGIN inside at yaw 20.
    """
    def bound(gamma, sil, margin):
        theta = sil / camera_dist + margin
        delta = az_b - gamma
        return (theta * camera_dist - r_b) / (math.sin(delta)
                                              - theta * abs(math.cos(delta)))

    sil20 = math.hypot(axes[0] * math.cos(math.radians(20)),
                       axes[2] * math.sin(math.radians(20)))
    sil50 = math.hypot(axes[0] * math.cos(math.radians(50)),
                       axes[2] * math.sin(math.radians(50)))
    lo = bound(math.radians(50), sil50, SIL_BUMP_VIS_MARGIN)
    hi = bound(math.radians(20), sil20, -SIL_BUMP_HID_MARGIN)
    return 0.5 * (lo + hi)


def _contrasting_color(rng, albedo):
    """A color pushed toward the far corner of the cube from `albedo`."""
    corner = (albedo < 0.5).astype(float)
    return np.clip(corner + rng.uniform(-0.15, 0.15, 3), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Analytic renderer (the ground-truth oracle; no neural components)
# ---------------------------------------------------------------------------


def _intersect_ellipsoid(origins, dirs, axes):
    """Smallest positive ray parameter for x^T diag(1/a^2) x = 1, else inf."""
    o = origins / axes
    d = dirs / axes
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - 1.0
    return _smallest_positive_root(a, b, c)


def _intersect_sphere(origins, dirs, center, radius):
    o = origins - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(o * dirs, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    return _smallest_positive_root(a, b, c)


def _smallest_positive_root(a, b, c):
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    t = np.where(t0 > 1e-6, t0, t1)
    return np.where(hit & (t > 1e-6), t, np.inf)


def render_scene_analytic(spec: SceneSpec, pose: CameraPose, resolution: int,
                          near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR):
    """Exact ray-traced (rgb, depth) for a scene; rgb in [0,1], depth = far on miss."""
    rays = generate_rays(pose, resolution, near, far)
    origins = rays.origins.reshape(-1, 3)
    dirs = rays.directions.reshape(-1, 3)
    n = origins.shape[0]

    t_best = _intersect_ellipsoid(origins, dirs, spec.axes)
    obj_id = np.where(np.isfinite(t_best), 0, -1)
    for k in range(spec.n_flush, len(spec.blob_radii)):
        t_k = _intersect_sphere(origins, dirs, spec.blob_centers[k],
                                spec.blob_radii[k])
        closer = t_k < t_best
        t_best = np.where(closer, t_k, t_best)
        obj_id = np.where(closer, k + 1, obj_id)

    # Background: vertical gradient over image rows.
    v = (np.arange(resolution) + 0.5) / resolution
    bg = spec.bg_top[None, :] + (spec.bg_bottom - spec.bg_top)[None, :] * v[:, None]
    rgb = np.repeat(bg[:, None, :], resolution, axis=1).reshape(n, 3)

    hit = obj_id >= 0
    if np.any(hit):
        t_hit = t_best[hit]
        points = origins[hit] + t_hit[:, None] * dirs[hit]
        on_body = obj_id[hit] == 0
        normals = np.where(
            on_body[:, None],
            points / (spec.axes ** 2),
            points - spec.blob_centers[np.maximum(obj_id[hit] - 1, 0)])
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        lambert = np.clip(normals @ spec.light_dir, 0.0, None)
        base = np.empty((hit.sum(), 3))
        base[on_body] = spec.albedo
        # Flush patches recolor the ellipsoid surface near their centers,
        # within a low-elevation band (no peeking over the top of the head).
        elevation = np.arcsin(np.clip(
            points[:, 1] / np.linalg.norm(points, axis=-1), -1.0, 1.0))
        for k in range(spec.n_flush):
            near_patch = (np.linalg.norm(points - spec.blob_centers[k], axis=-1)
                          < spec.blob_radii[k])
            base[on_body & near_patch & (np.abs(elevation) <= FLUSH_EL_BAND)] = \
                spec.blob_colors[k]
        for k in range(spec.n_flush, len(spec.blob_radii)):
            base[obj_id[hit] == k + 1] = spec.blob_colors[k]
        rgb[hit] = base * (AMBIENT + (1.0 - AMBIENT) * lambert[:, None])

    depth = np.where(hit, np.minimum(t_best, far), far)
    return (np.clip(rgb, 0.0, 1.0).reshape(resolution, resolution, 3),
            depth.reshape(resolution, resolution))


# ---------------------------------------------------------------------------
# Dataset generation and loading
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    n_images: int
    resolution: int
    yaw_std: float           # radians
    pitch_std: float         # radians
    yaw_clip: float          # radians, truncation half-width
    pitch_clip: float
    radius: float
    focal: float
    near: float
    far: float
    seed: int

    def save(self):
        payload = {k: v for k, v in asdict(self).items() if k != "root"}
        with open(os.path.join(self.root, "manifest.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = _manifest_root(root)
        path = os.path.join(root, "manifest.json")
        if not os.path.exists(path):
            raise FileNotFoundError(f"dataset manifest not found: {path}")
        with open(path) as fh:
            return cls(root=root, **json.load(fh))


def _manifest_root(path):
    path = str(path)
    return os.path.dirname(path) if path.endswith("manifest.json") else path


def _truncated_normal(rng, std, clip, size):
    """Normal(0, std) samples rejected outside [-clip, clip]."""
    if std == 0.0:
        return np.zeros(size)
    out = rng.normal(0.0, std, size)
    bad = np.abs(out) > clip
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > clip
    return out


def generate_dataset(n_images: int, yaw_std: float, out_dir,
                     seed: int = 0, resolution: int = 32,
                     pitch_std: float = math.radians(5.0),
                     yaw_clip: float = math.radians(50.0),
                     pitch_clip: float = math.radians(15.0),
                     radius: float = cameras.DEFAULT_RADIUS,
                     focal: float = cameras.DEFAULT_FOCAL,
                     near: float = DEFAULT_NEAR,
                     far: float = DEFAULT_FAR) -> DatasetManifest:
    """Render `n_images` random scenes at truncated-Gaussian poses.

    yaw ~ N(0, yaw_std) truncated to [-yaw_clip, yaw_clip]; pitch likewise.
    Deterministic given `seed`; every image gets a pose row and a depth map.
    """
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)

    rng = np.random.default_rng(seed)
    yaws = _truncated_normal(rng, yaw_std, yaw_clip, n_images)
    pitches = _truncated_normal(rng, pitch_std, pitch_clip, n_images)
    scene_seeds = rng.integers(0, 2 ** 63 - 1, n_images)

    ids, poses = [], []
    for i in range(n_images):
        pose = pose_from_angles(float(yaws[i]), float(pitches[i]), radius, focal)
        spec = SceneSpec.random(int(scene_seeds[i]))
        rgb, depth = render_scene_analytic(spec, pose, resolution, near, far)
        image_id = f"{i:06d}"
        Image.fromarray((rgb * 255.0).round().astype(np.uint8)).save(
            os.path.join(out_dir, "images", f"{image_id}.png"))
        depth.astype("<f4").tofile(os.path.join(out_dir, "depth", f"{image_id}.f32"))
        ids.append(image_id)
        poses.append(pose)

    write_pose_csv(os.path.join(out_dir, "poses.csv"), ids, poses)
    manifest = DatasetManifest(
        root=out_dir, n_images=n_images, resolution=resolution,
        yaw_std=yaw_std, pitch_std=pitch_std, yaw_clip=yaw_clip,
        pitch_clip=pitch_clip, radius=radius, focal=focal, near=near, far=far,
        seed=seed)
    manifest.save()
    return manifest


class Dataset:
    """Random access into a generated dataset; images cached after first read."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        ids, poses = cameras.read_pose_csv(os.path.join(manifest.root, "poses.csv"))
        if len(ids) != manifest.n_images:
            raise OSError(
                f"{manifest.root}/poses.csv has {len(ids)} rows, manifest says "
                f"{manifest.n_images}")
        self.image_ids = ids
        self.poses = poses
        self._cache = {}
        for image_id in ids:
            for rel in (f"images/{image_id}.png", f"depth/{image_id}.f32"):
                path = os.path.join(manifest.root, rel)
                if not os.path.exists(path):
                    raise FileNotFoundError(f"dataset file missing: {path}")

    def __len__(self):
        return len(self.image_ids)

    def __getitem__(self, idx):
        """-> (image [H,W,3] float32 in [0,1], CameraPose, depth [H,W] float32)."""
        if idx not in self._cache:
            image_id = self.image_ids[idx]
            res = self.manifest.resolution
            img_path = os.path.join(self.manifest.root, "images", f"{image_id}.png")
            try:
                image = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
            except OSError as exc:
                raise OSError(f"unreadable image file {img_path}: {exc}") from exc
            depth = np.fromfile(
                os.path.join(self.manifest.root, "depth", f"{image_id}.f32"),
                dtype="<f4")
            if image.shape != (res, res, 3) or depth.size != res * res:
                raise OSError(f"corrupt record for image {image_id} under "
                              f"{self.manifest.root}")
            self._cache[idx] = (image, depth.reshape(res, res))
        image, depth = self._cache[idx]
        return image, self.poses[idx], depth

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def iter_shuffled(self, rng):
        rng = np.random.default_rng(rng)
        for i in rng.permutation(len(self)):
            yield self[int(i)]


def load_dataset(manifest_or_path) -> Dataset:
    if not isinstance(manifest_or_path, DatasetManifest):
        manifest_or_path = DatasetManifest.load(manifest_or_path)
    return Dataset(manifest_or_path)
