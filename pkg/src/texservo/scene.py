"""Procedural scene renderer and labeled dataset generator.

A large textured fabric sheet lies on the table plane; a smaller patch cut
from the center of the same sheet floats above it.  A downward-looking
pinhole camera renders both as homography-mapped planar layers, with grasp
occluder discs, a lighting gain/gradient field, and additive Gaussian
noise.  The pose-difference label for a rendered pair is expressed in the
camera frame and min-max normalized to [0, 1]^6.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError
from .geometry import (DiffRanges, Pose6, euler_to_matrix, invert_transform,
                       matrix_to_euler, transform_from)
from .images import ssd, to_uint8, write_pgm

# ---------------------------------------------------------------------------
# camera


@dataclass
class CameraModel:
    fx: float = 240.0
    fy: float = 240.0
    cx: float = 47.5
    cy: float = 26.5
    width: int = 96
    height: int = 54
    world_from_camera: np.ndarray = field(
        default_factory=lambda: transform_from(
            np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]),
            [0.0, 0.0, 600.0]))

    def intrinsics(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def pixel_pitch(self, depth_mm):
        """Metric size of one pixel at the given camera depth [mm/px]."""
        return depth_mm / self.fx

    def project(self, p_world):
        """World point [mm] -> (u, v) pixel coordinates."""
        T = invert_transform(self.world_from_camera)
        p = T[:3, :3] @ np.asarray(p_world, dtype=np.float64) + T[:3, 3]
        if p[2] <= 1e-9:
            raise GeometryError("point is behind the camera")
        return np.array([self.fx * p[0] / p[2] + self.cx,
                         self.fy * p[1] / p[2] + self.cy]), p[2]


def default_camera(resolution=(96, 54), height_mm=600.0, pitch_mm=2.5):
    """Camera centered over the table origin, looking straight down.  The
    focal length is chosen so one pixel spans ``pitch_mm`` at the table."""
    w, h = resolution
    f = height_mm / pitch_mm
    return CameraModel(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                       width=int(w), height=int(h))


def plane_homography(camera: CameraModel, world_from_plane):
    """3x3 map from in-plane millimeters (x, y, 1) to homogeneous pixels."""
    cam_from_plane = invert_transform(camera.world_from_camera) @ world_from_plane
    if cam_from_plane[2, 3] <= 1e-6:
        raise GeometryError("camera is behind (or on) the layer plane")
    H = camera.intrinsics() @ np.column_stack(
        [cam_from_plane[:3, 0], cam_from_plane[:3, 1], cam_from_plane[:3, 3]])
    if abs(np.linalg.det(H)) < 1e-12:
        raise GeometryError("degenerate plane homography")
    return H


# ---------------------------------------------------------------------------
# scene state


@dataclass
class SceneState:
    fabric_b_pose: Pose6 = field(default_factory=Pose6)
    fabric_a_pose: Pose6 | None = None
    camera: CameraModel = field(default_factory=default_camera)
    fabric_b_size: tuple = (400.0, 300.0)   # (x, y) extent [mm]
    fabric_a_size: tuple = (160.0, 90.0)
    fabric_a_corner_jitter: np.ndarray | None = None  # (4, 2) in-plane [mm]
    lighting_gain: float = 1.0
    lighting_gradient: tuple = (0.0, 0.0)   # (magnitude, direction [rad])
    occluders: tuple = ()                   # ((x, y, z) world [mm], radius [mm])
    occluder_intensity: float = 0.1
    noise_sigma: float = 0.0
    noise_seed: int = 0
    background: float = 0.05

    def validate(self):
        if self.lighting_gain <= 0:
            raise ConfigError("lighting_gain must be positive")
        return self


def _rect_corners(size, jitter=None):
    sx, sy = size
    c = np.array([[-sx / 2, -sy / 2], [sx / 2, -sy / 2],
                  [sx / 2, sy / 2], [-sx / 2, sy / 2]])
    if jitter is not None:
        c = c + np.asarray(jitter, dtype=np.float64).reshape(4, 2)
    return c


def _inside_convex(px, py, corners):
    mask = np.ones(px.shape, dtype=bool)
    for i in range(4):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % 4]
        mask &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
    return mask


def _bilinear(tex, tx, ty):
    th, tw = tex.shape
    tx = np.clip(tx, 0.0, tw - 1.0)
    ty = np.clip(ty, 0.0, th - 1.0)
    x0 = np.floor(tx).astype(int)
    y0 = np.floor(ty).astype(int)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    fx = tx - x0
    fy = ty - y0
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _paint_layer(canvas, camera, world_from_plane, corners, tex_size, texture, uv):
    """Inverse-map one planar layer onto the canvas where it is visible."""
    H = plane_homography(camera, world_from_plane)
    Hinv = np.linalg.inv(H)
    u, v = uv
    denom = Hinv[2, 0] * u + Hinv[2, 1] * v + Hinv[2, 2]
    ok = np.abs(denom) > 1e-12
    denom = np.where(ok, denom, 1.0)
    px = (Hinv[0, 0] * u + Hinv[0, 1] * v + Hinv[0, 2]) / denom
    py = (Hinv[1, 0] * u + Hinv[1, 1] * v + Hinv[1, 2]) / denom
    cam_from_plane = invert_transform(camera.world_from_camera) @ world_from_plane
    depth = cam_from_plane[2, 0] * px + cam_from_plane[2, 1] * py + cam_from_plane[2, 3]
    mask = ok & (depth > 1e-6) & _inside_convex(px, py, corners)
    if not mask.any():
        return
    th, tw = texture.shape
    sx, sy = tex_size
    tx = (px[mask] / sx + 0.5) * (tw - 1)
    ty = (0.5 - py[mask] / sy) * (th - 1)
    canvas[mask] = _bilinear(texture, tx, ty)


def render(scene: SceneState, texture, resolution=None):
    """Pure function of (scene, texture, resolution) -> float image [0, 1]."""
    scene.validate()
    texture = np.asarray(texture, dtype=np.float64)
    if texture.size == 0:
        raise ConfigError("texture must be nonempty")
    w, h = resolution if resolution is not None else (scene.camera.width, scene.camera.height)
    if w <= 0 or h <= 0:
        raise ConfigError("resolution must be positive")
    cam = scene.camera
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    canvas = np.full((h, w), scene.background)

    _paint_layer(canvas, cam, scene.fabric_b_pose.to_matrix(),
                 _rect_corners(scene.fabric_b_size), scene.fabric_b_size, texture, (u, v))
    if scene.fabric_a_pose is not None:
        # the patch reuses the sheet texture: its local coordinates address
        # the central region of the shared texture map
        _paint_layer(canvas, cam, scene.fabric_a_pose.to_matrix(),
                     _rect_corners(scene.fabric_a_size, scene.fabric_a_corner_jitter),
                     scene.fabric_b_size, texture, (u, v))
    for point, radius in scene.occluders:
        center, depth = cam.project(point)
        r_px = radius * cam.fx / depth
        disc = (u - center[0]) ** 2 + (v - center[1]) ** 2 <= r_px ** 2
        canvas[disc] = scene.occluder_intensity

    mag, ang = scene.lighting_gradient
    gain = scene.lighting_gain * (
        1.0 + mag * ((u / max(w - 1, 1) - 0.5) * np.cos(ang)
                     + (v / max(h - 1, 1) - 0.5) * np.sin(ang)))
    canvas = np.clip(canvas * gain, 0.0, 1.0)
    if scene.noise_sigma > 0.0:
        noise = np.random.default_rng(scene.noise_seed).normal(0.0, scene.noise_sigma, (h, w))
        canvas = np.clip(canvas + noise, 0.0, 1.0)
    return canvas


# ---------------------------------------------------------------------------
# procedural textures


def make_texture(seed, size=(192, 256), contrast=1.0, octaves=(4, 8, 16), stripes=3):
    """Multi-octave value noise plus a few oriented stripes.  ``contrast``
    near zero yields a low-saliency, nearly flat texture."""
    th, tw = size
    rng = np.random.default_rng(seed)
    fieldv = np.zeros((th, tw))
    amp = 1.0
    for cells in octaves:
        grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, th)
        xs = np.linspace(0, cells, tw)
        y0 = np.minimum(ys.astype(int), cells - 1)
        x0 = np.minimum(xs.astype(int), cells - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        g00 = grid[np.ix_(y0, x0)]
        g01 = grid[np.ix_(y0, x0 + 1)]
        g10 = grid[np.ix_(y0 + 1, x0)]
        g11 = grid[np.ix_(y0 + 1, x0 + 1)]
        fieldv += amp * ((g00 * (1 - fx) + g01 * fx) * (1 - fy)
                         + (g10 * (1 - fx) + g11 * fx) * fy)
        amp *= 0.55
    yy, xx = np.meshgrid(np.linspace(-1, 1, th), np.linspace(-1, 1, tw), indexing="ij")
    for _ in range(stripes):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(4.0, 14.0)
        phase = rng.uniform(0, 2 * np.pi)
        fieldv += 0.5 * np.sign(np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase))
    lo, hi = fieldv.min(), fieldv.max()
    fieldv = (fieldv - lo) / max(hi - lo, 1e-12)
    return np.clip(0.5 + contrast * (fieldv - 0.5), 0.0, 1.0)


# ---------------------------------------------------------------------------
# camera-frame pose differences


def camera_frame_diff(camera: CameraModel, pose: Pose6, pose_ref: Pose6):
    """Pose difference (pose - pose_ref) expressed in the camera frame."""
    R_cw = invert_transform(camera.world_from_camera)[:3, :3]
    dt = R_cw @ (pose.t - pose_ref.t)
    R_diff = R_cw @ euler_to_matrix(pose.r) @ euler_to_matrix(pose_ref.r).T @ R_cw.T
    return np.concatenate([dt, matrix_to_euler(R_diff)])


def apply_camera_diff(camera: CameraModel, pose_ref: Pose6, diff6):
    """Inverse of :func:`camera_frame_diff`: pose whose camera-frame
    difference from ``pose_ref`` equals ``diff6``."""
    diff6 = np.asarray(diff6, dtype=np.float64).reshape(6)
    R_wc = camera.world_from_camera[:3, :3]
    t = pose_ref.t + R_wc @ diff6[:3]
    R = R_wc @ euler_to_matrix(diff6[3:]) @ R_wc.T @ euler_to_matrix(pose_ref.r)
    return Pose6(t, matrix_to_euler(R))


def grasp_points(pose_a: Pose6, fabric_a_size, offset=15.0):
    """World positions of the two grasp points, just beyond the patch's
    short edges along its local x-axis (effector 1 on -x, 2 on +x)."""
    R = euler_to_matrix(pose_a.r)
    dx = fabric_a_size[0] / 2.0 + offset
    return (pose_a.t + R @ np.array([-dx, 0.0, 0.0]),
            pose_a.t + R @ np.array([dx, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# randomized scene sampling


@dataclass
class SceneRanges:
    diff: DiffRanges = field(default_factory=DiffRanges)
    camera_t_jitter: float = 5.0             # mm per axis
    camera_r_jitter: float = np.deg2rad(2.0)
    lighting: tuple = (0.8, 1.2)
    gradient_max: float = 0.2
    occluder_radius: tuple = (6.0, 11.0)      # mm
    grasp_offset: float = 15.0
    corner_jitter: float = 1.0                # mm, fabric patch outline
    noise_sigma: float = 0.01
    fabric_a_size: tuple = (160.0, 90.0)
    fabric_b_size: tuple = (400.0, 300.0)
    texture_contrast: tuple = (0.6, 1.0)
    fabric_a_height: tuple = (2.0, 8.0)       # mm above the table

    def validate(self):
        for name in ("lighting", "occluder_radius", "texture_contrast", "fabric_a_height"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"inverted range for {name}: ({lo}, {hi})")
        if self.camera_t_jitter < 0 or self.camera_r_jitter < 0 or self.corner_jitter < 0:
            raise ConfigError("jitter magnitudes must be nonnegative")
        return self

    def to_dict(self):
        d = asdict(self)
        d["diff"] = {"t_max": self.diff.t_max, "r_max": self.diff.r_max}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "diff" in d:
            d["diff"] = DiffRanges(**d["diff"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SceneRanges keys: {sorted(unknown)}")
        out = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
        return out.validate()


@dataclass
class ScenePair:
    desired: SceneState
    current: SceneState
    diff: np.ndarray         # camera-frame pose difference [mm, rad]
    label: np.ndarray        # min-max normalized to [0, 1]^6
    texture_seed: int
    aligned_pose: Pose6


def sample_scene(seed, ranges: SceneRanges, resolution=(96, 54)) -> ScenePair:
    """Draw one randomized (desired-capture, current) scene state pair."""
    ranges.validate()
    rng = np.random.default_rng(seed)
    camera = default_camera(resolution)
    jitter_t = rng.uniform(-ranges.camera_t_jitter, ranges.camera_t_jitter, 3)
    jitter_r = rng.uniform(-ranges.camera_r_jitter, ranges.camera_r_jitter, 3)
    camera.world_from_camera = (
        Pose6(jitter_t, jitter_r).to_matrix() @ camera.world_from_camera)

    sheet_pose = Pose6()              # the large sheet sits at the table origin
    # the patch hovers above the sheet; the hover height belongs to the
    # aligned reference so the label stays re-derivable from the states
    height = rng.uniform(*ranges.fabric_a_height)
    aligned = Pose6([0.0, 0.0, height], sheet_pose.r.copy())
    span = ranges.diff.span()
    diff = rng.uniform(-span, span)
    pose_a = apply_camera_diff(camera, aligned, diff)

    desired = SceneState(
        fabric_b_pose=sheet_pose, fabric_a_pose=None, camera=camera,
        fabric_b_size=ranges.fabric_b_size, fabric_a_size=ranges.fabric_a_size)
    g1, g2 = grasp_points(pose_a, ranges.fabric_a_size, ranges.grasp_offset)
    radius = rng.uniform(*ranges.occluder_radius)
    current = SceneState(
        fabric_b_pose=sheet_pose, fabric_a_pose=pose_a, camera=camera,
        fabric_b_size=ranges.fabric_b_size, fabric_a_size=ranges.fabric_a_size,
        fabric_a_corner_jitter=rng.uniform(-ranges.corner_jitter,
                                           ranges.corner_jitter, (4, 2)),
        lighting_gain=rng.uniform(*ranges.lighting),
        lighting_gradient=(rng.uniform(0.0, ranges.gradient_max),
                           rng.uniform(0.0, 2 * np.pi)),
        occluders=((g1, radius), (g2, radius)),
        noise_sigma=ranges.noise_sigma,
        noise_seed=int(rng.integers(0, 2 ** 31)))
    texture_seed = int(rng.integers(0, 2 ** 31))
    return ScenePair(desired, current, diff, ranges.diff.normalize(diff),
                     texture_seed, aligned)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class DatasetConfig:
    ranges: SceneRanges = field(default_factory=SceneRanges)
    resolution: tuple = (96, 54)   # (w, h)
    texture_size: tuple = (192, 256)
    val_every: int = 10            # every val_every-th sample is validation

    def validate(self):
        self.ranges.validate()
        if self.val_every < 2:
            raise ConfigError("val_every must be >= 2")
        return self

    def to_dict(self):
        return {"ranges": self.ranges.to_dict(),
                "resolution": list(self.resolution),
                "texture_size": list(self.texture_size),
                "val_every": self.val_every}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DatasetConfig keys: {sorted(unknown)}")
        if "ranges" in d:
            d["ranges"] = SceneRanges.from_dict(d["ranges"])
        for k in ("resolution", "texture_size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def render_pair(pair: ScenePair, config: DatasetConfig, contrast):
    texture = make_texture(pair.texture_seed, config.texture_size, contrast)
    i_des = render(pair.desired, texture, config.resolution)
    i_cur = render(pair.current, texture, config.resolution)
    return i_des, i_cur


def generate_sample(config: DatasetConfig, seed, index):
    """Sample i is a pure function of (config, seed + i): generation order
    and worker assignment cannot change the output."""
    sample_seed = seed + index
    pair = sample_scene(sample_seed, config.ranges, config.resolution)
    contrast_rng = np.random.default_rng(sample_seed ^ 0x5EED)
    contrast = contrast_rng.uniform(*config.ranges.texture_contrast)
    i_des, i_cur = render_pair(pair, config, contrast)
    return pair, i_des, i_cur


def generate_dataset(config: DatasetConfig, seed, n, out_dir):
    """Write n labeled PGM pairs plus a JSON-lines manifest; returns the
    manifest path."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i in range(n):
        pair, i_des, i_cur = generate_sample(config, seed, i)
        des_name = f"pair_{i:05d}_des.pgm"
        cur_name = f"pair_{i:05d}_cur.pgm"
        write_pgm(os.path.join(out_dir, des_name), to_uint8(i_des))
        write_pgm(os.path.join(out_dir, cur_name), to_uint8(i_cur))
        split = "val" if i % config.val_every == config.val_every - 1 else "train"
        records.append({
            "id": i, "split": split,
            "label": [float(x) for x in pair.label],
            "diff": [float(x) for x in pair.diff],
            "ranges": {"t_max": config.ranges.diff.t_max,
                       "r_max": config.ranges.diff.r_max},
            "seed": seed + i,
            "des": des_name, "cur": cur_name,
            "lighting_gain": pair.current.lighting_gain,
            "texture_seed": pair.texture_seed,
        })
    header = {
        "kind": "texservo-dataset", "seed": seed, "n": n,
        "config_digest": config.digest(),
        "resolution": list(config.resolution),
        "train": sum(r["split"] == "train" for r in records),
        "val": sum(r["split"] == "val" for r in records),
    }
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return manifest


def load_manifest(path):
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("kind") != "texservo-dataset":
        raise ConfigError(f"{path}: not a dataset manifest")
    return lines[0], lines[1:]


def load_split(manifest_path, split):
    """Load one split as (des, cur, labels) float arrays; images (N,1,H,W)
    in [0, 1], labels (N, 6)."""
    from .images import read_pgm
    header, records = load_manifest(manifest_path)
    base = os.path.dirname(manifest_path)
    rows = [r for r in records if r["split"] == split]
    if not rows:
        raise ConfigError(f"{manifest_path}: split '{split}' is empty")
    des = np.stack([read_pgm(os.path.join(base, r["des"])) for r in rows])[:, None]
    cur = np.stack([read_pgm(os.path.join(base, r["cur"])) for r in rows])[:, None]
    labels = np.array([r["label"] for r in rows])
    return des, cur, labels
