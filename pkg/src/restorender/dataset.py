"""Posed multi-view image sets: on-disk format, procedural toy scenes, splits.

Camera convention (used everywhere in the package): right-handed camera frame,
x right, y up, the camera looks down -z.  A camera-space point (x, y, z) with
z < 0 lands on pixel ``(cx + fx * x / -z, cy - fy * y / -z)``.  Pixel centres
sit on integer coordinates.  Depth maps hold z-depth (``-z``), in scene units.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

ORTHONORMAL_TOL = 1e-5
LAYOUTS = ("textured-plane", "box-room", "sphere-field")


class SceneFormatError(ValueError):
    """Base class for malformed scene directories."""


class MissingPosesError(SceneFormatError):
    pass


class CountMismatchError(SceneFormatError):
    pass


class NonOrthonormalRotationError(SceneFormatError):
    pass


class DegenerateLayoutError(ValueError):
    """A camera ended up inside (or behind) scene geometry."""

    def __init__(self, view_index: int, reason: str):
        super().__init__(f"view {view_index}: {reason}")
        self.view_index = view_index


# ---------------------------------------------------------------------------
# colour space

def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, None)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def quantize(image: np.ndarray) -> np.ndarray:
    """Float [0,1] -> uint8 with round-half-even."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(image_u8: np.ndarray) -> np.ndarray:
    return (image_u8.astype(np.float64) / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# types

@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        self.validate()

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        rot = self.rotation
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise NonOrthonormalRotationError(f"rotation block not orthonormal (max |R^T R - I| = {err:.3g})")

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @property
    def optical_axis(self) -> np.ndarray:
        return -self.rotation[:, 2]

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation

    def project(self, points: np.ndarray):
        """numpy pinhole projection -> (uv, z-depth)."""
        pc = self.world_to_camera(points)
        z = -pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.fx * pc[..., 0] / z
            v = self.cy - self.fy * pc[..., 1] / z
        return np.stack([u, v], axis=-1), z

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates plus z-depth -> world points."""
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx * depth
        y = -(uv[..., 1] - self.cy) / self.fy * depth
        pc = np.stack([x, y, -depth], axis=-1)
        return pc @ self.rotation.T + self.center

    def pixel_directions(self) -> np.ndarray:
        """Unit world-space ray directions for every pixel centre, H x W x 3."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d = np.stack([(u - self.cx) / self.fx, -(v - self.cy) / self.fy, -np.ones_like(u, dtype=np.float64)], -1)
        d = d @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def with_pose(self, camera_to_world) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      camera_to_world, self.near, self.far)


@dataclass
class View:
    image: np.ndarray  # H x W x 3 float32 in [0, 1], sRGB
    camera: Camera
    depth: Optional[np.ndarray] = None  # H x W z-depth


@dataclass
class PosedImageSet:
    scene_id: str
    views: list[View]

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError(f"scene {self.scene_id!r} needs at least 2 views, got {len(self.views)}")
        shape = self.views[0].image.shape
        for i, v in enumerate(self.views):
            if v.image.shape != shape or v.image.ndim != 3 or v.image.shape[2] != 3:
                raise ValueError(f"view {i}: image shape {v.image.shape} differs from {shape}")
            if v.depth is not None:
                if v.depth.shape != shape[:2]:
                    raise ValueError(f"view {i}: depth shape {v.depth.shape} vs image {shape[:2]}")
                if not (np.all(v.depth > 0) and np.all(v.depth >= v.camera.near - 1e-6)
                        and np.all(v.depth <= v.camera.far + 1e-6)):
                    raise ValueError(f"view {i}: depth outside [near, far]")

    def __len__(self):
        return len(self.views)

    @property
    def images(self) -> np.ndarray:
        return np.stack([v.image for v in self.views])

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    @property
    def depths(self) -> Optional[np.ndarray]:
        if any(v.depth is None for v in self.views):
            return None
        return np.stack([v.depth for v in self.views])

    @property
    def resolution(self) -> tuple[int, int]:
        return self.views[0].image.shape[:2]

    def subset(self, indices) -> "PosedImageSet":
        return PosedImageSet(self.scene_id, [self.views[i] for i in indices])

    def with_images(self, images) -> "PosedImageSet":
        return PosedImageSet(self.scene_id, [View(np.asarray(img, dtype=np.float32), v.camera, v.depth)
                                             for img, v in zip(images, self.views)])


# ---------------------------------------------------------------------------
# splits

def split(scene: PosedImageSet, k: int = 8) -> tuple[list[int], list[int]]:
    """Hold out every k-th view (0, k, 2k, ...) for testing."""
    n = len(scene)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"hold-out-every-{k} needs at least {k} views, scene has {n}")
    test = [i for i in range(n) if i % k == 0]
    train = [i for i in range(n) if i % k != 0]
    return train, test


# ---------------------------------------------------------------------------
# toy scenes

@dataclass
class ToySceneConfig:
    seed: int = 0
    num_views: int = 12
    resolution: tuple[int, int] = (64, 64)
    layout: str = "textured-plane"
    texture_frequency: float = 1.5  # cycles per scene unit
    arc_radius: float = 4.0
    arc_degrees: float = 40.0
    fov_degrees: float = 45.0

    def validate(self):
        if self.num_views < 3:
            raise ValueError(f"num_views must be >= 3, got {self.num_views}")
        h, w = self.resolution
        if h < 32 or w < 32:
            raise ValueError(f"resolution must be at least 32x32, got {h}x{w}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.texture_frequency <= 0:
            raise ValueError("texture_frequency must be positive")


@dataclass
class _Plane:
    point: np.ndarray
    normal: np.ndarray
    material: int

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-9) & (t > 1e-6), t, np.inf)
        return t, np.broadcast_to(self.normal, d.shape)

    def contains(self, p):
        return (p - self.point) @ self.normal <= 0


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float
    material: int

    def intersect(self, o, d):
        oc = o - self.center
        b = d @ oc if oc.ndim == 1 else np.sum(d * oc, -1)
        c = oc @ oc - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0))
        t = -b - sq
        t = np.where((disc > 0) & (t > 1e-6), t, np.inf)
        p = o + d * np.where(np.isfinite(t), t, 0)[..., None]
        n = (p - self.center) / self.radius
        return t, n

    def contains(self, p):
        return np.linalg.norm(p - self.center) <= self.radius


@dataclass
class _Box:
    lo: np.ndarray
    hi: np.ndarray
    material: int

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.lo - o) * inv
            t1 = (self.hi - o) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        tn = np.nanmax(tmin, -1)
        tf = np.nanmin(tmax, -1)
        t = np.where((tn <= tf) & (tn > 1e-6), tn, np.inf)
        axis = np.argmax(tmin, -1)
        n = np.zeros_like(d)
        rows = np.arange(d.shape[0])
        n[rows, axis] = -np.sign(d[rows, axis])
        return t, n

    def contains(self, p):
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclass
class _ToyWorld:
    objects: list
    palettes: np.ndarray  # materials x 2 x 3
    waves: np.ndarray  # J x 3 unit directions
    phases: np.ndarray
    frequency: float
    light: np.ndarray = field(default_factory=lambda: np.array([0.4, 0.7, 0.6]) / np.linalg.norm([0.4, 0.7, 0.6]))

    def cast(self, o, d):
        """Nearest hit for rays (o broadcast, d: R x 3) -> t, normals, material ids."""
        best_t = np.full(d.shape[0], np.inf)
        best_n = np.zeros_like(d)
        best_m = np.full(d.shape[0], -1)
        for obj in self.objects:
            t, n = obj.intersect(o, d)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_n = np.where(closer[:, None], n, best_n)
            best_m = np.where(closer, obj.material, best_m)
        return best_t, best_n, best_m

    def shade(self, p, n, m):
        w = 2 * np.pi * self.frequency
        s1 = np.mean(np.sin(w * (p @ self.waves.T) + self.phases), -1)
        s2 = np.sin(0.5 * w * (p @ self.waves[::-1].T) + self.phases[::-1])[..., 0]
        ca = self.palettes[m, 0]
        cb = self.palettes[m, 1]
        albedo = ca + (cb - ca) * (0.5 + 0.5 * s1)[:, None]
        albedo = albedo * (0.8 + 0.2 * s2)[:, None]
        lambert = np.abs(n @ self.light)
        return np.clip(albedo * (0.45 + 0.55 * lambert)[:, None], 0.0, 1.0)


def _look_at(center, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    forward = np.asarray(target, float) - center
    forward /= np.linalg.norm(forward)
    z = -forward
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, center
    return c2w


def arc_poses(num_views: int, radius: float, arc_degrees: float) -> list[np.ndarray]:
    """Camera-to-world matrices on a horizontal arc, all looking at the origin."""
    angles = np.deg2rad(np.linspace(-arc_degrees / 2, arc_degrees / 2, num_views))
    poses = []
    for j, a in enumerate(angles):
        height = 0.3 * radius / 4.0 * np.sin(2 * np.pi * j / num_views)
        c = np.array([radius * np.sin(a), height, radius * np.cos(a)])
        poses.append(_look_at(c, np.zeros(3)))
    return poses


def _build_world(cfg: ToySceneConfig, rng: np.random.Generator) -> _ToyWorld:
    objects: list = []
    if cfg.layout == "textured-plane":
        tilt = rng.uniform(-0.3, 0.3, size=2)
        n = np.array([tilt[0], tilt[1], 1.0])
        objects.append(_Plane(np.array([0.0, 0.0, -0.5]), n / np.linalg.norm(n), 0))
    elif cfg.layout == "box-room":
        objects += [
            _Plane(np.array([0.0, 0.0, -1.5]), np.array([0.0, 0.0, 1.0]), 0),
            _Plane(np.array([0.0, -1.0, 0.0]), np.array([0.0, 1.0, 0.0]), 1),
            _Plane(np.array([-2.2, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 2),
            _Plane(np.array([2.2, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]), 2),
        ]
        for k in range(2):
            size = rng.uniform(0.35, 0.7, size=3)
            x = rng.uniform(-1.0, 1.0)
            z = rng.uniform(-1.2, 0.4)
            lo = np.array([x - size[0] / 2, -1.0, z - size[2] / 2])
            objects.append(_Box(lo, lo + np.array([size[0], size[1] * 1.5, size[2]]), 3 + k))
    else:
        objects.append(_Plane(np.array([0.0, 0.0, -1.5]), np.array([0.0, 0.0, 1.0]), 0))
        for k in range(int(rng.integers(4, 7))):
            c = np.array([rng.uniform(-1.2, 1.2), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.6)])
            objects.append(_Sphere(c, float(rng.uniform(0.25, 0.5)), 1 + k % 4))
    materials = 1 + max(o.material for o in objects)
    palettes = rng.uniform(0.1, 0.95, size=(materials, 2, 3))
    waves = rng.normal(size=(4, 3))
    waves /= np.linalg.norm(waves, axis=1, keepdims=True)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    return _ToyWorld(objects, palettes, waves, phases, cfg.texture_frequency)


def generate_toy_scene(config: ToySceneConfig) -> PosedImageSet:
    """Ray-cast a procedural Lambertian scene from cameras on an arc.

    Every view carries ground-truth z-depth.  Output is a pure function of the
    config; images are pre-quantized to 8-bit levels so that a save/load round
    trip is exact.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    world = _build_world(config, rng)
    h, w = config.resolution
    f = 0.5 * w / np.tan(np.deg2rad(config.fov_degrees) / 2)
    poses = arc_poses(config.num_views, config.arc_radius, config.arc_degrees)

    for i, c2w in enumerate(poses):
        c = c2w[:3, 3]
        for obj in world.objects:
            if obj.contains(c):
                kind = type(obj).__name__.lstrip("_").lower()
                raise DegenerateLayoutError(i, f"camera centre {np.round(c, 3).tolist()} lies inside {kind} geometry")

    images, zdepths, tmax = [], [], 0.0
    for i, c2w in enumerate(poses):
        # near/far are placeholders until every depth is known
        cam = Camera(f, f, (w - 1) / 2, (h - 1) / 2, w, h, c2w, 1e-3, 1e3)
        dirs = cam.pixel_directions().reshape(-1, 3)
        t, n, m = world.cast(cam.center, dirs)
        if not np.all(np.isfinite(t)):
            raise DegenerateLayoutError(i, "some pixels see no geometry")
        p = cam.center + dirs * t[:, None]
        color = world.shade(p, n, m)
        images.append(dequantize(quantize(color.reshape(h, w, 3))))
        zdepths.append((t * (dirs @ cam.optical_axis)).reshape(h, w))
        tmax = max(tmax, float(t.max()))
    near = 0.9 * min(float(z.min()) for z in zdepths)
    far = 1.1 * tmax
    views = [View(img, Camera(f, f, (w - 1) / 2, (h - 1) / 2, w, h, c2w, near, far), z.astype(np.float32))
             for img, c2w, z in zip(images, poses, zdepths)]
    return PosedImageSet(f"toy-{config.layout}-{config.seed}", views)


# ---------------------------------------------------------------------------
# disk format

def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise SceneFormatError(f"{path}: only single-channel PFM is supported")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h:
        raise SceneFormatError(f"{path}: expected {w * h} floats, found {data.size}")
    return np.flipud(data.reshape(h, w)).astype(np.float32)


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_scene(scene: PosedImageSet, path) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    cam0 = scene.views[0].camera
    frames = []
    for i, v in enumerate(scene.views):
        name = f"{i:04d}.png"
        Image.fromarray(quantize(v.image)).save(path / "images" / name)
        if v.depth is not None:
            (path / "depth").mkdir(exist_ok=True)
            write_pfm(path / "depth" / f"{i:04d}.pfm", v.depth)
        frames.append({"file": f"images/{name}", "camera_to_world": v.camera.camera_to_world.reshape(-1).tolist()})
    poses = {
        "scene_id": scene.scene_id,
        "intrinsics": {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy},
        "width": cam0.width,
        "height": cam0.height,
        "near": cam0.near,
        "far": cam0.far,
        "frames": frames,
    }
    _atomic_write_text(path / "poses.json", json.dumps(poses, indent=1))


def load_scene(path) -> PosedImageSet:
    path = Path(path)
    poses_file = path / "poses.json"
    if not poses_file.is_file():
        raise MissingPosesError(f"{path}: poses.json not found")
    poses = json.loads(poses_file.read_text())
    image_files = sorted(p for p in (path / "images").glob("*.png") if re.fullmatch(r"\d{4}\.png", p.name))
    frames = poses["frames"]
    if len(frames) != len(image_files):
        raise CountMismatchError(f"{path}: {len(frames)} poses but {len(image_files)} images")
    intr = poses["intrinsics"]
    views = []
    for i, frame in enumerate(frames):
        u8 = np.asarray(Image.open(path / frame["file"]).convert("RGB"))
        h, w = u8.shape[:2]
        c2w = np.asarray(frame["camera_to_world"], dtype=np.float64).reshape(4, 4)
        try:
            cam = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"], poses.get("width", w),
                         poses.get("height", h), c2w, poses["near"], poses["far"])
        except NonOrthonormalRotationError as exc:
            raise NonOrthonormalRotationError(f"{path}: frame {i}: {exc}") from None
        stem = Path(frame["file"]).stem
        depth_file = path / "depth" / f"{stem}.pfm"
        depth = read_pfm(depth_file) if depth_file.is_file() else None
        views.append(View(dequantize(u8), cam, depth))
    return PosedImageSet(poses.get("scene_id", path.name), views)
