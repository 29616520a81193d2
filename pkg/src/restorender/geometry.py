"""Rays, stratified samples, pinhole projection and epipolar feature gathering.

Torch implementations; dtype and device follow the inputs so the same code
serves float32 training and float64 gradient checks.  See ``dataset`` for the
camera convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Camera


@dataclass
class RayBatch:
    origins: torch.Tensor  # R x 3
    directions: torch.Tensor  # R x 3, unit norm
    near: torch.Tensor  # R
    far: torch.Tensor  # R

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])


@dataclass
class SampleSet:
    depths: torch.Tensor  # R x K, ray distance t
    points: torch.Tensor  # R x K x 3


@dataclass
class EpipolarGather:
    features: torch.Tensor  # R x K x N x C
    valid: torch.Tensor  # R x K x N bool
    dir_diff: torch.Tensor  # R x K x N x 4: target dir - source dir, and their dot product


def camera_tensors(camera: Camera, dtype=torch.float32, device=None):
    c2w = torch.as_tensor(camera.camera_to_world, dtype=dtype, device=device)
    return c2w[:3, :3], c2w[:3, 3]


def rays_for_view(camera: Camera, pixels, dtype=torch.float32) -> RayBatch:
    """Rays through pixel centres; ``pixels`` is an R x 2 array of (x, y)."""
    pix = torch.as_tensor(np.asarray(pixels), dtype=dtype).reshape(-1, 2)
    if pix.numel() and (pix[:, 0].min() < 0 or pix[:, 1].min() < 0
                        or pix[:, 0].max() > camera.width - 1 or pix[:, 1].max() > camera.height - 1):
        raise ValueError(f"pixel indices outside the {camera.width}x{camera.height} image")
    rot, center = camera_tensors(camera, dtype)
    d_cam = torch.stack([(pix[:, 0] - camera.cx) / camera.fx,
                         -(pix[:, 1] - camera.cy) / camera.fy,
                         -torch.ones_like(pix[:, 0])], -1)
    d = d_cam @ rot.T
    d = d / d.norm(dim=-1, keepdim=True)
    r = d.shape[0]
    return RayBatch(center.expand(r, 3).clone(), d,
                    torch.full((r,), camera.near, dtype=dtype), torch.full((r,), camera.far, dtype=dtype))


def all_pixels(camera: Camera) -> np.ndarray:
    v, u = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], -1)


def stratum_offsets(rays: int, K: int, jitter_seed: Optional[int] = None, dtype=torch.float32) -> torch.Tensor:
    """Position inside each stratum, rays x K in [0, 1): 0.5, or seeded uniform."""
    if jitter_seed is None:
        return torch.full((rays, K), 0.5, dtype=dtype)
    gen = torch.Generator().manual_seed(int(jitter_seed))
    return torch.rand((rays, K), generator=gen, dtype=torch.float64).to(dtype)


def stratified_samples(rays: RayBatch, K: int, jitter_seed: Optional[int] = None,
                       offsets: Optional[torch.Tensor] = None) -> SampleSet:
    """One depth per equal stratum of [near, far]; midpoints unless jittered.

    ``offsets`` (R x K, from ``stratum_offsets``) overrides ``jitter_seed`` so
    callers that split rays into chunks keep the per-ray draws unchanged.
    """
    if K < 2:
        raise ValueError(f"need at least 2 samples per ray, got K={K}")
    dtype = rays.origins.dtype
    u = stratum_offsets(len(rays), K, jitter_seed, dtype) if offsets is None else offsets.to(dtype)
    idx = torch.arange(K, dtype=dtype)
    frac = (idx + u) / K
    t = rays.near[:, None] + frac * (rays.far - rays.near)[:, None]
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return SampleSet(t, pts)


def project(points: torch.Tensor, camera: Camera):
    """Pinhole projection -> (pixels ... x 2, z-depth ..., valid ...)."""
    rot, center = camera_tensors(camera, points.dtype, points.device)
    pc = (points - center) @ rot
    z = -pc[..., 2]
    safe = torch.where(z.abs() > 1e-12, z, torch.ones_like(z))
    u = camera.cx + camera.fx * pc[..., 0] / safe
    v = camera.cy - camera.fy * pc[..., 1] / safe
    valid = (z > 1e-8) & (u >= 0) & (u <= camera.width - 1) & (v >= 0) & (v <= camera.height - 1)
    return torch.stack([u, v], -1), z, valid


def bilinear_sample(feature_map: torch.Tensor, pixels: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Sample a C x H x W map at (x, y) pixel coordinates (... x 2) -> ... x C."""
    c, h, w = feature_map.shape
    lead = pixels.shape[:-1]
    grid = torch.stack([2 * pixels[..., 0] / max(w - 1, 1) - 1, 2 * pixels[..., 1] / max(h - 1, 1) - 1], -1)
    grid = grid.reshape(1, 1, -1, 2).to(feature_map.dtype)
    out = F.grid_sample(feature_map[None], grid, mode=mode, padding_mode="zeros", align_corners=True)
    return out[0, :, 0].T.reshape(*lead, c)


def gather(feature_maps: torch.Tensor, cameras: Sequence[Camera], samples: SampleSet,
           ray_directions: Optional[torch.Tensor] = None, mode: str = "bilinear") -> EpipolarGather:
    """Collect per-view features at each sample's projection.

    ``feature_maps`` is N x C x H x W.  Invalid projections (behind the camera
    or outside the image) give exactly-zero features and ``valid=False``.
    """
    n = feature_maps.shape[0]
    if len(cameras) != n:
        raise ValueError(f"{n} feature maps but {len(cameras)} cameras")
    pts = samples.points
    if ray_directions is None:
        ray_directions = pts[:, -1] - pts[:, 0]
        ray_directions = ray_directions / ray_directions.norm(dim=-1, keepdim=True)
    feats, valids, diffs = [], [], []
    for i, cam in enumerate(cameras):
        pix, _, valid = project(pts, cam)
        f = bilinear_sample(feature_maps[i], pix, mode=mode)
        f = f * valid[..., None].to(f.dtype)
        _, center = camera_tensors(cam, pts.dtype, pts.device)
        src_dir = pts - center
        src_dir = src_dir / src_dir.norm(dim=-1, keepdim=True)
        tgt_dir = ray_directions[:, None, :].expand_as(src_dir)
        diff = torch.cat([tgt_dir - src_dir, (tgt_dir * src_dir).sum(-1, keepdim=True)], -1)
        feats.append(f)
        valids.append(valid)
        diffs.append(diff)
    return EpipolarGather(torch.stack(feats, 2), torch.stack(valids, 2), torch.stack(diffs, 2))


def angular_distance(a: np.ndarray, b: np.ndarray) -> float:
    cos = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def nearest_source_view(target: Camera, sources: Sequence[Camera], tol: float = 1e-9) -> int:
    """Index of the source whose optical axis is angularly closest; ties -> lowest index."""
    if len(sources) == 0:
        raise ValueError("need at least one source view")
    angles = np.array([angular_distance(target.optical_axis, s.optical_axis) for s in sources])
    return int(np.flatnonzero(angles <= angles.min() + tol)[0])


def nearest_views(target: Camera, sources: Sequence[Camera], count: int) -> list[int]:
    """The ``count`` sources closest in viewing angle, stable on ties."""
    angles = np.array([angular_distance(target.optical_axis, s.optical_axis) for s in sources])
    return [int(i) for i in np.argsort(angles, kind="stable")[:count]]
