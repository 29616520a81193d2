"""Image-quality metrics, multi-view consistency and the benchmark runner."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import degrade, geometry
from .dataset import Camera, PosedImageSet, load_scene, split
from .model import render_image
from .perceptual import RandomFeaturePerceptual, to_nchw
from .serialization import atomic_write_text

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
REC601 = np.array([0.299, 0.587, 0.114])
SHORT_RANGE = 1
LONG_RANGE = 5


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM on Rec.601 luma with an 11x11 Gaussian window (valid region)."""
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a, b = a @ REC601, b @ REC601
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float(np.mean(num / den))


_PERCEPTUAL = None


def perceptual(a, b, metric=None) -> float:
    global _PERCEPTUAL
    if metric is None:
        if _PERCEPTUAL is None:
            _PERCEPTUAL = RandomFeaturePerceptual()
        metric = _PERCEPTUAL
    with torch.no_grad():
        return float(metric(to_nchw(np.asarray(a, np.float32)), to_nchw(np.asarray(b, np.float32))))


# ---------------------------------------------------------------------------
# consistency

def warp_pair(image_src, depth_src, cam_src: Camera, image_dst, depth_dst, cam_dst: Camera, occlusion_tol=1e-2):
    """Forward-warp every source pixel into the destination view.

    Returns (source colours, destination colours sampled at the warped
    location, valid mask), all indexed by source pixel.  Valid means the
    warped point is in front of the destination camera, inside its image,
    and its depth agrees with the destination depth map within
    ``occlusion_tol`` (relative).
    """
    h, w = depth_src.shape
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = cam_src.unproject(np.stack([u, v], -1), depth_src)
    uv, z = cam_dst.project(pts)
    inside = (z > 0) & (uv[..., 0] >= 0) & (uv[..., 0] <= w - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= h - 1)
    uvc = np.where(inside[..., None], uv, 0.0)
    coords = [uvc[..., 1], uvc[..., 0]]
    z_dst = ndimage.map_coordinates(np.asarray(depth_dst, np.float64), coords, order=1, mode="nearest")
    visible = inside & (np.abs(z_dst - z) <= occlusion_tol * np.abs(z))
    sampled = np.stack([ndimage.map_coordinates(np.asarray(image_dst[..., c], np.float64), coords, order=1,
                                                mode="nearest") for c in range(3)], -1)
    return np.asarray(image_src, np.float64), sampled, visible


def consistency(images: Sequence[np.ndarray], depths: Sequence[np.ndarray], cameras: Sequence[Camera], k: int,
                metric=None) -> tuple[float, float]:
    """(rmse, perceptual) between each render and its neighbour k poses later.

    ``depths`` are z-depth maps (use ``model.ray_depth_to_z`` for expected
    render depth).  Pixels failing the visibility test are excluded from the
    RMSE and zeroed in both images for the perceptual term.
    """
    n = len(images)
    if k < 1 or k >= n:
        raise ValueError(f"offset k={k} needs at least {k + 1} ordered views, got {n}")
    sq, count, perc = 0.0, 0, []
    for t in range(n - k):
        src, dst, mask = warp_pair(images[t], depths[t], cameras[t], images[t + k], depths[t + k], cameras[t + k])
        if mask.any():
            sq += float(np.sum((src[mask] - dst[mask]) ** 2))
            count += int(mask.sum()) * 3
            m = mask[..., None]
            perc.append(perceptual(src * m, dst * m, metric))
    if count == 0:
        raise ValueError("no pixel survived the visibility test; consistency undefined")
    return float(np.sqrt(sq / count)), float(np.mean(perc))


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchmarkCase:
    """A corrupted scene, its clean counterpart and the corruption kind."""

    degraded: PosedImageSet
    clean: PosedImageSet
    kind: str


def evaluate_case(model, case: BenchmarkCase, kind=None, views: int = 10, hold_out: int = 8, metric=None):
    """Per-held-out-view metrics for one case, rendered from the nearest training views."""
    kind = case.kind if kind is None else kind
    train_idx, test_idx = split(case.clean, hold_out)
    rows = []
    for ti in test_idx:
        target = case.clean.views[ti].camera
        cams = [case.degraded.views[i].camera for i in train_idx]
        chosen = [train_idx[j] for j in sorted(geometry.nearest_views(target, cams, views))]
        src = case.degraded.subset(chosen)
        img, _ = render_image(model, src.images, src.cameras, target, kind)
        gt = case.clean.views[ti].image
        rows.append({"view": ti, "psnr": psnr(img, gt), "ssim": ssim(img, gt), "perceptual": perceptual(img, gt, metric)})
    return rows


def run_benchmark(model, cases: Sequence[BenchmarkCase], kinds: Sequence[str], views: int = 10, out_dir=None):
    """Mean PSNR/SSIM/perceptual per kind over held-out views.

    Returns ``{kind: {psnr, ssim, perceptual, n_views}}``; with ``out_dir``
    also writes report.json and report.md.
    """
    report = {}
    for kind in kinds:
        rows = []
        for case in cases:
            if case.kind == kind:
                rows += evaluate_case(model, case, views=views)
        if not rows:
            raise ValueError(f"no benchmark scenes carry kind {kind!r}")
        report[kind] = {m: float(np.mean([r[m] for r in rows])) for m in ("psnr", "ssim", "perceptual")}
        report[kind]["n_views"] = len(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "report.json", json.dumps(report, indent=1))
        atomic_write_text(out / "report.md", report_markdown(report))
    return report


def report_markdown(report: dict) -> str:
    lines = ["| kind | PSNR | SSIM | perceptual | views |", "|---|---|---|---|---|"]
    for kind, r in report.items():
        lines.append(f"| {kind} | {r['psnr']:.2f} | {r['ssim']:.3f} | {r['perceptual']:.3f} | {r['n_views']} |")
    return "\n".join(lines) + "\n"


def load_case(scene_dir) -> BenchmarkCase:
    """A corrupted scene directory whose degradation.json points at its clean source."""
    scene_dir = Path(scene_dir)
    meta_path = scene_dir / "degradation.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{scene_dir}: degradation.json missing")
    meta = json.loads(meta_path.read_text())
    clean_dir = (scene_dir / meta["source"]).resolve() if "source" in meta else None
    if clean_dir is None or not (clean_dir / "poses.json").is_file():
        raise FileNotFoundError(f"{scene_dir}: clean ground truth {clean_dir} not found")
    degraded = load_scene(scene_dir)
    clean = load_scene(clean_dir)
    if len(degraded) != len(clean):
        raise ValueError(f"{scene_dir}: {len(degraded)} corrupted views vs {len(clean)} clean views")
    kind = meta["kind"] if isinstance(meta["kind"], str) else "+".join(meta["kind"])
    return BenchmarkCase(degraded, clean, kind)
