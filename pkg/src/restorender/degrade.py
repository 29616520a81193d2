"""Synthetic corruption generators: low light, haze, motion/defocus blur, rain, snow.

All generators take an H x W x 3 sRGB float image in [0, 1] and return a new
image in [0, 1].  Randomness (noise, particle placement) is drawn only from
``spec.seed``, so every generator is a pure function of its arguments.

Convolutions use periodic ("wrap") boundaries: with a normalized kernel this
preserves the image mean exactly, at the cost of slight bleeding across
opposite borders.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .dataset import linear_to_srgb, srgb_to_linear

KINDS = ("lowlight", "haze", "motion_blur", "defocus_blur", "rain", "snow")
# scene-level effects first, then sensor effects
CANONICAL_ORDER = ("haze", "rain", "snow", "motion_blur", "defocus_blur", "lowlight")


class DegradationError(ValueError):
    pass


class MissingDepthError(DegradationError):
    pass


class ParameterRangeError(DegradationError):
    pass


# ---------------------------------------------------------------------------
# parameter records
#
# SAMPLE_RANGES are what sample_spec draws from; LEGAL_RANGES are what apply()
# accepts.  The legal ranges extend down to the identity settings (unit
# scale, zero noise, zero rain) so limits can be exercised.

@dataclass
class LowLightParams:
    scale: float = 10.0
    shot_gain: float = 0.0
    read_sigma: float = 0.0


@dataclass
class HazeParams:
    beta: float = 2.0
    ambient: float = 160.0  # 8-bit level


@dataclass
class MotionBlurParams:
    kernel_size: int = 4
    angle: float = 0.0


@dataclass
class DefocusBlurParams:
    kernel_size: int = 7
    region: str = "background"


@dataclass
class RainParams:
    intensity: float = 8000.0  # streaks per megapixel
    streak_length: float = 8.0  # pixels
    angle: float = 0.0  # degrees from vertical


@dataclass
class SnowParams:
    density: float = 15000.0  # flakes per megapixel
    flake_size: float = 1.0  # gaussian radius, pixels
    fall_direction: float = 0.0  # degrees from vertical
    speed: float = 1.0  # motion-streak length, pixels


PARAM_TYPES = {
    "lowlight": LowLightParams,
    "haze": HazeParams,
    "motion_blur": MotionBlurParams,
    "defocus_blur": DefocusBlurParams,
    "rain": RainParams,
    "snow": SnowParams,
}

SAMPLE_RANGES = {
    "lowlight": {"scale": (8.0, 30.0), "shot_gain": (1e-4, 1e-2), "read_sigma": (1e-3, 1e-2)},
    "haze": {"beta": (1.0, 5.0), "ambient": (125.0, 200.0)},
    "motion_blur": {"kernel_size": (2, 6), "angle": (0.0, 180.0)},
    "defocus_blur": {"kernel_size": (5, 11)},
    "rain": {"intensity": (4000.0, 16000.0), "streak_length": (4.0, 12.0), "angle": (-30.0, 30.0)},
    "snow": {"density": (8000.0, 30000.0), "flake_size": (0.6, 1.6), "fall_direction": (-45.0, 45.0),
             "speed": (0.0, 4.0)},
}

LEGAL_RANGES = {
    "lowlight": {"scale": (1.0, 30.0), "shot_gain": (0.0, 1e-2), "read_sigma": (0.0, 1e-2)},
    "haze": {"beta": (0.0, 5.0), "ambient": (125.0, 200.0)},
    "motion_blur": {"kernel_size": (1, 6), "angle": (0.0, 180.0)},
    "defocus_blur": {"kernel_size": (1, 11)},
    "rain": {"intensity": (0.0, 1e5), "streak_length": (1.0, 64.0), "angle": (-90.0, 90.0)},
    "snow": {"density": (0.0, 1e5), "flake_size": (0.3, 8.0), "fall_direction": (-90.0, 90.0),
             "speed": (0.0, 16.0)},
}


@dataclass
class DegradationSpec:
    kind: str
    params: object = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARAM_TYPES:
            raise DegradationError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if self.params is None:
            self.params = PARAM_TYPES[self.kind]()
        elif isinstance(self.params, dict):
            self.params = PARAM_TYPES[self.kind](**self.params)

    def validate(self):
        params = self.params
        if not isinstance(params, PARAM_TYPES[self.kind]):
            raise DegradationError(f"{self.kind} expects {PARAM_TYPES[self.kind].__name__}")
        for name, (lo, hi) in LEGAL_RANGES[self.kind].items():
            value = getattr(params, name)
            if not (lo <= value <= hi):
                raise ParameterRangeError(f"{self.kind}.{name}={value} outside [{lo}, {hi}]")
        if self.kind == "defocus_blur" and params.region not in ("foreground", "background"):
            raise ParameterRangeError(f"defocus region must be foreground/background, got {params.region!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dataclasses.asdict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(d["kind"], dict(d["params"]), int(d["seed"]))


def view_seed(scene_seed: int, view_index: int, kind: str) -> int:
    """Per-view seed independent of processing order."""
    ss = np.random.SeedSequence([int(scene_seed), int(view_index), KINDS.index(kind) if kind in KINDS else 99])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def sample_spec(kind: str, rng: np.random.Generator) -> DegradationSpec:
    if kind not in SAMPLE_RANGES:
        raise DegradationError(f"unknown degradation kind {kind!r}; expected one of {KINDS}")
    values = {}
    for name, (lo, hi) in SAMPLE_RANGES[kind].items():
        if isinstance(lo, int):
            values[name] = int(rng.integers(lo, hi + 1))
        else:
            values[name] = float(rng.uniform(lo, hi))
    if kind == "defocus_blur":
        values["region"] = "foreground" if rng.random() < 0.5 else "background"
    return DegradationSpec(kind, PARAM_TYPES[kind](**values), int(rng.integers(0, 2**31 - 1)))


# ---------------------------------------------------------------------------
# kernels

def motion_kernel(length: int, angle_deg: float, supersample: int = 16) -> np.ndarray:
    """Normalized line kernel of ``length`` pixels along ``angle_deg``."""
    if length <= 1:
        return np.ones((1, 1))
    size = int(length) + 1 if int(length) % 2 == 0 else int(length)
    size = max(size, 3)
    c = (size - 1) / 2
    k = np.zeros((size, size))
    a = np.deg2rad(angle_deg)
    n = supersample * int(length)
    s = (np.arange(n) + 0.5) / n - 0.5
    # pixel rows grow downwards, so flip the y component for a CCW angle
    xs = c + s * (length - 1) * np.cos(a)
    ys = c - s * (length - 1) * np.sin(a)
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        np.add.at(k, (np.clip(y0 + dy, 0, size - 1), np.clip(x0 + dx, 0, size - 1)), w)
    return k / k.sum()


def disc_kernel(diameter: int, supersample: int = 8) -> np.ndarray:
    """Anti-aliased uniform disc of the given diameter, normalized."""
    d = int(diameter)
    if d <= 1:
        return np.ones((1, 1))
    size = d if d % 2 == 1 else d + 1
    c = (size - 1) / 2
    sub = (np.arange(size * supersample) + 0.5) / supersample - 0.5
    yy, xx = np.meshgrid(sub, sub, indexing="ij")
    inside = ((xx - c) ** 2 + (yy - c) ** 2 <= (d / 2) ** 2).astype(np.float64)
    k = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return k / k.sum()


def convolve(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel convolution with periodic boundaries."""
    out = np.empty_like(image, dtype=np.float64)
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.convolve(image[..., ch].astype(np.float64), kernel, mode="wrap")
    return out


# ---------------------------------------------------------------------------
# generators

def haze_transmission(depth: np.ndarray, beta: float, near: float, far: float) -> np.ndarray:
    d_norm = np.clip((depth - near) / (far - near), 0.0, 1.0)
    return np.exp(-beta * d_norm)


def apply_haze(image, transmission, ambient_level):
    """Koschmieder model: hazy = radiance * T + (1 - T) * A."""
    t = np.asarray(transmission, dtype=np.float64)
    if t.ndim == 2:
        t = t[..., None]
    a = ambient_level / 255.0
    return image * t + (1.0 - t) * a


def dehaze(hazy, transmission, ambient_level):
    t = np.asarray(transmission, dtype=np.float64)
    if t.ndim == 2:
        t = t[..., None]
    return (hazy - (1.0 - t) * ambient_level / 255.0) / t


def apply_lowlight(image, p: LowLightParams, rng):
    lin = srgb_to_linear(image) / p.scale
    if p.shot_gain > 0 or p.read_sigma > 0:
        var = p.shot_gain * lin + p.read_sigma ** 2
        lin = lin + np.sqrt(var) * rng.standard_normal(lin.shape)
        lin = np.clip(lin, 0.0, 1.0)
    return linear_to_srgb(lin)


def foreground_mask(depth: np.ndarray) -> np.ndarray:
    return depth < np.median(depth)


def feathered(mask: np.ndarray, width: float = 2.0) -> np.ndarray:
    """Soft version of a boolean mask with a linear ramp ``width`` px wide."""
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    signed = np.where(mask, inside - 0.5, 0.5 - outside)
    return np.clip(0.5 + signed / width, 0.0, 1.0)


def apply_defocus(image, depth, p: DefocusBlurParams):
    blurred = convolve(image, disc_kernel(p.kernel_size))
    mask = foreground_mask(depth)
    if p.region == "background":
        mask = ~mask
    w = feathered(mask)[..., None]
    return w * blurred + (1.0 - w) * image


def _segment_alpha(h, w, starts, ends, half_width, peak):
    """Union alpha of anti-aliased segments; exactly zero away from them."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    keep = np.ones((h, w))
    for (x0, y0), (x1, y1), hw, a in zip(starts, ends, half_width, peak):
        pad = hw + 1.5
        xlo, xhi = int(max(0, np.floor(min(x0, x1) - pad))), int(min(w, np.ceil(max(x0, x1) + pad) + 1))
        ylo, yhi = int(max(0, np.floor(min(y0, y1) - pad))), int(min(h, np.ceil(max(y0, y1) + pad) + 1))
        if xlo >= xhi or ylo >= yhi:
            continue
        px, py = xx[ylo:yhi, xlo:xhi], yy[ylo:yhi, xlo:xhi]
        dx, dy = x1 - x0, y1 - y0
        seg2 = dx * dx + dy * dy
        u = np.clip(((px - x0) * dx + (py - y0) * dy) / seg2, 0, 1) if seg2 > 0 else np.zeros_like(px)
        dist = np.hypot(px - (x0 + u * dx), py - (y0 + u * dy))
        cover = np.clip(hw + 0.5 - dist, 0.0, 1.0)
        keep[ylo:yhi, xlo:xhi] *= 1.0 - a * cover
    return 1.0 - keep


def _composite(image, alpha, color):
    out = image.astype(np.float64, copy=True)
    m = alpha > 0
    a = alpha[m][:, None]
    out[m] = out[m] * (1.0 - a) + color * a
    return out


def particle_alpha(kind, shape, params, rng) -> np.ndarray:
    """Alpha mask of rain streaks or snow flakes for an image of ``shape``."""
    h, w = shape
    if kind == "rain":
        count = rng.poisson(params.intensity * h * w / 1e6)
        a = np.deg2rad(params.angle)
        direction = np.array([np.sin(a), np.cos(a)])
        lengths = params.streak_length * rng.uniform(0.7, 1.3, count)
        starts = np.stack([rng.uniform(-5, w + 5, count), rng.uniform(-params.streak_length, h, count)], -1)
        ends = starts + lengths[:, None] * direction
        return _segment_alpha(h, w, starts, ends, np.full(count, 0.25), rng.uniform(0.4, 0.7, count))
    count = rng.poisson(params.density * h * w / 1e6)
    a = np.deg2rad(params.fall_direction)
    direction = np.array([np.sin(a), np.cos(a)])
    radii = params.flake_size * rng.uniform(0.6, 1.4, count)
    starts = np.stack([rng.uniform(0, w, count), rng.uniform(0, h, count)], -1)
    ends = starts + params.speed * direction
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    keep = np.ones((h, w))
    peaks = rng.uniform(0.6, 0.95, count)
    for (x0, y0), (x1, y1), r, pk in zip(starts, ends, radii, peaks):
        reach = 3 * r
        xlo, xhi = int(max(0, np.floor(min(x0, x1) - reach))), int(min(w, np.ceil(max(x0, x1) + reach) + 1))
        ylo, yhi = int(max(0, np.floor(min(y0, y1) - reach))), int(min(h, np.ceil(max(y0, y1) + reach) + 1))
        if xlo >= xhi or ylo >= yhi:
            continue
        px, py = xx[ylo:yhi, xlo:xhi], yy[ylo:yhi, xlo:xhi]
        dx, dy = x1 - x0, y1 - y0
        seg2 = dx * dx + dy * dy
        u = np.clip(((px - x0) * dx + (py - y0) * dy) / seg2, 0, 1) if seg2 > 0 else np.zeros_like(px)
        d = np.hypot(px - (x0 + u * dx), py - (y0 + u * dy))
        falloff = np.where(d <= reach, np.exp(-0.5 * (d / r) ** 2), 0.0)
        keep[ylo:yhi, xlo:xhi] *= 1.0 - pk * falloff
    return 1.0 - keep


RAIN_COLOR = 0.8
SNOW_COLOR = 0.95


def apply(image: np.ndarray, depth: Optional[np.ndarray], spec: DegradationSpec, *,
          near: Optional[float] = None, far: Optional[float] = None, transmission=None) -> np.ndarray:
    """Corrupt ``image`` according to ``spec``.

    Haze normalizes depth by ``near``/``far`` (defaults: the depth map's own
    range).  ``transmission`` overrides the haze transmission map directly and
    exists for testing the scattering model in isolation.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DegradationError(f"expected H x W x 3 image, got {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise DegradationError("image values must lie in [0, 1]")
    spec.validate()
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if kind in ("haze", "defocus_blur") and depth is None and transmission is None:
        raise MissingDepthError(f"{kind} requires a depth map")

    if kind == "lowlight":
        out = apply_lowlight(image, p, rng)
    elif kind == "haze":
        if transmission is None:
            depth = np.asarray(depth, dtype=np.float64)
            lo = float(depth.min()) if near is None else near
            hi = float(depth.max()) if far is None else far
            transmission = haze_transmission(depth, p.beta, lo, max(hi, lo + 1e-9))
        out = apply_haze(image, transmission, p.ambient)
    elif kind == "motion_blur":
        out = convolve(image, motion_kernel(p.kernel_size, p.angle))
    elif kind == "defocus_blur":
        out = apply_defocus(image, np.asarray(depth, dtype=np.float64), p)
    else:
        alpha = particle_alpha(kind, image.shape[:2], p, rng)
        out = _composite(image, alpha, RAIN_COLOR if kind == "rain" else SNOW_COLOR)
    return np.clip(out, 0.0, 1.0)


def apply_composed(image, depth, specs: Sequence[DegradationSpec], **kwargs) -> np.ndarray:
    """Apply up to three corruptions of distinct kinds in canonical order."""
    specs = list(specs)
    if len(specs) > 3:
        raise DegradationError(f"at most 3 composed corruptions supported, got {len(specs)}")
    kinds = [s.kind for s in specs]
    if len(set(kinds)) != len(kinds):
        raise DegradationError(f"duplicate degradation kinds in {kinds}")
    out = np.asarray(image, dtype=np.float64)
    for spec in sorted(specs, key=lambda s: CANONICAL_ORDER.index(s.kind)):
        out = apply(out, depth, spec, **kwargs)
    return out


def degrade_views(images, depths, kind_or_specs, scene_seed: int, *, near=None, far=None):
    """Corrupt every view with its own per-view spec.

    ``kind_or_specs`` is a kind name (specs are sampled from per-view seeds)
    or an explicit list of specs (or of spec lists, for composition), one per
    view.  Returns (images, specs).
    """
    out, used = [], []
    for i, img in enumerate(images):
        d = None if depths is None else depths[i]
        if isinstance(kind_or_specs, str):
            spec = sample_spec(kind_or_specs, np.random.default_rng(view_seed(scene_seed, i, kind_or_specs)))
        else:
            spec = kind_or_specs[i]
        if isinstance(spec, (list, tuple)):
            out.append(apply_composed(img, d, spec, near=near, far=far))
        else:
            out.append(apply(img, d, spec, near=near, far=far))
        used.append(spec)
    return np.stack(out).astype(np.float32), used
