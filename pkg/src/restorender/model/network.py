"""The degradation-conditioned renderer and its public operations."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .. import geometry
from ..dataset import Camera
from .features import FeatureUNet
from .latents import Conditioning, Kind, LatentBank, LatentMix, ResidueEncoder, UnknownKindError
from .transformers import RayTransformer, RenderOutput, ViewTransformer

NONE_KIND = "none"


@dataclass
class ModelConfig:
    feature_channels: int = 64
    unet_base: int = 16
    unet_depth: int = 2
    width: int = 64
    view_blocks: int = 2
    ray_blocks: int = 2
    heads: int = 2
    samples: int = 64
    latent_dim: int = 32
    residue_hidden: int = 16
    dlm_in_conv: bool = True
    dlm_in_view: bool = True
    dlm_in_point: bool = True
    use_arm: bool = True
    gather_mode: str = "bilinear"
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def with_ablation(self, enabled: Sequence[str]) -> "ModelConfig":
        """Toggle set from names among dlm_conv, dlm_view, dlm_point, arm."""
        names = {"dlm_conv": "dlm_in_conv", "dlm_view": "dlm_in_view", "dlm_point": "dlm_in_point", "arm": "use_arm"}
        enabled = [e for e in enabled if e]
        bad = [e for e in enabled if e not in names]
        if bad:
            raise ValueError(f"unknown ablation toggles {bad}; expected a subset of {sorted(names)}")
        return dataclasses.replace(self, **{v: (k in enabled) for k, v in names.items()})


# desk-scale presets; "micro" is the gradient-check configuration
PRESETS = {
    "default": ModelConfig(),
    "tiny": ModelConfig(feature_channels=16, unet_base=8, width=32, view_blocks=1, ray_blocks=1,
                        heads=2, samples=24, latent_dim=16, residue_hidden=8),
    "micro": ModelConfig(feature_channels=8, unet_base=4, unet_depth=2, width=8, view_blocks=1, ray_blocks=1,
                         heads=2, samples=8, latent_dim=4, residue_hidden=4),
}


class Restorer(nn.Module):
    """Feature UNet -> epipolar gather -> view transformer -> ray transformer."""

    def __init__(self, config: ModelConfig = None, kinds: Sequence[str] = (NONE_KIND,)):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        torch.manual_seed(config.seed)
        s = config.seed
        self.bank = LatentBank(kinds, config.latent_dim, seed=s)
        self.features = FeatureUNet(self.bank, config.feature_channels, config.unet_base, config.unet_depth,
                                    use_dlm=config.dlm_in_conv, seed=s + 1000)
        g_in = config.feature_channels + 3
        self.view = ViewTransformer(self.bank, g_in, config.width, config.view_blocks, config.dlm_in_view,
                                    seed=s + 2000)
        self.ray = RayTransformer(self.bank, config.width, config.ray_blocks, config.heads, config.dlm_in_point,
                                  seed=s + 3000)
        if config.use_arm:
            self.residue_conv = ResidueEncoder(self.features.coarse_channels, config.residue_hidden)
            self.residue_view = ResidueEncoder(config.width, config.residue_hidden)

    @property
    def kinds(self) -> list[str]:
        return self.bank.kinds

    def conditioning(self, kind: Kind) -> Conditioning:
        return Conditioning(self.bank, self.bank.code(kind))

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def as_tensor_images(self, images) -> torch.Tensor:
        """N x H x W x 3 array/tensor -> N x 3 x H x W tensor in the model dtype."""
        t = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
        return t.to(self.dtype).permute(0, 3, 1, 2).contiguous()

    def residues(self, nearest_image: torch.Tensor):
        if not self.config.use_arm:
            return None, None
        return self.residue_conv(nearest_image), self.residue_view(nearest_image)

    def extract_features(self, images: torch.Tensor, kind: Kind, residue=None) -> torch.Tensor:
        """N x 3 x H x W images -> N x C x H x W features (C = feature_channels)."""
        return self.features(images, self.conditioning(kind), residue)

    def encode_sources(self, images, cameras: Sequence[Camera], target: Camera, kind: Kind):
        """Everything that depends on the source views but not on the rays."""
        imgs = self.as_tensor_images(images)
        if imgs.shape[0] < 1:
            raise ValueError("need at least one source view")
        if imgs.shape[0] != len(cameras):
            raise ValueError(f"{imgs.shape[0]} source images but {len(cameras)} cameras")
        cond = self.conditioning(kind)
        nearest = geometry.nearest_source_view(target, cameras)
        res_conv, res_view = self.residues(imgs[nearest])
        feats = self.features(imgs, cond, res_conv)
        return {"maps": torch.cat([feats, imgs], 1), "cameras": list(cameras), "cond": cond,
                "residue_view": res_view, "nearest": nearest}

    def render_rays(self, encoded, rays: geometry.RayBatch, jitter_seed=None, offsets=None) -> RenderOutput:
        samples = geometry.stratified_samples(rays, self.config.samples, jitter_seed, offsets)
        g = geometry.gather(encoded["maps"], encoded["cameras"], samples, rays.directions,
                            mode=self.config.gather_mode)
        pf, _, _ = self.view(g.features, g.dir_diff, g.valid, encoded["cond"], encoded["residue_view"])
        return self.ray(pf, samples.depths, rays.near, rays.far, encoded["cond"])

    def forward(self, images, cameras, target: Camera, kind: Kind, pixels=None, jitter_seed=None,
                chunk: Optional[int] = None) -> RenderOutput:
        encoded = self.encode_sources(images, cameras, target, kind)
        if pixels is None:
            pixels = geometry.all_pixels(target)
        rays = geometry.rays_for_view(target, pixels, dtype=self.dtype)
        if chunk is None or len(rays) <= chunk:
            return self.render_rays(encoded, rays, jitter_seed)
        offsets = None
        if jitter_seed is not None:
            # draw all jitter up front so the result does not depend on the chunk size
            offsets = geometry.stratum_offsets(len(rays), self.config.samples, jitter_seed, self.dtype)
        outs = [self.render_rays(encoded, rays[i:i + chunk], None, None if offsets is None else offsets[i:i + chunk])
                for i in range(0, len(rays), chunk)]
        return RenderOutput(torch.cat([o.color for o in outs]), torch.cat([o.depth for o in outs]),
                            torch.cat([o.weights for o in outs]))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def render(model: Restorer, images, cameras, target: Camera, kind: Kind, *, chunk: int = 1024,
           jitter_seed=None) -> RenderOutput:
    """Render a full target view without gradients."""
    with torch.no_grad():
        return model(images, cameras, target, kind, None, jitter_seed, chunk)


def render_image(model, images, cameras, target: Camera, kind: Kind, **kwargs):
    out = render(model, images, cameras, target, kind, **kwargs)
    return out.image(target.height, target.width), out


def interpolate_latents(model_or_bank, kind_a: str, kind_b: str, alpha: float) -> LatentMix:
    bank = model_or_bank.bank if isinstance(model_or_bank, Restorer) else model_or_bank
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    for k in (kind_a, kind_b):
        if k not in bank.kinds:
            raise UnknownKindError(k, bank.kinds)
    return LatentMix(kind_a, kind_b, float(alpha))


def register_new_kind(model: Restorer, name: str) -> Restorer:
    """Append one latent code for ``name``; everything else is untouched."""
    model.bank.register_kind(name)
    return model


def ray_depth_to_z(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Expected ray distance (H x W) -> z-depth using the per-pixel ray directions."""
    return depth * (camera.pixel_directions() @ camera.optical_axis)
