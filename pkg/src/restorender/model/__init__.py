from .latents import (Conditioning, ConditionedLinear, LatentBank, LatentMix, ResidueEncoder, UnknownKindError,
                      dlm_apply, dlm_apply_with_residue)
from .network import (NONE_KIND, PRESETS, ModelConfig, Restorer, interpolate_latents, ray_depth_to_z,
                      register_new_kind, render, render_image)
from .transformers import RenderOutput

__all__ = [
    "Conditioning", "ConditionedLinear", "LatentBank", "LatentMix", "ResidueEncoder", "UnknownKindError",
    "dlm_apply", "dlm_apply_with_residue", "NONE_KIND", "PRESETS", "ModelConfig", "Restorer",
    "interpolate_latents", "ray_depth_to_z", "register_new_kind", "render", "render_image", "RenderOutput",
]
