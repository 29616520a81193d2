"""Supervised training, frozen-backbone fine-tuning and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import degrade
from .dataset import PosedImageSet
from .model import PRESETS, ModelConfig, Restorer
from .model.latents import Kind
from .perceptual import RandomFeaturePerceptual
from .serialization import (CorruptCheckpointError, MissingCheckpointFileError, ShapeMismatchError,
                            atomic_write_text, load_into, save_module)

log = logging.getLogger(__name__)

DEFAULT_KINDS = ("lowlight", "motion_blur", "haze", "rain")


class TrainingDivergedError(FloatingPointError):
    pass


class FinetuneError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    lr_init: float = 5e-4
    lr_final: float = 1e-6
    batch_rays: int = 512
    min_views: int = 8
    max_views: int = 12
    kinds: tuple = DEFAULT_KINDS
    perceptual_weight: float = 0.1
    seed: int = 0
    model: str = "tiny"
    ablation: Optional[tuple] = None  # subset of dlm_conv, dlm_view, dlm_point, arm; None = all on

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if self.ablation is not None:
            self.ablation = tuple(self.ablation)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if not (1 <= self.min_views <= self.max_views):
            raise ValueError(f"bad view-count range [{self.min_views}, {self.max_views}]")
        if not self.kinds:
            raise ValueError("need at least one degradation kind")

    def model_config(self) -> ModelConfig:
        cfg = PRESETS[self.model] if self.model in PRESETS else ModelConfig()
        cfg = dataclasses.replace(cfg, seed=self.seed)
        if self.ablation is not None:
            cfg = cfg.with_ablation(self.ablation)
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FinetuneConfig:
    kind: str
    steps: int = 10_000
    lr: float = 5e-3
    batch_rays: int = 512
    min_views: int = 8
    max_views: int = 12
    perceptual_weight: float = 0.1
    seed: int = 0
    override: bool = False


def lr_at(step: int, total: int, lr_init: float = 5e-4, lr_final: float = 1e-6) -> float:
    """Cosine decay from lr_init at step 0 to lr_final at ``total``."""
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * frac))


def loss(rendered, ground_truth, perceptual_weight: float = 0.1, metric=None):
    """MSE + weight * perceptual on B x 3 x h x w (or h x w x 3) patches.

    Returns (total, mse, perceptual) tensors.
    """
    rendered = torch.as_tensor(rendered)
    ground_truth = torch.as_tensor(ground_truth).to(rendered.dtype)
    if rendered.shape != ground_truth.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(ground_truth.shape)}")
    mse = ((rendered - ground_truth) ** 2).mean()
    if perceptual_weight == 0:
        perc = torch.zeros((), dtype=mse.dtype)
    else:
        if rendered.dim() == 3 and rendered.shape[-1] == 3:
            rendered, ground_truth = rendered.permute(2, 0, 1), ground_truth.permute(2, 0, 1)
        metric = metric or _default_metric()
        perc = metric(rendered, ground_truth)
    return mse + perceptual_weight * perc, mse, perc


_METRIC = None


def _default_metric():
    global _METRIC
    if _METRIC is None:
        _METRIC = RandomFeaturePerceptual()
    return _METRIC


@dataclass
class TrainState:
    model: Restorer
    config: TrainConfig
    optimizer: torch.optim.Optimizer = None
    step: int = 0
    trained_kinds: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.config.lr_init)


def init_state(config: TrainConfig, kinds: Optional[Sequence[str]] = None) -> TrainState:
    kinds = list(kinds or config.kinds)
    model = Restorer(config.model_config(), kinds=kinds)
    return TrainState(model, config)


def sample_view_count(rng: np.random.Generator, available: int, lo: int = 8, hi: int = 12) -> int:
    """Uniform integer in [lo, hi], clamped to the available source views."""
    return int(min(rng.integers(lo, hi + 1), available))


def sample_patch(rng: np.random.Generator, height: int, width: int, rays: int):
    """A square, possibly strided, patch of pixels: (pixels R x 2, side)."""
    side = max(2, int(math.isqrt(rays)))
    side = min(side, height, width)
    max_stride = max(1, min((height - 1) // max(side - 1, 1), (width - 1) // max(side - 1, 1), 3))
    stride = int(rng.integers(1, max_stride + 1))
    span = (side - 1) * stride
    y0 = int(rng.integers(0, height - span))
    x0 = int(rng.integers(0, width - span))
    ys, xs = np.meshgrid(y0 + stride * np.arange(side), x0 + stride * np.arange(side), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], -1), side


def make_example(scene: PosedImageSet, kind: str, rng: np.random.Generator, min_views=8, max_views=12,
                 batch_rays=512, corruption_seed: int = 0):
    """One supervised example: degraded sources, clean target patch."""
    n = len(scene)
    target = int(rng.integers(n))
    candidates = [i for i in range(n) if i != target]
    count = sample_view_count(rng, len(candidates), min_views, max_views)
    sources = sorted(int(i) for i in rng.choice(candidates, size=count, replace=False))
    src = scene.subset(sources)
    cam = scene.views[target].camera
    if kind == "none" or kind not in degrade.KINDS:
        images = src.images
    else:
        images, _ = degrade.degrade_views(src.images, src.depths, kind, corruption_seed,
                                          near=cam.near, far=cam.far)
    pixels, side = sample_patch(rng, cam.height, cam.width, batch_rays)
    gt = scene.views[target].image[pixels[:, 1], pixels[:, 0]]
    return {"images": images, "cameras": src.cameras, "target": cam, "pixels": pixels, "side": side,
            "gt": gt, "sources": sources, "target_index": target}


def _patch_loss(out, ex, weight, dtype):
    side = ex["side"]
    pred = out.color.reshape(side, side, 3)
    gt = torch.as_tensor(ex["gt"], dtype=dtype).reshape(side, side, 3)
    return loss(pred, gt, weight)


def step_choices(config: TrainConfig, step: int, num_scenes: int):
    """(rng, scene index, kind) for a step; the kind is uniform over config.kinds."""
    rng = np.random.default_rng([config.seed, step])
    scene_index = int(rng.integers(num_scenes))
    kind = config.kinds[int(rng.integers(len(config.kinds)))]
    return rng, scene_index, kind


def train_step(state: TrainState, scenes: Sequence[PosedImageSet]) -> TrainState:
    """One optimizer step on a freshly corrupted example.

    All randomness derives from (seed, step), so a run is reproducible and
    can resume from any checkpointed step.
    """
    cfg = state.config
    rng, scene_index, kind = step_choices(cfg, state.step, len(scenes))
    scene = scenes[scene_index]
    ex = make_example(scene, kind, rng, cfg.min_views, cfg.max_views, cfg.batch_rays,
                      corruption_seed=int(rng.integers(2**31)))
    lr = lr_at(state.step, cfg.steps, cfg.lr_init, cfg.lr_final)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    model = state.model
    out = model(ex["images"], ex["cameras"], ex["target"], kind, ex["pixels"], jitter_seed=cfg.seed * 100003 + state.step)
    total, mse, perc = _patch_loss(out, ex, cfg.perceptual_weight, model.dtype)
    if not torch.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss at step {state.step} (kind {kind!r})")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.history.append({"step": state.step, "kind": kind, "mse": float(mse.detach()), "perceptual": float(perc.detach()),
                          "lr": lr, "wallclock": time.time()})
    state.step += 1
    for k in cfg.kinds:
        if k not in state.trained_kinds:
            state.trained_kinds.append(k)
    return state


def train(state: TrainState, scenes, steps: Optional[int] = None, log_path=None, progress_every=0) -> TrainState:
    end = state.config.steps if steps is None else state.step + steps
    fh = open(log_path, "a") if log_path else None
    try:
        while state.step < end:
            train_step(state, scenes)
            if fh:
                fh.write(json.dumps(state.history[-1]) + "\n")
            if progress_every and state.step % progress_every == 0:
                recent = state.history[-progress_every:]
                log.info("step %d mse %.5f", state.step, np.mean([h["mse"] for h in recent]))
    finally:
        if fh:
            fh.close()
    return state


def finetune(state: TrainState, config: FinetuneConfig, scenes: Sequence[PosedImageSet], log_path=None) -> TrainState:
    """Optimize only the latent code of ``config.kind``; every other parameter is frozen."""
    model = state.model
    if config.kind not in model.kinds:
        raise FinetuneError(f"kind {config.kind!r} is not registered; call register_new_kind first")
    if config.kind in state.trained_kinds and not config.override:
        raise FinetuneError(f"kind {config.kind!r} has already been trained; pass override=True to continue")
    if not scenes:
        raise FinetuneError("fine-tuning needs at least one scene")
    code = model.bank.codes[config.kind]
    flags = {name: p.requires_grad for name, p in model.named_parameters()}
    for p in model.parameters():
        p.requires_grad_(False)
    code.requires_grad_(True)
    opt = torch.optim.Adam([code], lr=config.lr)
    fh = open(log_path, "a") if log_path else None
    try:
        for step in range(config.steps):
            rng = np.random.default_rng([config.seed, 7, step])
            scene = scenes[int(rng.integers(len(scenes)))]
            ex = make_example(scene, config.kind, rng, config.min_views, config.max_views, config.batch_rays,
                              corruption_seed=int(rng.integers(2**31)))
            lr = lr_at(step, config.steps, config.lr, config.lr * 2e-3)
            opt.param_groups[0]["lr"] = lr
            out = model(ex["images"], ex["cameras"], ex["target"], config.kind, ex["pixels"],
                        jitter_seed=config.seed * 100003 + step)
            total, mse, perc = _patch_loss(out, ex, config.perceptual_weight, model.dtype)
            if not torch.isfinite(total):
                raise TrainingDivergedError(f"non-finite loss at finetune step {step} (kind {config.kind!r})")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            rec = {"step": step, "kind": config.kind, "mse": float(mse.detach()),
                   "perceptual": float(perc.detach()), "lr": lr, "wallclock": time.time()}
            state.history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        for name, p in model.named_parameters():
            p.requires_grad_(flags.get(name, True))
        if fh:
            fh.close()
    if config.kind not in state.trained_kinds:
        state.trained_kinds.append(config.kind)
    # the backbone optimizer never saw the new code; rebuild so later training includes it
    state.optimizer = torch.optim.Adam(model.parameters(), lr=state.config.lr_init)
    return state


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: TrainState, directory) -> Path:
    """weights.bin + latents.json + config.json (+ state.json), each written atomically."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    model = state.model if isinstance(state, TrainState) else state
    save_module(model, d / "weights.bin")
    atomic_write_text(d / "latents.json", json.dumps({k: i for i, k in enumerate(model.kinds)}, indent=1))
    atomic_write_text(d / "config.json", json.dumps(model.config.to_dict(), indent=1))
    if isinstance(state, TrainState):
        meta = {"step": state.step, "trained_kinds": list(state.trained_kinds), "train_config": state.config.to_dict()}
        atomic_write_text(d / "state.json", json.dumps(meta, indent=1))
    return d


def _read_json(path: Path):
    if not path.is_file():
        raise MissingCheckpointFileError(f"{path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from None


def load_checkpoint(directory) -> TrainState:
    d = Path(directory)
    if not d.is_dir():
        raise MissingCheckpointFileError(f"checkpoint directory {d} not found")
    cfg_dict = _read_json(d / "config.json")
    latents = _read_json(d / "latents.json")
    try:
        mcfg = ModelConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise ShapeMismatchError(f"config.json does not describe a model: {exc}") from None
    kinds = [k for k, _ in sorted(latents.items(), key=lambda kv: kv[1])]
    if sorted(latents.values()) != list(range(len(kinds))):
        raise CorruptCheckpointError(f"latents.json indices must be 0..{len(kinds) - 1}")
    model = Restorer(mcfg, kinds=kinds)
    load_into(model, d / "weights.bin")
    meta_path = d / "state.json"
    if meta_path.is_file():
        meta = _read_json(meta_path)
        tcfg = TrainConfig.from_dict(meta["train_config"])
        return TrainState(model, tcfg, step=meta["step"], trained_kinds=list(meta["trained_kinds"]))
    return TrainState(model, TrainConfig(kinds=tuple(k for k in kinds if k in degrade.KINDS) or ("lowlight",)),
                      trained_kinds=list(kinds))
