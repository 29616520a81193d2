"""Blind degradation-type classifier and degradation-agnostic rendering."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import degrade
from .dataset import PosedImageSet
from .model import render
from .serialization import MissingCheckpointFileError, atomic_write_text, load_into, save_module

log = logging.getLogger(__name__)


class NotTrainedError(RuntimeError):
    pass


@dataclass
class ClassifierConfig:
    channels: tuple = (16, 32, 64, 64)
    stem: int = 16  # stride-1 conv ahead of the stride-2 stages; 0 disables
    patch_size: int = 64
    samples_per_kind: int = 500
    epochs: int = 60
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    fresh_each_epoch: bool = True  # re-synthesize corruptions every epoch


class DegradationClassifier(nn.Module):
    """Full-resolution stem, four stride-2 conv stages, global mean+max pool, linear head.

    The stem keeps the pixel-scale detail that separates the two blur kinds.
    """

    def __init__(self, classes: Sequence[str], config: ClassifierConfig = None):
        super().__init__()
        config = config or ClassifierConfig()
        if len(classes) < 2:
            raise ValueError(f"a classifier needs at least 2 kinds, got {list(classes)}")
        self.classes = list(classes)
        self.config = config
        torch.manual_seed(config.seed)
        layers, c_in = [], 3
        if config.stem:
            layers += [nn.Conv2d(3, config.stem, 3, padding=1), nn.BatchNorm2d(config.stem), nn.ReLU()]
            c_in = config.stem
        for c in config.channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.BatchNorm2d(c), nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(2 * c_in, len(classes))
        self.trained = False

    def forward(self, x):
        """B x 3 x H x W in [0, 1] -> logits B x classes."""
        h = self.body(x - 0.5)
        # max pooling alongside the mean tells region-limited blur from uniform blur
        return self.head(torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], -1))

    def probabilities(self, images) -> np.ndarray:
        if not self.trained:
            raise NotTrainedError("classifier has not been trained or loaded")
        x = torch.as_tensor(np.asarray(images, np.float32))
        if x.dim() == 3:
            x = x[None]
        self.eval()
        with torch.no_grad():
            p = torch.softmax(self(x.permute(0, 3, 1, 2)).double(), -1)
        return p.numpy()

    def classify(self, image) -> tuple[str, float]:
        """Predicted kind and its softmax confidence; ties go to the lower class index."""
        p = self.probabilities(image)[0]
        i = int(np.argmax(p))
        return self.classes[i], float(p[i])


def _crop(image, size, rng):
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch size {size}")
    y, x = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    return image[y:y + size, x:x + size]


def synthesize(scenes: Sequence[PosedImageSet], kinds: Sequence[str], per_kind: int, patch: int, seed):
    """Random corrupted patches with kind labels; ``seed`` is anything ``default_rng`` accepts."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label, kind in enumerate(kinds):
        for _ in range(per_kind):
            scene = scenes[int(rng.integers(len(scenes)))]
            view = scene.views[int(rng.integers(len(scene)))]
            spec = degrade.sample_spec(kind, rng)
            img = degrade.apply(view.image, view.depth, spec, near=view.camera.near, far=view.camera.far)
            xs.append(_crop(img, patch, rng).astype(np.float32))
            ys.append(label)
    return np.stack(xs), np.array(ys)


def train_classifier(scenes: Sequence[PosedImageSet], kinds: Sequence[str], config: ClassifierConfig = None):
    """Cross-entropy training on freshly synthesized corrupted patches."""
    config = config or ClassifierConfig()
    kinds = list(kinds)
    if len(kinds) < 2:
        raise ValueError(f"need at least 2 kinds to classify, got {kinds}")
    for k in kinds:
        if k not in degrade.KINDS:
            raise ValueError(f"unknown degradation kind {k!r}")
    model = DegradationClassifier(kinds, config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    n = config.samples_per_kind * len(kinds)
    total = config.epochs * int(np.ceil(n / config.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, total)
    model.train()
    for epoch in range(config.epochs):
        if epoch == 0 or config.fresh_each_epoch:
            x, y = synthesize(scenes, kinds, config.samples_per_kind, config.patch_size, [config.seed, epoch])
            xt = torch.as_tensor(x).permute(0, 3, 1, 2).contiguous()
            yt = torch.as_tensor(y)
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            xb = xt[idx]
            # random flips: every kind is symmetric under them
            if torch.rand((), generator=gen) < 0.5:
                xb = xb.flip(-1)
            if torch.rand((), generator=gen) < 0.5:
                xb = xb.flip(-2)
            loss = nn.functional.cross_entropy(model(xb), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        log.debug("classifier epoch %d loss %.4f", epoch, float(loss.detach()))
    model.eval()
    model.trained = True
    return model


def accuracy(model: DegradationClassifier, images, labels) -> float:
    p = model.probabilities(images)
    return float(np.mean(np.argmax(p, -1) == np.asarray(labels)))


def vote(model: DegradationClassifier, images) -> str:
    """Majority kind over views; ties resolve to the lower class index."""
    preds = np.argmax(model.probabilities(images), -1)
    counts = np.bincount(preds, minlength=len(model.classes))
    winners = np.flatnonzero(counts == counts.max())
    if len(winners) > 1:
        log.warning("vote tie between %s; choosing %s", [model.classes[i] for i in winners],
                    model.classes[winners[0]])
    return model.classes[int(winners[0])]


def render_blind(restorer, classifier: DegradationClassifier, images, cameras, target, **kwargs):
    """Render with the kind voted by the classifier over the source views."""
    kind = vote(classifier, images)
    return render(restorer, images, cameras, target, kind, **kwargs), kind


def save_classifier(model: DegradationClassifier, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_module(model, d / "classifier.bin")
    meta = {"classes": model.classes, "config": dataclasses.asdict(model.config)}
    atomic_write_text(d / "classes.json", json.dumps(meta, indent=1))
    return d


def load_classifier(directory) -> DegradationClassifier:
    d = Path(directory)
    meta_path = d / "classes.json"
    if not meta_path.is_file():
        raise MissingCheckpointFileError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    cfg = meta.get("config", {})
    cfg["channels"] = tuple(cfg.get("channels", ClassifierConfig.channels))
    model = DegradationClassifier(meta["classes"], ClassifierConfig(**cfg))
    load_into(model, d / "classifier.bin")
    model.eval()
    model.trained = True
    return model
