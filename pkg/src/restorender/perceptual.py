"""Perceptual distance interface plus a weight-free default.

Anything callable as ``metric(a, b) -> scalar tensor`` on B x 3 x H x W
batches in [0, 1] can stand in, e.g. a real LPIPS network.
"""

from __future__ import annotations

from typing import Protocol

import torch
from torch import nn


class PerceptualMetric(Protocol):
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


class RandomFeaturePerceptual(nn.Module):
    """LPIPS-shaped distance through a fixed, randomly initialized conv pyramid.

    Three stride-2 stages; activations are unit-normalized across channels
    and compared with squared error, averaged over positions and stages.
    Parameters never train.
    """

    SEED = 20240901

    def __init__(self, channels=(8, 16, 32), seed: int = SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        c_in = 3
        for c in channels:
            conv = nn.Conv2d(c_in, c, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * c_in)) ** 0.5, generator=gen)
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            c_in = c
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)

    def _features(self, x):
        feats = []
        x = 2 * x - 1
        for stage in self.stages:
            x = stage(x)
            feats.append(x / (x.norm(dim=1, keepdim=True) + 1e-10))
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.dim() == 3:
            a, b = a[None], b[None]
        self.to(a.dtype)
        fa, fb = self._features(a), self._features(b)
        return sum(((x - y) ** 2).sum(1).mean() for x, y in zip(fa, fb)) / len(fa)


def to_nchw(image) -> torch.Tensor:
    """H x W x 3 (or B x H x W x 3) array/tensor -> B x 3 x H x W tensor."""
    t = torch.as_tensor(image)
    if t.dim() == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2)
