"""Degradation latent codes and the layers whose weights they generate.

A ``LatentBank`` owns one learnable code per degradation kind and, for every
conditioned layer ("site"), a fully-connected generator mapping a code to
that layer's weight matrix.  Layers only know their site id; the bank and
the active code travel through ``forward`` as a ``Conditioning`` pair.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Union

import torch
from torch import nn


class UnknownKindError(KeyError):
    def __init__(self, kind, registered):
        super().__init__(f"degradation kind {kind!r} is not registered; registered kinds: {sorted(registered)}")
        self.kind = kind

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class LatentMix:
    """Convex combination ``alpha * L_a + (1 - alpha) * L_b`` usable as a kind."""

    kind_a: str
    kind_b: str
    alpha: float

    def __str__(self):
        return f"{self.kind_a}*{self.alpha:g}+{self.kind_b}*{1 - self.alpha:g}"


Kind = Union[str, LatentMix]


class LatentBank(nn.Module):
    def __init__(self, kinds=(), latent_dim: int = 32, seed: int = 0):
        super().__init__()
        self.latent_dim = latent_dim
        self.codes = nn.ParameterDict()
        self.generators = nn.ModuleDict()
        self.site_shapes: dict[str, tuple[int, int]] = {}
        gen = torch.Generator().manual_seed(seed)
        for k in kinds:
            self.codes[k] = nn.Parameter(torch.randn(latent_dim, generator=gen))
        self._seed = seed

    @property
    def kinds(self) -> list[str]:
        return list(self.codes.keys())

    def add_site(self, site_id: str, d_in: int, d_out: int, seed: int = 0):
        if site_id in self.site_shapes:
            raise ValueError(f"DLM site {site_id!r} already exists")
        gen = torch.Generator().manual_seed(seed)
        fc = nn.Linear(self.latent_dim, d_in * d_out)
        with torch.no_grad():
            # matches nn.Linear's default weight variance, 1 / (3 d_in), at unit-variance codes
            fc.weight.normal_(0.0, 1.0 / math.sqrt(3 * self.latent_dim), generator=gen)
            fc.bias.zero_()
        self.generators[site_id.replace(".", "/")] = fc
        self.site_shapes[site_id] = (d_in, d_out)

    def generator(self, site_id: str) -> nn.Linear:
        return self.generators[site_id.replace(".", "/")]

    def code(self, kind: Kind) -> torch.Tensor:
        if isinstance(kind, LatentMix):
            a, b = self.code(kind.kind_a), self.code(kind.kind_b)
            if kind.alpha == 1:
                return a
            if kind.alpha == 0:
                return b
            return kind.alpha * a + (1 - kind.alpha) * b
        if kind not in self.codes:
            raise UnknownKindError(kind, self.kinds)
        return self.codes[kind]

    def weight(self, site_id: str, code: torch.Tensor) -> torch.Tensor:
        """W = F_latent(code) reshaped to d_out x d_in and scaled by 1/sqrt(d_in)."""
        d_in, d_out = self.site_shapes[site_id]
        w = self.generator(site_id)(code).view(d_out, d_in)
        return w / math.sqrt(d_in)

    def register_kind(self, name: str, noise: float = 0.01) -> torch.Tensor:
        """Append a code initialized at the mean of existing codes plus small noise."""
        if name in self.codes:
            raise ValueError(f"degradation kind {name!r} is already registered")
        if "." in name or not name:
            raise ValueError(f"invalid kind name {name!r}")
        gen = torch.Generator().manual_seed(self._seed + zlib.crc32(name.encode()))
        ref = next(iter(self.codes.values()), None)
        if ref is None:
            init = torch.randn(self.latent_dim, generator=gen)
        else:
            mean = torch.stack([c.detach() for c in self.codes.values()]).mean(0)
            init = mean + noise * torch.randn(self.latent_dim, generator=gen).to(mean.dtype)
        self.codes[name] = nn.Parameter(init.to(ref.dtype) if ref is not None else init)
        return self.codes[name]


@dataclass
class Conditioning:
    bank: LatentBank
    code: torch.Tensor

    def weight(self, site_id: str) -> torch.Tensor:
        return self.bank.weight(site_id, self.code)


def dlm_apply(x: torch.Tensor, kind: Kind, site: str, latents: LatentBank) -> torch.Tensor:
    """DLM(X, D) = W X with W generated from the code of ``kind``."""
    w = latents.weight(site, latents.code(kind))
    return x @ w.T


def dlm_apply_with_residue(x, kind, site, latents, nearest_image, encoder: "ResidueEncoder"):
    """DLM(X, D) + S, S the pooled residue of the nearest source image (broadcast)."""
    return dlm_apply(x, kind, site, latents) + encoder(nearest_image)


class ConditionedLinear(nn.Module):
    """Linear layer whose weight is generated per kind (DLM) or plain.

    With ``conditioned=False`` this is an ordinary ``nn.Linear``; the two
    variants start from the same weight statistics.
    """

    def __init__(self, bank: LatentBank, site_id: str, d_in: int, d_out: int, conditioned: bool,
                 bias: bool = True, seed: int = 0):
        super().__init__()
        self.site_id = site_id
        self.conditioned = conditioned
        self.d_in, self.d_out = d_in, d_out
        if conditioned:
            bank.add_site(site_id, d_in, d_out, seed=seed)
            self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        else:
            self.linear = nn.Linear(d_in, d_out, bias=bias)

    def forward(self, x, cond: Conditioning):
        if not self.conditioned:
            return self.linear(x)
        y = x @ cond.weight(self.site_id).T
        return y if self.bias is None else y + self.bias


class ConditionedPixelMap(ConditionedLinear):
    """Per-pixel (1x1) DLM on B x C x H x W maps."""

    def forward(self, x, cond: Conditioning):
        y = super().forward(x.movedim(1, -1), cond)
        return y.movedim(-1, 1)


class ResidueEncoder(nn.Module):
    """Tiny conv encoder + global average pool: image -> d_out vector."""

    def __init__(self, d_out: int, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * hidden, d_out, 1),
        )
        # the residual branch starts switched off and is learned from there
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.d_out = d_out

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``image``: 3 x H x W or 1 x 3 x H x W -> d_out."""
        if image.dim() == 3:
            image = image[None]
        return self.net(image).mean(dim=(0, 2, 3))

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self
