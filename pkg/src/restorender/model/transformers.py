"""View transformer (across source views) and ray transformer (along samples)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .latents import ConditionedLinear, Conditioning, LatentBank


@dataclass
class RenderOutput:
    color: torch.Tensor  # R x 3 in [0, 1]
    depth: torch.Tensor  # R, expected ray distance
    weights: torch.Tensor  # R x K, final-layer ray attention of the pooled query

    def image(self, height: int, width: int):
        return self.color.detach().reshape(height, width, 3).cpu().numpy()

    def depth_map(self, height: int, width: int):
        return self.depth.detach().reshape(height, width).cpu().numpy()


def _ffn(width):
    return nn.Sequential(nn.LayerNorm(width), nn.Linear(width, 2 * width), nn.ReLU(), nn.Linear(2 * width, width))


class ViewBlock(nn.Module):
    """Cross-attention from a point's running feature to its N view features.

    Subtraction attention: logit_i = w2 . relu(W1 (q - k_i) + b1), one scalar
    per view, softmax over the valid views.
    """

    def __init__(self, bank, index, q_in, g_in, width, use_dlm, seed=0):
        super().__init__()
        self.q_norm = nn.LayerNorm(q_in)
        self.q = ConditionedLinear(bank, f"view{index}.q", q_in, width, use_dlm, seed=seed + 1)
        self.k = ConditionedLinear(bank, f"view{index}.k", g_in, width, use_dlm, seed=seed + 2)
        self.v = ConditionedLinear(bank, f"view{index}.v", g_in, width, use_dlm, seed=seed + 3)
        self.logit = nn.Sequential(nn.Linear(width, width), nn.ReLU(), nn.Linear(width, 1))
        self.out = nn.Linear(width, width)
        self.ffn = _ffn(width)

    def forward(self, h, g, pos, valid, any_valid, cond, residue=None):
        q = self.q(self.q_norm(h), cond)  # P x W
        k = self.k(g, cond) + pos  # P x N x W
        v = self.v(g, cond) + pos
        if residue is not None:
            v = v + residue
        logits = self.logit(q[:, None, :] - k).squeeze(-1)  # P x N
        logits = logits.masked_fill(~valid, float("-inf"))
        logits = torch.where(any_valid[:, None], logits, torch.zeros_like(logits))
        attn = torch.softmax(logits, dim=-1) * any_valid[:, None].to(logits.dtype)
        h = q + self.out((attn[..., None] * v).sum(1))
        h = h + self.ffn(h)
        return h, attn


class ViewTransformer(nn.Module):
    def __init__(self, bank: LatentBank, g_in: int, width: int, blocks: int, use_dlm: bool, seed: int = 0):
        super().__init__()
        self.g_norm = nn.LayerNorm(g_in)
        self.pos = nn.Linear(4, width)
        self.blocks = nn.ModuleList(
            ViewBlock(bank, i, g_in if i == 0 else width, g_in, width, use_dlm, seed=seed + 10 * i)
            for i in range(blocks))
        self.width = width

    def forward(self, features, dir_diff, valid, cond: Conditioning, residue=None):
        """features: R x K x N x G -> (point features R x K x W, point validity R x K, last attention)."""
        r, k, n, c = features.shape
        g = self.g_norm(features.reshape(r * k, n, c))
        pos = self.pos(dir_diff.reshape(r * k, n, 4))
        valid = valid.reshape(r * k, n)
        any_valid = valid.any(-1)
        # max over valid views; invalid views and dead points contribute zeros
        h = g.masked_fill(~valid[..., None], float("-inf")).amax(1)
        h = torch.where(any_valid[:, None], h, torch.zeros_like(h))
        attn = None
        for i, block in enumerate(self.blocks):
            h, attn = block(h, g, pos, valid, any_valid, cond, residue if i == 0 else None)
        h = h * any_valid[:, None].to(h.dtype)
        return h.reshape(r, k, self.width), any_valid.reshape(r, k), attn.reshape(r, k, n)


class RayBlock(nn.Module):
    """Dot-product self-attention along a ray; only the value map is conditioned."""

    def __init__(self, bank, index, width, heads, use_dlm, seed=0):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = ConditionedLinear(bank, f"ray{index}.v", width, width, use_dlm, seed=seed)
        self.out = nn.Linear(width, width)
        self.ffn = _ffn(width)

    def forward(self, x, cond):
        r, k, w = x.shape
        hd = w // self.heads
        xn = self.norm(x)
        q = self.q(xn).view(r, k, self.heads, hd).transpose(1, 2)
        key = self.k(xn).view(r, k, self.heads, hd).transpose(1, 2)
        v = self.v(xn, cond).view(r, k, self.heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ key.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        o = (attn @ v).transpose(1, 2).reshape(r, k, w)
        x = x + self.out(o)
        return x + self.ffn(x), attn


def depth_encoding(t_norm: torch.Tensor, bands: int = 4) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(bands, dtype=t_norm.dtype)) * math.pi
    ang = t_norm[..., None] * freqs
    return torch.cat([t_norm[..., None], torch.sin(ang), torch.cos(ang)], -1)


class RayTransformer(nn.Module):
    def __init__(self, bank: LatentBank, width: int, blocks: int, heads: int, use_dlm: bool, seed: int = 0):
        super().__init__()
        self.pos = nn.Linear(9, width)
        self.blocks = nn.ModuleList(RayBlock(bank, i, width, heads, use_dlm, seed=seed + i) for i in range(blocks))
        self.pool_norm = nn.LayerNorm(width)
        self.pool_q = nn.Linear(width, width)
        self.pool_k = nn.Linear(width, width)
        self.pool_v = ConditionedLinear(bank, "ray.pool.v", width, width, use_dlm, seed=seed + 100)
        self.head = nn.Sequential(nn.Linear(width, width), nn.ReLU(), nn.Linear(width, 3))
        self.width = width

    def forward(self, point_features, depths, near, far, cond: Conditioning, return_all=False):
        """point_features R x K x W, depths R x K (ray distance) -> RenderOutput."""
        if point_features.shape[1] < 2:
            raise ValueError("ray transformer needs K >= 2 samples")
        t_norm = (depths - near[:, None]) / (far - near)[:, None]
        x = point_features + self.pos(depth_encoding(t_norm))
        all_attn = []
        for block in self.blocks:
            x, attn = block(x, cond)
            all_attn.append(attn)
        xn = self.pool_norm(x)
        q = self.pool_q(xn.mean(1))  # R x W
        k = self.pool_k(xn)
        logits = (k @ q[..., None]).squeeze(-1) / math.sqrt(self.width)
        weights = torch.softmax(logits, dim=-1)  # R x K
        pooled = (weights[..., None] * self.pool_v(xn, cond)).sum(1)
        color = torch.sigmoid(self.head(pooled))
        depth = (weights * depths).sum(-1)
        out = RenderOutput(color, depth, weights)
        if return_all:
            return out, all_attn
        return out
