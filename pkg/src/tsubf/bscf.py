"""Bi-directional sample collaborated fusion (BSCF).

Both skip inputs pass through one shared 3x3x3 conv block, then a per-branch
1x1x1 expand (C -> 2C) and contract (2C -> C) pair.  The stemmed up-path map
supplies the queries and the stemmed down-path map the keys and values of a
four-head TSP-style cross-attention.
"""
from __future__ import annotations

import numpy as np

from .attention import AttentionParts, FourHeadAttention
from .nn import ConvBlock, Module
from .tensor import ConfigError, ShapeError, Tensor


class BSCFBlock(Module):
    def __init__(self, c: int, rng: np.random.Generator, dtype=np.float32, parallel: bool = False):
        if c % 4:
            raise ConfigError(f"BSCF width must be divisible by 4, got {c}")
        self.c = c
        self.conv3_s = ConvBlock(c, c, 3, rng, dtype=dtype)
        self.up_inner = ConvBlock(c, 2 * c, 1, rng, dtype=dtype)
        self.up_outer = ConvBlock(2 * c, c, 1, rng, dtype=dtype)
        self.down_inner = ConvBlock(c, 2 * c, 1, rng, dtype=dtype)
        self.down_outer = ConvBlock(2 * c, c, 1, rng, dtype=dtype)
        self.attn = FourHeadAttention(c, rng, dtype=dtype, parallel=parallel)

    def branch_stem(self, x: Tensor, branch: str) -> Tensor:
        if x.shape[-1] != self.c:
            raise ShapeError(f"BSCF stem expects {self.c} channels, got {x.shape[-1]}")
        if branch == "up":
            inner, outer = self.up_inner, self.up_outer
        elif branch == "down":
            inner, outer = self.down_inner, self.down_outer
        else:
            raise ValueError(f"branch must be 'up' or 'down', got {branch!r}")
        return outer(inner(self.conv3_s(x)))

    def forward(self, x_u: Tensor, x_d: Tensor, return_parts: bool = False):
        if x_u.shape != x_d.shape:
            raise ShapeError(f"BSCF inputs differ: up {x_u.shape} vs down {x_d.shape}")
        parts = self.attn.attend(self.branch_stem(x_u, "up"), self.branch_stem(x_d, "down"))
        out = self.attn.fuse(parts)
        return (out, parts) if return_parts else out

    def flops(self, shape) -> int:
        h, w, d, c = shape
        mid = (h, w, d, 2 * c)
        stem = 2 * self.conv3_s.flops(shape)
        stem += self.up_inner.flops(shape) + self.up_outer.flops(mid)
        stem += self.down_inner.flops(shape) + self.down_outer.flops(mid)
        return stem + self.attn.flops(shape)


def branch_stem(p: BSCFBlock, x: Tensor, branch: str) -> Tensor:
    return p.branch_stem(x, branch)


def bscf_forward(p: BSCFBlock, x_u: Tensor, x_d: Tensor) -> Tensor:
    return p(x_u, x_d)


__all__ = ["AttentionParts", "BSCFBlock", "branch_stem", "bscf_forward"]
