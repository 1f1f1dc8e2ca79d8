"""Trans-spatial perception (TSP) attention.

Four heads share one input: three inter-layer heads that treat every slice
along height, width or depth as a token (shared spatial query/key
projections, one value projection per axis), and one channel head whose
tokens are feature channels.  Each head's output is reduced to a quarter of
the channels; the four quarters are concatenated and fused by a 3x3x3 and a
1x1x1 conv block.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import ConvBlock, LinearProjection, Module
from .tensor import ConfigError, ShapeError, Tensor, active_tape

AXES = ("height", "width", "depth")
_PERM = {0: (0, 1, 2, 3), 1: (1, 0, 2, 3), 2: (2, 0, 1, 3)}


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        return AXES.index(axis)
    return int(axis)


def _layer_tokens(t: Tensor, ax: int) -> Tensor:
    """(H, W, D, C) -> (L, rest*C): one row per slice along ``ax``."""
    p = ops.permute(t, _PERM[ax]) if ax else t
    return ops.reshape(p, (t.shape[ax], -1))


def _from_layer_tokens(rows: Tensor, ax: int, shape) -> Tensor:
    perm = _PERM[ax]
    p = ops.reshape(rows, tuple(shape[i] for i in perm))
    return ops.permute(p, tuple(np.argsort(perm))) if ax else p


def _attend_rows(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Row-token attention: A = softmax(q k^T / sqrt(d)) row-wise, out = A v."""
    d = q.shape[1]
    scores = ops.div(ops.matmul(q, ops.transpose(k)), math.sqrt(d))
    a = ops.softmax(scores, axis=-1)
    return ops.matmul(a, v), a


def spatial_head(q: Tensor, k: Tensor, v: Tensor, axis, return_attention: bool = False):
    """Inter-layer attention along one spatial axis.

    Tokens are the L slices along ``axis``; each is a vector of length
    ``rest * C``.  The L x L attention matrix is row-stochastic and each
    output slice is the attention-weighted sum of value slices.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"spatial_head: q/k/v shapes {q.shape}, {k.shape}, {v.shape} must match (H, W, D, C)")
    ax = _axis_index(axis)
    out, a = _attend_rows(_layer_tokens(q, ax), _layer_tokens(k, ax), _layer_tokens(v, ax))
    out = _from_layer_tokens(out, ax, q.shape)
    return (out, a) if return_attention else out


def channel_head(q: Tensor, k: Tensor, v: Tensor, return_attention: bool = False):
    """Channel attention: tokens are the C channels, each a length-HWD vector."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"channel_head: q/k/v shapes {q.shape}, {k.shape}, {v.shape} must match (H, W, D, C)")
    c = q.shape[-1]

    def tokens(t):
        return ops.transpose(ops.reshape(t, (-1, c)))

    out, a = _attend_rows(tokens(q), tokens(k), tokens(v))
    out = ops.reshape(ops.transpose(out), q.shape)
    return (out, a) if return_attention else out


@dataclass
class AttentionParts:
    spatial: Tensor  # X_L, 3C/4 channels
    channel: Tensor  # X_C, C/4 channels
    attention: dict[str, Tensor] = field(default_factory=dict)
    fused: Tensor | None = None


class FourHeadAttention(Module):
    """Projections, heads, quarter reductions and conv fusion.

    Queries come from one feature map and keys/values from another; TSP
    passes the same map twice, BSCF passes the up- and down-path maps.
    """

    def __init__(self, c: int, rng: np.random.Generator, dtype=np.float32, parallel: bool = False):
        if c % 4:
            raise ConfigError(f"attention width must be divisible by 4, got {c}")
        self.c = c
        self.parallel = parallel
        mk = lambda: LinearProjection(c, c, rng, dtype=dtype)  # noqa: E731
        self.q_s, self.k_s = mk(), mk()
        self.v_h, self.v_w, self.v_d = mk(), mk(), mk()
        self.q_c, self.k_c, self.v_c = mk(), mk(), mk()
        red = lambda: LinearProjection(c, c // 4, rng, dtype=dtype)  # noqa: E731
        self.reduce_h, self.reduce_w, self.reduce_d = red(), red(), red()
        self.reduce_c = red()
        self.conv3 = ConvBlock(c, c, 3, rng, dtype=dtype)
        self.conv1 = ConvBlock(c, c, 1, rng, dtype=dtype)

    def attend(self, xq: Tensor, xkv: Tensor) -> AttentionParts:
        if xq.shape != xkv.shape:
            raise ShapeError(f"query map {xq.shape} and key/value map {xkv.shape} differ")
        if xq.shape[-1] != self.c:
            raise ShapeError(f"attention expects {self.c} channels, got {xq.shape[-1]}")
        qs, ks = self.q_s(xq), self.k_s(xkv)
        values = (self.v_h(xkv), self.v_w(xkv), self.v_d(xkv))
        qc, kc, vc = self.q_c(xq), self.k_c(xkv), self.v_c(xkv)
        jobs = [lambda i=i: spatial_head(qs, ks, values[i], i, return_attention=True) for i in range(3)]
        jobs.append(lambda: channel_head(qc, kc, vc, return_attention=True))
        if self.parallel and active_tape() is None:
            with ThreadPoolExecutor(max_workers=4) as pool:
                results = list(pool.map(lambda f: f(), jobs))
        else:
            results = [f() for f in jobs]
        reducers = (self.reduce_h, self.reduce_w, self.reduce_d)
        x_l = ops.concat([r(out) for r, (out, _) in zip(reducers, results[:3])], axis=-1)
        x_c = self.reduce_c(results[3][0])
        attn = {name: a for name, (_, a) in zip(AXES + ("channel",), results)}
        return AttentionParts(x_l, x_c, attn)

    def fuse(self, parts: AttentionParts) -> Tensor:
        parts.fused = self.conv1(self.conv3(ops.concat([parts.spatial, parts.channel], axis=-1)))
        return parts.fused

    def flops(self, shape) -> int:
        h, w, d, c = shape
        v = h * w * d
        proj = 8 * v * c * c
        heads = sum(2 * n * v * c for n in (h, w, d)) + 2 * c * c * v
        reduce = 4 * v * c * (c // 4)
        return proj + heads + reduce + self.conv3.flops(shape) + self.conv1.flops(shape)


class TSPBlock(Module):
    """Self-attention TSP block with an optional residual around it."""

    def __init__(self, c: int, rng: np.random.Generator, residual: bool = True, dtype=np.float32,
                 parallel: bool = False):
        self.residual = residual
        self.attn = FourHeadAttention(c, rng, dtype=dtype, parallel=parallel)

    @property
    def c(self) -> int:
        return self.attn.c

    def forward(self, x: Tensor, return_parts: bool = False):
        parts = self.attn.attend(x, x)
        out = self.attn.fuse(parts)
        if self.residual:
            out = ops.add(x, out)
        return (out, parts) if return_parts else out

    def flops(self, shape) -> int:
        return self.attn.flops(shape)


def tsp_forward(p: TSPBlock, x: Tensor) -> Tensor:
    return p(x)
