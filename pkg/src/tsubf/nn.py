"""Parameter containers and the convolutional building blocks of the network.

All feature maps are single-sample, channels-last ``(H, W, D, C)`` tensors.
Every block reports its multiply-accumulate count analytically through
``flops(shape)`` where ``shape`` is the block's input shape.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import ConfigError, ShapeError, Tensor

LEAKY_SLOPE = 0.01


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


class Module:
    """Minimal parameter container.

    Parameters are the tracked :class:`Tensor` attributes; submodules are
    :class:`Module` attributes or lists of them.  A submodule reachable under
    several names (a shared block) is listed once, under its first name.
    """

    def named_parameters(self, prefix: str = "", _seen=None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def flops(self, shape) -> int:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class LinearProjection(Module):
    """Per-voxel affine map over the channel axis."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        self.c_in, self.c_out = c_in, c_out
        self.weight = _uniform(rng, (c_out, c_in), c_in, dtype)
        self.bias = _zeros((c_out,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return project(self, x)

    def flops(self, shape) -> int:
        return int(np.prod(shape[:-1])) * self.c_in * self.c_out


def project(p: LinearProjection, x: Tensor) -> Tensor:
    """``y[h, w, d, :] = W @ x[h, w, d, :] + b`` at every voxel."""
    if x.shape[-1] != p.c_in:
        raise ShapeError(f"project: input has {x.shape[-1]} channels, projection expects {p.c_in}")
    spatial = x.shape[:-1]
    flat = ops.reshape(x, (-1, p.c_in))
    y = ops.matmul(flat, ops.transpose(p.weight))
    if p.bias is not None:
        y = ops.add(y, ops.broadcast_to(p.bias, y.shape))
    return ops.reshape(y, spatial + (p.c_out,))


class ConvBlock(Module):
    """Convolution followed by instance normalization and a leaky rectifier.

    With ``norm=False`` the convolution carries a bias instead and, with
    ``act=False``, the block is a plain convolution.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 norm: bool = True, act: bool = True, dtype=np.float32):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.act = act
        self.weight = _uniform(rng, (c_out, c_in, kernel, kernel, kernel), c_in * kernel**3, dtype)
        if norm:
            self.gamma = _ones((c_out,), dtype)
            self.beta = _zeros((c_out,), dtype)
            self.bias = None
        else:
            self.gamma = self.beta = None
            self.bias = _zeros((c_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"ConvBlock: input has {x.shape[-1]} channels, block expects {self.c_in}")
        y = ops.conv3d(x, self.weight, self.bias, stride=self.stride, padding="same")
        if self.gamma is not None:
            y = ops.instance_norm(y, self.gamma, self.beta)
        if self.act:
            y = ops.leaky_relu(y, LEAKY_SLOPE)
        return y

    def out_shape(self, shape):
        return tuple(-(-n // self.stride) for n in shape[:3]) + (self.c_out,)

    def flops(self, shape) -> int:
        out = self.out_shape(shape)
        return int(np.prod(out[:3])) * self.c_out * self.c_in * self.kernel**3


class PatchEmbedding(Module):
    """Two stride-2 3x3x3 conv blocks: a 4x spatial reduction to ``c1`` channels."""

    def __init__(self, c_img: int, c1: int, rng: np.random.Generator, dtype=np.float32):
        self.c_img, self.c1 = c_img, c1
        self.conv1 = ConvBlock(c_img, c1, 3, rng, stride=2, dtype=dtype)
        self.conv2 = ConvBlock(c1, c1, 3, rng, stride=2, dtype=dtype)

    def forward(self, volume: Tensor) -> Tensor:
        return self.forward_with_half(volume)[1]

    def forward_with_half(self, volume: Tensor) -> tuple[Tensor, Tensor]:
        """Return both the half-resolution and the quarter-resolution features."""
        bad = [n for n in volume.shape[:3] if n % 4]
        if bad:
            raise ConfigError(f"patch embedding needs spatial dims divisible by 4, got {volume.shape[:3]}; "
                              "pad the volume to a multiple of 4")
        half = self.conv1(volume)
        return half, self.conv2(half)

    def flops(self, shape) -> int:
        return self.conv1.flops(shape) + self.conv2.flops(self.conv1.out_shape(shape))


def embed_patches(pe: PatchEmbedding, volume: Tensor) -> Tensor:
    return pe(volume)


class DownsampleStage(Module):
    """Stride-2 3x3x3 conv block halving every spatial axis."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.c_in, self.c_out = c_in, c_out
        self.conv = ConvBlock(c_in, c_out, 3, rng, stride=2, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if any(n % 2 for n in x.shape[:3]):
            raise ConfigError(f"downsampling needs even spatial dims, got {x.shape[:3]}")
        return self.conv(x)

    def flops(self, shape) -> int:
        return self.conv.flops(shape)


class UpsampleStage(Module):
    """Stride-2 transposed conv (kernel 2) doubling every spatial axis, then norm + activation."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.c_in, self.c_out = c_in, c_out
        self.weight = _uniform(rng, (c_in, c_out, 2, 2, 2), c_in * 8, dtype)
        self.gamma = _ones((c_out,), dtype)
        self.beta = _zeros((c_out,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"upsample: input has {x.shape[-1]} channels, stage expects {self.c_in}")
        y = ops.conv_transpose3d(x, self.weight, stride=2)
        return ops.leaky_relu(ops.instance_norm(y, self.gamma, self.beta), LEAKY_SLOPE)

    def flops(self, shape) -> int:
        return int(np.prod(shape[:3])) * self.c_in * self.c_out * 8


def downsample_stage(stage: DownsampleStage, x: Tensor) -> Tensor:
    return stage(x)


def upsample_stage(stage: UpsampleStage, x: Tensor) -> Tensor:
    return stage(x)
