"""Differentiable operations on :class:`~tsubf.tensor.Tensor`.

Each op computes its forward value with numpy and registers a vector-Jacobian
product on the active tape.  Volumes are channels-last: ``(H, W, D, C)``.
"""
from __future__ import annotations

import itertools
import threading
from numbers import Number
from typing import Sequence

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor, make_output


def _is_scalar(x) -> bool:
    return isinstance(x, Number) or (isinstance(x, np.ndarray) and x.ndim == 0)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if _is_scalar(b):
        return make_output("add_scalar", a.data + b, [a], lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    _check_same("add", a, b)
    return make_output("add", a.data + b.data, [a, b], lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return make_output("sub_scalar", a.data - b, [a], lambda g: (g,))
    if _is_scalar(a):
        return make_output("rsub_scalar", a - b.data, [b], lambda g: (-g,))
    _check_same("sub", a, b)
    return make_output("sub", a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return make_output("mul_scalar", a.data * b, [a], lambda g: (g * b,))
    if _is_scalar(a):
        return mul(b, a)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return make_output("mul", ad * bd, [a, b], lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return make_output("div_scalar", a.data / b, [a], lambda g: (g / b,))
    if _is_scalar(a):
        bd = b.data
        out = a / bd
        return make_output("rdiv_scalar", out, [b], lambda g: (-g * out / bd,))
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    return make_output("div", ad / bd, [a, b], lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return make_output("neg", -a.data, [a], lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_output("pow", ad**p, [a], lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_output("exp", out, [a], lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_output("log", np.log(ad), [a], lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    """Square root whose derivative at exactly zero is taken as zero."""
    out = np.sqrt(a.data)

    def vjp(g):
        d = np.zeros_like(out)
        pos = out > 0
        d[pos] = 0.5 / out[pos]
        return (g * d,)

    return make_output("sqrt", out, [a], vjp)


class KinkPattern:
    """Pins the branch taken by every piecewise-linear op.

    The first ``with`` block records the branches (signs of ``abs``, the
    positive mask of ``leaky_relu``); later blocks replay them, so the
    function stays linear across those kinks.  Used by finite-difference
    checks, where a perturbation crossing a kink would bias the estimate.
    """

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self.replaying = False
        self._pos = 0

    def __enter__(self):
        _kinks.pattern = self
        self._pos = 0
        return self

    def __exit__(self, *exc):
        _kinks.pattern = None
        self.replaying = True

    def branch(self, mask: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.masks.append(mask)
            return mask
        stored = self.masks[self._pos]
        self._pos += 1
        return stored


_kinks = threading.local()


def _branch(mask: np.ndarray) -> np.ndarray:
    pattern = getattr(_kinks, "pattern", None)
    return mask if pattern is None else pattern.branch(mask)


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    sign = _branch(np.sign(ad))
    return make_output("abs", ad * sign, [a], lambda g: (g * sign,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    ad = a.data
    pos = _branch(ad > 0)
    out = np.where(pos, ad, ad * slope)
    return make_output("leaky_relu", out, [a], lambda g: (np.where(pos, g, g * slope),))


# ------------------------------------------------------------------ reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output("sum", np.asarray(out, dtype=a.dtype), [a], vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


# -------------------------------------------------------------------- shaping

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return make_output("reshape", out, [a], lambda g: (g.reshape(old),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_output("permute", out, [a], lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose(a: Tensor) -> Tensor:
    return permute(a, tuple(reversed(range(a.ndim))))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: {tuple(ref)} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_output("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def slice(a: Tensor, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing."""
    out = np.ascontiguousarray(a.data[index])
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_output("slice", out, [a], vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules); the only way shapes get aligned."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    src = a.shape
    lead = len(shape) - len(src)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        ax = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if ax:
            g = g.sum(axis=ax, keepdims=True)
        return (g.reshape(src),)

    return make_output("broadcast_to", out, [a], vjp)


# -------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_output("matmul", ad @ bd, [a, b], lambda g: (g @ bd.T, ad.T @ g))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", out, [a], vjp)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all spatial positions of one sample."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine shapes {gamma.shape}/{beta.shape} for {c} channels")
    axes = tuple(range(x.ndim - 1))
    n = x.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def vjp(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_output("instance_norm", xhat * gd + beta.data, [x, gamma, beta], vjp)


# ---------------------------------------------------------------- convolution

def _same_pads(n: int, k: int, s: int) -> tuple[int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def conv_output_extent(n: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-n // stride)
    if padding != "valid":
        raise ConfigError(f"padding must be 'valid' or 'same', got {padding!r}")
    if n < k or (n - k) % stride:
        raise ConfigError(f"extent {n} with kernel {k}, stride {stride} gives a non-integral output")
    return (n - k) // stride + 1


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """3D cross-correlation (kernel not flipped).

    ``x`` is ``(H, W, D, C_in)``; ``w`` is ``(C_out, C_in, k, k, k)`` with k odd.
    ``padding='same'`` zero-pads to an output extent of ``ceil(n / stride)``
    (any odd remainder goes after); ``'valid'`` uses no padding and requires
    an integral output extent.
    """
    if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[3]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ConfigError(f"conv3d: kernel must be cubic with odd size, got {w.shape[2:]}")
    if stride < 1:
        raise ConfigError("conv3d: stride must be >= 1")
    outs = [conv_output_extent(n, k, stride, padding) for n in x.shape[:3]]
    pads = [_same_pads(n, k, stride) if padding == "same" else (0, 0) for n in x.shape[:3]]
    xd = x.data
    if any(p != (0, 0) for p in pads):
        xd = np.pad(xd, pads + [(0, 0)])
    ho, wo, do = outs
    npos = ho * wo * do
    wmat = w.data.reshape(cout, cin * k**3)
    if k == 1:
        cols = np.ascontiguousarray(xd[::stride, ::stride, ::stride][:ho, :wo, :do]).reshape(npos, cin)
    else:
        cols = np.empty((ho, wo, do, cin, k, k, k), dtype=xd.dtype)
        for a, b, c in itertools.product(range(k), repeat=3):
            cols[..., a, b, c] = xd[a:a + stride * (ho - 1) + 1:stride,
                                    b:b + stride * (wo - 1) + 1:stride,
                                    c:c + stride * (do - 1) + 1:stride]
        cols = cols.reshape(npos, cin * k**3)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(ho, wo, do, cout)
    padded_shape = xd.shape

    def vjp(g):
        g2 = g.reshape(npos, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(ho, wo, do, cin, k, k, k)
        gx = np.zeros(padded_shape, dtype=g.dtype)
        for a, b, c in itertools.product(range(k), repeat=3):
            gx[a:a + stride * (ho - 1) + 1:stride,
               b:b + stride * (wo - 1) + 1:stride,
               c:c + stride * (do - 1) + 1:stride] += gcols[..., a, b, c]
        h, wd, d = x.shape[:3]
        gx = gx[pads[0][0]:pads[0][0] + h, pads[1][0]:pads[1][0] + wd, pads[2][0]:pads[2][0] + d]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = [x, w] if bias is None else [x, w, bias]
    return make_output("conv3d", out, inputs, vjp)


def conv_transpose3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed 3D convolution without output cropping.

    ``x`` is ``(H, W, D, C_in)``, ``w`` is ``(C_in, C_out, k, k, k)``; output
    extent is ``(n - 1) * stride + k`` per axis.
    """
    if x.ndim != 4 or w.ndim != 5 or w.shape[0] != x.shape[3]:
        raise ShapeError(f"conv_transpose3d: input {x.shape} incompatible with kernel {w.shape}")
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    h, wd, d = x.shape[:3]
    npos = h * wd * d
    wmat = w.data.reshape(cin, cout * k**3)
    xm = x.data.reshape(npos, cin)
    y = (xm @ wmat).reshape(h, wd, d, cout, k, k, k)
    oshape = tuple((n - 1) * stride + k for n in (h, wd, d))
    out = np.zeros(oshape + (cout,), dtype=y.dtype)
    for a, b, c in itertools.product(range(k), repeat=3):
        out[a:a + stride * (h - 1) + 1:stride,
            b:b + stride * (wd - 1) + 1:stride,
            c:c + stride * (d - 1) + 1:stride] += y[..., a, b, c]
    if bias is not None:
        out += bias.data

    def vjp(g):
        gy = np.empty((h, wd, d, cout, k, k, k), dtype=g.dtype)
        for a, b, c in itertools.product(range(k), repeat=3):
            gy[..., a, b, c] = g[a:a + stride * (h - 1) + 1:stride,
                                 b:b + stride * (wd - 1) + 1:stride,
                                 c:c + stride * (d - 1) + 1:stride]
        gy = gy.reshape(npos, cout * k**3)
        grads = [(gy @ wmat.T).reshape(x.shape), (xm.T @ gy).reshape(w.shape)]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return grads

    inputs = [x, w] if bias is None else [x, w, bias]
    return make_output("conv_transpose3d", out, inputs, vjp)


# ---------------------------------------------------------------- operators

def _rsub(a, b):
    return sub(b, a)


def _rdiv(a, b):
    return div(b, a)


Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__sub__ = sub
Tensor.__rsub__ = _rsub
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.__truediv__ = div
Tensor.__rtruediv__ = _rdiv
Tensor.__neg__ = neg
Tensor.__pow__ = power
Tensor.__matmul__ = matmul
Tensor.__getitem__ = slice
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
Tensor.permute = lambda self, *axes: permute(self, axes[0] if len(axes) == 1 and not isinstance(axes[0], int) else axes)
Tensor.sum = sum
Tensor.mean = mean
Tensor.T = property(transpose)
