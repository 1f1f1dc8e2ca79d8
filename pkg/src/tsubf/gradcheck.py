"""Central finite-difference checks of the analytic gradients, in double precision.

The relative error of an analytic gradient ``a`` against its numerical
estimate ``n`` is ``max|a - n| / max(max|a|, max|n|)`` over the checked
entries.  Perturbed evaluations reuse the branch pattern of the piecewise
linear ops from the unperturbed pass (see :class:`~tsubf.ops.KinkPattern`).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import TSPBlock
from .bscf import BSCFBlock
from .losses import LossConfig, dice_ce_loss, one_hot, sobel_loss, total_loss
from .network import ModelConfig, TSUBFNet
from .tensor import Tape, Tensor

BLOCK_TOL = 1e-6
NETWORK_TOL = 1e-5
BLOCKS = ("tsp", "bscf", "losses", "network")

# Test hook: when set, analytic gradients are scaled by this factor before comparison.
_FAULT_SCALE: float | None = None


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. entries of ``arr`` (perturbed in place, then restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def check(name: str, loss_fn: Callable[[], Tensor], wrt: list[Tensor], tol: float, h: float = 1e-5,
          sample: int | None = None, rng: np.random.Generator | None = None) -> CheckResult:
    """Compare tape gradients of ``loss_fn`` against central differences for every tensor in ``wrt``."""
    t0 = time.perf_counter()
    for t in wrt:
        t.grad = None
    kinks = ops.KinkPattern()
    with Tape() as tape, kinks:
        loss = loss_fn()
    tape.backward(loss)
    analytic, numeric = [], []

    def value() -> float:
        with kinks:
            return loss_fn().item()

    for t in wrt:
        g = t.grad.reshape(-1)
        idx = None
        if sample is not None and t.size > sample:
            idx = sorted((rng or np.random.default_rng(0)).choice(t.size, size=sample, replace=False))
            g = g[idx]
        if _FAULT_SCALE is not None:
            g = g * _FAULT_SCALE
        analytic.append(g)
        numeric.append(numeric_grad(value, t.data, h, idx))
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    return CheckResult(name, max_relative_error(a, n), tol, a.size, time.perf_counter() - t0)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(weights)))


def check_tsp(seed: int = 0, shape=(4, 4, 4, 8)) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    block = TSPBlock(shape[-1], rng, dtype=np.float64)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    w = rng.normal(size=shape)
    params = [block.attn.q_s.weight, block.attn.k_s.weight, block.attn.v_d.weight, block.attn.k_c.weight,
              block.attn.conv3.weight]
    return [
        check("tsp: d sum(out)/dx", lambda: ops.sum(block(x)), [x], BLOCK_TOL),
        check("tsp: d <w,out>/d(x, params)", lambda: _weighted_sum(block(x), w), [x] + params, BLOCK_TOL,
              sample=40, rng=rng),
    ]


def check_bscf(seed: int = 0, shape=(4, 4, 4, 8)) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    block = BSCFBlock(shape[-1], rng, dtype=np.float64)
    xu = Tensor(rng.normal(size=shape), requires_grad=True)
    xd = Tensor(rng.normal(size=shape), requires_grad=True)
    w = rng.normal(size=shape)
    params = [block.conv3_s.weight, block.up_inner.weight, block.down_outer.weight, block.attn.q_c.weight,
              block.attn.v_h.weight]
    return [
        check("bscf: d sum(out)/d(x_u, x_d)", lambda: ops.sum(block(xu, xd)), [xu, xd], BLOCK_TOL),
        check("bscf: d <w,out>/d(x_u, x_d, params)", lambda: _weighted_sum(block(xu, xd), w),
              [xu, xd] + params, BLOCK_TOL, sample=40, rng=rng),
    ]


def check_losses(seed: int = 0, shape=(6, 6, 6, 2)) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, shape[-1], size=shape[:3])
    y = one_hot(labels, shape[-1], dtype=np.float64)
    z = Tensor(rng.normal(size=shape), requires_grad=True)
    cfg = LossConfig(lam=0.1)
    probs = lambda: ops.softmax(z, axis=-1)  # noqa: E731
    return [
        check("dice+ce", lambda: dice_ce_loss(y.reshape(-1, shape[-1]), ops.reshape(probs(), (-1, shape[-1])), cfg),
              [z], BLOCK_TOL),
        check("sobel (absolute-mean)", lambda: sobel_loss(probs(), cfg), [z], BLOCK_TOL),
        check("sobel (signed-mean)", lambda: sobel_loss(probs(), LossConfig(lam=0.1, aggregation="signed-mean")),
              [z], BLOCK_TOL),
        check("total", lambda: total_loss(y, probs(), cfg), [z], BLOCK_TOL),
    ]


def check_network(seed: int = 0, size: int = 64, per_param: int = 2, n_params: int = 16) -> list[CheckResult]:
    cfg = ModelConfig(channels=(4, 8, 16, 32), patch_size=(size, size, size), num_classes=2, dtype="float64",
                      seed=seed)
    model = TSUBFNet(cfg)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((size, size, size, 1)))
    labels = (np.indices((size,) * 3) - size / 2 + 0.5) ** 2
    y = one_hot(labels.sum(axis=0) < (size / 4) ** 2, 2, dtype=np.float64)
    loss_cfg = LossConfig(lam=0.1)
    named = list(model.named_parameters())
    picks = [named[i][1] for i in sorted(rng.choice(len(named), size=min(n_params, len(named)), replace=False))]
    return [check("network end-to-end", lambda: total_loss(y, model(x), loss_cfg), picks, NETWORK_TOL,
                  sample=per_param, rng=rng)]


RUNNERS = {"tsp": check_tsp, "bscf": check_bscf, "losses": check_losses, "network": check_network}


def run(blocks=BLOCKS, seed: int = 0) -> list[CheckResult]:
    results = []
    for b in blocks:
        results.extend(RUNNERS[b](seed))
    return results
