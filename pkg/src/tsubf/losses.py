"""Training objective: soft dice + cross-entropy plus a 3D Sobel smoothness term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

# Reference 3x3x3 kernel constants, nested [z][y][x].
SOBEL_X_PRINTED = np.array([
    [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],
    [[-2, 0, 2], [-4, 0, 4], [-2, 0, 2]],
    [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],
])
SOBEL_Y_PRINTED = np.array([
    [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],
    [[-2, -4, -2], [0, 0, 0], [2, 4, 2]],
    [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],
])
SOBEL_Z_PRINTED = np.array([
    [[1, 2, 1], [2, 4, 2], [1, 2, 1]],
    [[0, 0, 0], [0, 0, 0], [0, 0, 0]],
    [[-1, -2, -1], [-2, -4, -2], [-1, -2, -1]],
])


class DomainError(ValueError):
    """Input values outside the domain of the loss."""


@dataclass(frozen=True)
class SobelKernels:
    """Kernels re-indexed to volume order ``[x, y, z]`` (axes 0, 1, 2).

    Convolution here is cross-correlation, so with this indexing H_x and H_y
    respond +32 to a unit ramp along their axis.  H_z in its reference form decreases
    along z and responds -32; the absolute-mean aggregation is unaffected and
    the signed mode simply sees the flipped sign.
    """

    hx: np.ndarray
    hy: np.ndarray
    hz: np.ndarray

    @classmethod
    def default(cls) -> "SobelKernels":
        return cls(*(k.transpose(2, 1, 0).copy() for k in (SOBEL_X_PRINTED, SOBEL_Y_PRINTED, SOBEL_Z_PRINTED)))

    def stacked(self, dtype) -> Tensor:
        """Conv weight of shape (3, 1, 3, 3, 3)."""
        return Tensor(np.stack([self.hx, self.hy, self.hz])[:, None], dtype=dtype)


SOBEL = SobelKernels.default()


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    aggregation: str = "absolute-mean"  # or "signed-mean"
    class_mask: tuple[bool, ...] | None = None  # None: every class enters the Sobel sum
    eps: float = 1e-5
    literal_dice_ce: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.eps <= 0:
            raise ValueError(f"epsilon must be positive, got {self.eps}")
        if self.aggregation not in ("absolute-mean", "signed-mean"):
            raise ValueError(f"unknown aggregation mode {self.aggregation!r}")


def _as_const(y, like: Tensor) -> Tensor:
    return Tensor(y.data if isinstance(y, Tensor) else y, dtype=like.dtype)


def dice_ce_loss(y, p: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Soft dice loss plus mean cross-entropy over ``V x l`` voxel/class rows.

    ``1 - mean_i 2 sum(Y P) / (sum(Y^2) + sum(P^2) + eps) - mean_v sum_i Y log(P + eps)``.
    With ``cfg.literal_dice_ce`` the uncorrected form
    ``1 - sum_i (dice_i + sum_v Y log P)`` is returned instead (comparison only;
    it rewards high cross-entropy).
    """
    y = _as_const(y, p)
    if y.shape != p.shape or p.ndim != 2:
        raise ShapeError(f"dice_ce_loss: labels {y.shape} and probabilities {p.shape} must both be (V, l)")
    if np.any(p.data < 0):
        raise DomainError("probabilities contain negative values")
    num = ops.mul(ops.sum(ops.mul(y, p), axis=0), 2.0)
    den = ops.add(ops.add(ops.sum(ops.mul(y, y), axis=0), ops.sum(ops.mul(p, p), axis=0)), cfg.eps)
    dice = ops.div(num, den)
    ylogp = ops.sum(ops.mul(y, ops.log(ops.add(p, cfg.eps))), axis=0)
    if cfg.literal_dice_ce:
        return ops.sub(1.0, ops.sum(ops.add(dice, ylogp)))
    dice_term = ops.sub(1.0, ops.mean(dice))
    ce = ops.div(ops.sum(ylogp), -float(p.shape[0]))
    return ops.add(dice_term, ce)


def _sobel_means(p_class: Tensor, cfg: LossConfig) -> Tensor:
    if p_class.ndim != 3 or min(p_class.shape) < 3:
        raise DomainError(f"Sobel needs a 3D volume at least 3 voxels per axis, got {p_class.shape}")
    vol = ops.reshape(p_class, p_class.shape + (1,))
    resp = ops.conv3d(vol, SOBEL.stacked(p_class.dtype), padding="valid")
    if cfg.aggregation == "absolute-mean":
        resp = ops.absolute(resp)
    return ops.mean(resp, axis=(0, 1, 2))


def sobel_gradients(p_class: Tensor, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """Aggregate valid-region Sobel responses of one class map into (G_x, G_y, G_z)."""
    g = _sobel_means(p_class, cfg)
    return g[0], g[1], g[2]


def _class_norm(p_class: Tensor, cfg: LossConfig) -> Tensor:
    g = _sobel_means(p_class, cfg)
    return ops.sqrt(ops.sum(ops.mul(g, g)))


def sobel_loss(p: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """``lam * sum_i sqrt(G_x^2 + G_y^2 + G_z^2)`` over the included classes of ``(H, W, D, l)``."""
    if p.ndim != 4:
        raise ShapeError(f"sobel_loss expects (H, W, D, l), got {p.shape}")
    if min(p.shape[:3]) < 3:
        raise DomainError(f"Sobel needs at least 3 voxels per axis, got {p.shape[:3]}")
    if cfg.lam == 0:
        return Tensor(0.0, dtype=p.dtype)
    mask = cfg.class_mask or (True,) * p.shape[-1]
    if len(mask) != p.shape[-1]:
        raise ShapeError(f"class mask has {len(mask)} entries for {p.shape[-1]} classes")
    terms = [_class_norm(p[..., i], cfg) for i, keep in enumerate(mask) if keep]
    if not terms:
        return Tensor(0.0, dtype=p.dtype)
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.mul(total, float(cfg.lam))


def total_loss(y, p: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Dice + CE over flattened voxels plus the Sobel term on ``(H, W, D, l)`` probabilities."""
    parts = loss_components(y, p, cfg)
    return parts[0]


def loss_components(y, p: Tensor, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor, Tensor]:
    """(total, dice+CE, Sobel) for a channels-last probability volume."""
    yv = y.data if isinstance(y, Tensor) else np.asarray(y)
    if yv.shape != p.shape:
        raise ShapeError(f"labels {yv.shape} and probabilities {p.shape} differ")
    l = p.shape[-1]
    base = dice_ce_loss(yv.reshape(-1, l), ops.reshape(p, (-1, l)), cfg)
    if cfg.lam == 0:
        return base, base, Tensor(0.0, dtype=p.dtype)
    sob = sobel_loss(p, cfg)
    return ops.add(base, sob), base, sob


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DomainError(f"labels outside [0, {num_classes})")
    return np.eye(num_classes, dtype=dtype)[labels]
