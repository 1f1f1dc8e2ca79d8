"""Synthetic ellipsoid volumes with exact analytic labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import UsageError
from .volumes import VolumeSample


@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    radii: tuple[float, float, float] | None = None  # drawn from radius_range when None
    center: tuple[float, float, float] | None = None  # drawn so the ellipsoid fits when None
    radius_range: tuple[float, float] | None = None  # (10/64, 18/64) of the smallest extent when None
    blur_sigma: float = 1.0
    noise_std: float = 20.0  # HU
    background_hu: float = -600.0
    foreground_hu: float = 200.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    """Voxel centers with ``sum(((x - c) / r)^2) <= 1``."""
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return q <= 1.0


def make_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> VolumeSample:
    """Render one ellipsoid in HU with optional boundary blur and Gaussian noise."""
    rng = np.random.default_rng(seed)
    shape = tuple(int(n) for n in spec.shape)
    if spec.radius_range is None:
        lo, hi = 10 / 64 * min(shape), 18 / 64 * min(shape)
    else:
        lo, hi = spec.radius_range
    radii = spec.radii if spec.radii is not None else tuple(rng.uniform(lo, hi, size=3))
    if min(radii) <= 0 or any(2 * r > n for r, n in zip(radii, shape)):
        raise UsageError(f"degenerate radii {radii} for volume {shape}")
    if spec.center is not None:
        center = spec.center
    else:
        center = tuple(rng.uniform(r, n - 1 - r) for r, n in zip(radii, shape))
    label = ellipsoid_mask(shape, center, radii)
    soft = label.astype(np.float64)
    if spec.blur_sigma > 0:
        soft = gaussian_filter(soft, spec.blur_sigma, mode="nearest")
    image = spec.background_hu + (spec.foreground_hu - spec.background_hu) * soft
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=shape)
    return VolumeSample(image.astype(np.float32), label.astype(np.int64), spec.spacing,
                        source=f"synthetic-{seed}", units="hu",
                        meta={"center": tuple(map(float, center)), "radii": tuple(map(float, radii))})
