"""Segmentation metrics: HD95, DSC, IoU and a Sobel smoothness score.

Every metric has a fast path and a brute-force oracle path (``oracle=True``)
that share no search code; they must agree exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .losses import LossConfig, sobel_loss
from .tensor import ShapeError, Tensor

REPORT_COLUMNS = ("volume_id", "class_id", "hd95", "iou", "dsc", "smoothness", "hd95_sentinel", "error")
REPORT_SCHEMA_VERSION = 1


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ShapeError(f"label volume must be 3D, got shape {self.labels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    def mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id


def _as_mask(v, class_id: int | None) -> np.ndarray:
    if isinstance(v, LabelVolume):
        return v.mask(1 if class_id is None else class_id)
    arr = np.asarray(v)
    return arr.astype(bool) if class_id is None else arr == class_id


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates ``(n, 3)`` of mask voxels with a 6-neighbour outside the mask.

    The volume border counts as outside.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~interior)


def surface_voxels_oracle(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    out = []
    for i, j, k in np.argwhere(m):
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + di, j + dj, k + dk
            inside = 0 <= a < m.shape[0] and 0 <= b < m.shape[1] and 0 <= c < m.shape[2]
            if not inside or not m[a, b, c]:
                out.append((i, j, k))
                break
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def _distance(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    # Both search paths evaluate distances with this exact expression.
    d = (a - b) * np.asarray(spacing, dtype=np.float64)
    return np.sqrt((d * d).sum(axis=-1))


def _nearest_fast(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    s = np.asarray(spacing, dtype=np.float64)
    tree = cKDTree(dst * s)
    k = min(8, len(dst))
    _, idx = tree.query(src * s, k=k)
    idx = np.asarray(idx).reshape(len(src), k)
    cand = _distance(src[:, None, :], dst[idx], spacing)
    return cand.min(axis=1)


def _nearest_oracle(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    out = np.empty(len(src))
    for i, p in enumerate(src):
        out[i] = _distance(p[None, :], dst, spacing).min()
    return out


def nearest_rank_95(distances: np.ndarray) -> float:
    """95th percentile by nearest rank: the ceil(0.95 n)-th smallest value."""
    n = len(distances)
    rank = (95 * n + 99) // 100
    return float(np.sort(distances)[rank - 1])


@dataclass
class HD95Result:
    value: float
    sentinel: bool = False


def hd95_details(y, p, class_id: int | None = None, spacing=None, oracle: bool = False,
                 units: str = "mm", literal_sum: bool = False) -> HD95Result:
    """Symmetric 95th-percentile surface distance.

    ``max(d95(S_y -> S_p), d95(S_p -> S_y))`` with ``literal_sum=True``
    returning the sum of the two directed percentiles instead.  Both surfaces
    empty gives 0; exactly one empty gives the volume diagonal and sets
    ``sentinel``.
    """
    my, mp = _as_mask(y, class_id), _as_mask(p, class_id)
    if my.shape != mp.shape:
        raise ShapeError(f"hd95: shapes {my.shape} and {mp.shape} differ")
    if spacing is None:
        spacing = y.spacing if isinstance(y, LabelVolume) else (1.0, 1.0, 1.0)
        if isinstance(y, LabelVolume) and isinstance(p, LabelVolume) and y.spacing != p.spacing:
            raise ValueError(f"hd95: spacings {y.spacing} and {p.spacing} differ")
    if units == "voxel":
        spacing = (1.0, 1.0, 1.0)
    elif units != "mm":
        raise ValueError(f"units must be 'mm' or 'voxel', got {units!r}")
    sy = surface_voxels_oracle(my) if oracle else surface_voxels(my)
    sp = surface_voxels_oracle(mp) if oracle else surface_voxels(mp)
    if len(sy) == 0 and len(sp) == 0:
        return HD95Result(0.0)
    if len(sy) == 0 or len(sp) == 0:
        diag = math.sqrt(sum((n * s) ** 2 for n, s in zip(my.shape, spacing)))
        return HD95Result(diag, sentinel=True)
    nearest = _nearest_oracle if oracle else _nearest_fast
    d_yp = nearest_rank_95(nearest(sy, sp, spacing))
    d_py = nearest_rank_95(nearest(sp, sy, spacing))
    return HD95Result(d_yp + d_py if literal_sum else max(d_yp, d_py))


def hd95(y, p, class_id: int | None = None, spacing=None, oracle: bool = False, units: str = "mm",
         literal_sum: bool = False) -> float:
    return hd95_details(y, p, class_id, spacing, oracle, units, literal_sum).value


def _counts(y, p, class_id, oracle: bool):
    my, mp = _as_mask(y, class_id), _as_mask(p, class_id)
    if my.shape != mp.shape:
        raise ShapeError(f"shapes {my.shape} and {mp.shape} differ")
    if not oracle:
        return int(np.count_nonzero(my & mp)), int(np.count_nonzero(my)), int(np.count_nonzero(mp))
    inter = ny = np_ = 0
    for a, b in zip(my.ravel().tolist(), mp.ravel().tolist()):
        ny += a
        np_ += b
        inter += a and b
    return inter, ny, np_


def dsc(y, p, class_id: int | None = None, oracle: bool = False) -> float:
    """``2 |Y & P| / (|Y| + |P|)``; 1 when both are empty."""
    inter, ny, np_ = _counts(y, p, class_id, oracle)
    return 1.0 if ny + np_ == 0 else 2.0 * inter / (ny + np_)


def iou(y, p, class_id: int | None = None, oracle: bool = False) -> float:
    """``|Y & P| / |Y | P|``; 1 when both are empty."""
    inter, ny, np_ = _counts(y, p, class_id, oracle)
    union = ny + np_ - inter
    return 1.0 if union == 0 else inter / union


def smoothness_score(p: np.ndarray, foreground_only: bool = True, per_class: bool = False):
    """Absolute-mean Sobel norm summed over classes (lambda = 1); lower is smoother.

    ``p`` is ``(H, W, D, l)`` probabilities or one-hot labels, or a single
    ``(H, W, D)`` volume treated as one class.
    """
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
        foreground_only = False
    l = arr.shape[-1]
    mask = tuple(not (foreground_only and i == 0) for i in range(l))
    if per_class:
        return [float(sobel_loss(Tensor(arr[..., i:i + 1]), LossConfig(lam=1.0)).item()) if mask[i] else 0.0
                for i in range(l)]
    return float(sobel_loss(Tensor(arr), LossConfig(lam=1.0, class_mask=mask)).item())


@dataclass
class EvalRow:
    volume_id: str
    class_id: str
    hd95: float = float("nan")
    iou: float = float("nan")
    dsc: float = float("nan")
    smoothness: float = float("nan")
    hd95_sentinel: bool = False
    error: str = ""


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def volume_rows(self) -> list[EvalRow]:
        return [r for r in self.rows if r.volume_id != "ALL"]

    @property
    def aggregate_rows(self) -> list[EvalRow]:
        return [r for r in self.rows if r.volume_id == "ALL"]

    def mean(self, metric: str, class_id: str = "mean") -> float:
        for r in self.aggregate_rows:
            if r.class_id == class_id:
                return getattr(r, metric)
        raise KeyError(class_id)

    @property
    def failed(self) -> bool:
        return any(r.error for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.volume_id, r.class_id, _fmt(r.hd95), _fmt(r.iou), _fmt(r.dsc), _fmt(r.smoothness),
                        int(r.hd95_sentinel), r.error])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "columns": list(REPORT_COLUMNS),
            "volumes": len({r.volume_id for r in self.volume_rows}),
            "errors": [asdict(r) for r in self.rows if r.error],
            "aggregate": [asdict(r) for r in self.aggregate_rows],
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _fmt(x: float) -> str:
    return "nan" if x != x else repr(float(x))


def evaluate_volume(volume_id: str, y: LabelVolume, p: LabelVolume, num_classes: int,
                    probs: np.ndarray | None = None, oracle: bool = False) -> list[EvalRow]:
    """Rows for every foreground class of one volume.

    Smoothness is taken from ``probs`` when given, else from the one-hot
    prediction.
    """
    if y.labels.shape != p.labels.shape:
        raise ShapeError(f"{volume_id}: label {y.labels.shape} vs prediction {p.labels.shape}")
    src = probs if probs is not None else np.eye(num_classes)[p.labels]
    smooth = smoothness_score(src, per_class=True)
    rows = []
    for c in range(1, num_classes):
        res = hd95_details(y, p, c, oracle=oracle)
        rows.append(EvalRow(volume_id, str(c), res.value, iou(y, p, c, oracle), dsc(y, p, c, oracle),
                            smooth[c], res.sentinel))
    return rows


def aggregate(rows: Sequence[EvalRow]) -> list[EvalRow]:
    ok = [r for r in rows if not r.error]
    out = []
    classes = sorted({r.class_id for r in ok}, key=lambda c: int(c))
    for c in classes + ["mean"]:
        sel = ok if c == "mean" else [r for r in ok if r.class_id == c]
        if not sel:
            continue
        out.append(EvalRow("ALL", c, *(float(np.mean([getattr(r, m) for r in sel]))
                                       for m in ("hd95", "iou", "dsc", "smoothness")),
                           any(r.hd95_sentinel for r in sel)))
    return out


def evaluate_many(items: Iterable, num_classes: int, workers: int = 1, oracle: bool = False) -> EvalReport:
    """Evaluate ``(volume_id, y, p, probs)`` tuples; ``y`` may be an exception (error row).

    Work is spread over a thread pool; rows keep the input order.
    """
    items = list(items)

    def one(item):
        vid, y, p, probs = item
        if isinstance(y, BaseException):
            return [EvalRow(vid, "-", error=str(y))]
        try:
            return evaluate_volume(vid, y, p, num_classes, probs, oracle)
        except Exception as exc:  # reported per volume, never aborts the batch
            return [EvalRow(vid, "-", error=f"{type(exc).__name__}: {exc}")]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, items))
    else:
        chunks = [one(it) for it in items]
    rows = [r for chunk in chunks for r in chunk]
    return EvalReport(rows + aggregate(rows))
