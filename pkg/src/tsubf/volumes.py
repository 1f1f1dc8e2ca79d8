"""Volume samples, the native sidecar+raw container, HU normalization and patching."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import UsageError

HU_MIN, HU_MAX = -1000.0, 1000.0
NATIVE_VERSION = 1
_DTYPES = {"i16": np.dtype("<i2"), "f32": np.dtype("<f4")}


class VolumeFormatError(ValueError):
    """A native volume file is malformed."""


@dataclass
class VolumeSample:
    image: np.ndarray
    label: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source: str = ""
    units: str = "hu"  # "hu" or "normalized"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3:
            raise ValueError(f"image must be 3D, got shape {self.image.shape}")
        if self.label is not None:
            self.label = np.asarray(self.label)
            if self.label.shape != self.image.shape:
                raise ValueError(f"label shape {self.label.shape} != image shape {self.image.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.image.shape


def normalize_hu(v: VolumeSample, force: bool = False) -> VolumeSample:
    """Clamp to [-1000, 1000] HU and map linearly onto [0, 1].

    Refuses samples already tagged ``normalized`` unless ``force`` is set.
    """
    if v.units == "normalized" and not force:
        raise UsageError(f"{v.source or 'sample'} is already normalized")
    img = (np.clip(v.image.astype(np.float64), HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
    return replace(v, image=img.astype(np.float32), units="normalized")


# ----------------------------------------------------------- native container

def _header_path(path: Path) -> Path:
    return path.with_suffix(".hdr")


def _raw_path(path: Path) -> Path:
    return path.with_suffix(".raw")


def write_native(path, array: np.ndarray, dtype: str = "f32", spacing=(1.0, 1.0, 1.0),
                 units: str = "hu") -> Path:
    """Write ``<stem>.hdr`` (text header) and ``<stem>.raw`` (x-fastest little-endian payload)."""
    path = Path(path)
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValueError(f"native volumes are 3D, got shape {arr.shape}")
    header = {
        "format": "tsubf-volume",
        "version": str(NATIVE_VERSION),
        "dims": " ".join(map(str, arr.shape)),
        "dtype": dtype,
        "spacing": " ".join(repr(float(s)) for s in spacing),
        "endianness": "little",
        "order": "x-fastest",
        "units": units,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    _header_path(path).write_text("".join(f"{k}: {v}\n" for k, v in header.items()))
    _raw_path(path).write_bytes(arr.astype(_DTYPES[dtype]).tobytes(order="F"))
    return _header_path(path)


def _parse_header(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise VolumeFormatError(f"malformed header line {line!r}")
        out[key.strip()] = value.strip()
    return out


def read_native(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    hdr = _parse_header(_header_path(path).read_text())
    if hdr.get("format") != "tsubf-volume":
        raise VolumeFormatError(f"{path}: not a native volume header")
    if hdr.get("version") != str(NATIVE_VERSION):
        raise VolumeFormatError(f"{path}: unsupported format version {hdr.get('version')!r}")
    if hdr.get("endianness") != "little":
        raise VolumeFormatError(f"{path}: only little-endian payloads are supported")
    try:
        dims = tuple(int(x) for x in hdr["dims"].split())
        dt = _DTYPES[hdr["dtype"]]
        spacing = tuple(float(x) for x in hdr["spacing"].split())
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: bad header field ({exc})") from exc
    payload = _raw_path(path).read_bytes()
    expected = int(np.prod(dims)) * dt.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims, order="F")
    meta = {"spacing": spacing, "dtype": hdr["dtype"], "units": hdr.get("units", "hu")}
    return np.ascontiguousarray(arr), meta


def save_sample(v: VolumeSample, image_path, label_path=None) -> None:
    write_native(image_path, v.image, "f32" if v.image.dtype.kind == "f" else "i16", v.spacing, v.units)
    if v.label is not None and label_path is not None:
        write_native(label_path, v.label, "i16", v.spacing, "label")


def load_sample(image_path, label_path=None, source: str = "") -> VolumeSample:
    img, meta = read_native(image_path)
    label = None
    if label_path is not None:
        label, _ = read_native(label_path)
        label = label.astype(np.int64)
    return VolumeSample(img.astype(np.float32) if meta["dtype"] == "f32" else img, label, meta["spacing"],
                        source or str(image_path), meta["units"])


# ------------------------------------------------------------------ patching

def pad_to(arr: np.ndarray, size, value=0) -> tuple[np.ndarray, tuple[int, ...]]:
    """Zero-pad at the far end of each axis up to ``size``; returns (array, original shape)."""
    shape = arr.shape[:3]
    pads = [(0, max(s - n, 0)) for n, s in zip(shape, size)] + [(0, 0)] * (arr.ndim - 3)
    return np.pad(arr, pads, constant_values=value), shape


def grid_origins(shape, size, overlap: float = 0.5) -> list[tuple[int, int, int]]:
    """Window origins with stride ``size * (1 - overlap)``; the last window is flush with the end."""
    axes = []
    for n, s in zip(shape, size):
        if n <= s:
            axes.append([0])
            continue
        step = max(int(s * (1 - overlap)), 1)
        starts = list(range(0, n - s + 1, step))
        if starts[-1] != n - s:
            starts.append(n - s)
        axes.append(starts)
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


def extract_patch(v: VolumeSample, origin=None, size=(192, 192, 64), mode: str = "center",
                  rng: np.random.Generator | None = None, fg_prob: float = 0.5) -> VolumeSample:
    """Crop a ``size`` patch, zero-padding first when the volume is smaller.

    ``mode``: ``center``; ``random-foreground`` (centered on a uniformly drawn
    foreground voxel with probability ``fg_prob``, else a uniform origin);
    ``grid`` requires an explicit ``origin`` (see :func:`grid_origins`).
    """
    size = tuple(int(s) for s in size)
    img, _ = pad_to(v.image, size)
    lab = pad_to(v.label, size)[0] if v.label is not None else None
    full = img.shape
    if origin is None:
        if mode == "center":
            origin = tuple((n - s) // 2 for n, s in zip(full, size))
        elif mode == "random-foreground":
            rng = rng or np.random.default_rng()
            fg = np.argwhere(lab > 0) if lab is not None else np.empty((0, 3))
            if len(fg) and rng.random() < fg_prob:
                c = fg[rng.integers(len(fg))]
                origin = tuple(int(np.clip(ci - s // 2, 0, n - s)) for ci, s, n in zip(c, size, full))
            else:
                origin = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(full, size))
        else:
            raise UsageError(f"mode {mode!r} needs an explicit origin")
    origin = tuple(int(o) for o in origin)
    if any(o < 0 or o + s > n for o, s, n in zip(origin, size, full)):
        raise UsageError(f"origin {origin} with size {size} falls outside padded volume {full}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return replace(v, image=img[sl], label=None if lab is None else lab[sl],
                   meta={**v.meta, "origin": origin})


# ------------------------------------------------------------------ manifest

MANIFEST_VERSION = 1


def write_manifest(path, samples: list[dict]) -> str:
    """Write a dataset manifest; returns the sha256 of its bytes."""
    body = json.dumps({"version": MANIFEST_VERSION, "samples": samples}, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(body)
    return hashlib.sha256(body.encode()).hexdigest()


def read_manifest(path) -> list[dict]:
    path = Path(path)
    data = json.loads(path.read_text())
    if data.get("version") != MANIFEST_VERSION:
        raise VolumeFormatError(f"{path}: unsupported manifest version {data.get('version')!r}")
    out = []
    for s in data["samples"]:
        s = dict(s)
        for key in ("image", "label"):
            if s.get(key) and not Path(s[key]).is_absolute():
                s[key] = str(path.parent / s[key])
        out.append(s)
    return out


def split_counts(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """Validation and test sizes are floored; the remainder goes to train."""
    val = int(np.floor(n * fractions[1] + 1e-9))
    test = int(np.floor(n * fractions[2] + 1e-9))
    return n - val - test, val, test
