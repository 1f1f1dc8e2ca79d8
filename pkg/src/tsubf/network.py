"""Full U-shaped network assembly, sliding-window inference and checkpoints."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ops
from .attention import TSPBlock
from .bscf import BSCFBlock
from .nn import ConvBlock, DownsampleStage, Module, PatchEmbedding, UpsampleStage
from .tensor import ConfigError, Tensor
from .volumes import grid_origins, pad_to

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_channels: int = 1
    num_classes: int = 2
    channels: tuple[int, ...] = (32, 64, 128, 256)
    patch_size: tuple[int, int, int] = (192, 192, 64)
    blocks_per_stage: int = 1
    use_tsp: bool = True
    tsp_in_decoder: bool = True
    tsp_residual: bool = True
    use_bscf: bool = True
    bscf_residual: bool = True
    lambda_sobel: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    parallel_heads: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.patch_size = tuple(int(n) for n in self.patch_size)
        if len(self.channels) != 4:
            raise ConfigError(f"expected four stage widths, got {self.channels}")
        bad = [c for c in self.channels if c % 4]
        if bad:
            raise ConfigError(f"stage widths must be divisible by 4, got {self.channels}")
        self.check_spatial(self.patch_size)

    @property
    def divisor(self) -> int:
        """Spatial dims must be multiples of this (4x embedding, then three halvings)."""
        return 4 * 2 ** (len(self.channels) - 1)

    def check_spatial(self, dims) -> None:
        if any(n % self.divisor for n in dims):
            raise ConfigError(f"spatial dims {tuple(dims)} must be divisible by {self.divisor}; pad the volume")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class TSUBFNet(Module):
    """Patch embedding, four conv+TSP encoder stages, BSCF-fused decoder and a 1x1x1 head.

    BSCF fuses the up-path with the encoder features at 1/16, 1/8, 1/4 and
    the half-resolution embedding output.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        c = cfg.channels
        n = cfg.blocks_per_stage

        def tsp(width):
            return TSPBlock(width, rng, residual=cfg.tsp_residual, dtype=dt, parallel=cfg.parallel_heads)

        def bscf(width):
            return BSCFBlock(width, rng, dtype=dt, parallel=cfg.parallel_heads)

        self.embed = PatchEmbedding(cfg.input_channels, c[0], rng, dtype=dt)
        self.down = [None] + [DownsampleStage(c[i - 1], c[i], rng, dtype=dt) for i in range(1, 4)]
        self.enc_convs = [[ConvBlock(c[i], c[i], 3, rng, dtype=dt) for _ in range(n)] for i in range(4)]
        self.enc_tsp = [tsp(c[i]) if cfg.use_tsp else None for i in range(4)]
        self.up = [UpsampleStage(c[i + 1], c[i], rng, dtype=dt) for i in range(3)]
        self.dec_bscf = [bscf(c[i]) if cfg.use_bscf else None for i in range(3)]
        self.dec_convs = [[ConvBlock(c[i], c[i], 3, rng, dtype=dt) for _ in range(n)] for i in range(3)]
        self.dec_tsp = [tsp(c[i]) if cfg.use_tsp and cfg.tsp_in_decoder else None for i in range(3)]
        self.head_up1 = UpsampleStage(c[0], c[0], rng, dtype=dt)
        self.head_bscf = bscf(c[0]) if cfg.use_bscf else None
        self.head_up2 = UpsampleStage(c[0], c[0], rng, dtype=dt)
        self.head = ConvBlock(c[0], cfg.num_classes, 1, rng, norm=False, act=False, dtype=dt)

    # Module discovery walks vars(); nested lists of blocks need flattening.
    def named_parameters(self, prefix: str = "", _seen=None):
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            if isinstance(value, list):
                for i, item in enumerate(value):
                    items = item if isinstance(item, list) else [item]
                    for j, sub in enumerate(items):
                        if isinstance(sub, Module):
                            tag = f"{name}.{i}.{j}." if isinstance(item, list) else f"{name}.{i}."
                            yield from sub.named_parameters(prefix + tag, seen)
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.", seen)

    def _as_input(self, volume) -> Tensor:
        if not isinstance(volume, Tensor):
            arr = np.asarray(volume)
            if arr.ndim == 3:
                arr = arr[..., None]
            volume = Tensor(arr, dtype=self.cfg.np_dtype)
        if volume.ndim != 4 or volume.shape[-1] != self.cfg.input_channels:
            raise ConfigError(f"expected (H, W, D, {self.cfg.input_channels}) input, got {volume.shape}")
        self.cfg.check_spatial(volume.shape[:3])
        return volume

    def encode(self, volume) -> tuple[Tensor, list[Tensor]]:
        """Return the half-resolution embedding and the four encoder stage outputs."""
        x = self._as_input(volume)
        half, x = self.embed.forward_with_half(x)
        skips = []
        for i in range(4):
            if i:
                x = self.down[i](x)
            for blk in self.enc_convs[i]:
                x = blk(x)
            if self.enc_tsp[i] is not None:
                x = self.enc_tsp[i](x)
            skips.append(x)
        return half, skips

    def _fuse(self, bscf: BSCFBlock | None, x_u: Tensor, x_d: Tensor) -> Tensor:
        if bscf is None:
            return ops.add(x_u, x_d)
        out = bscf(x_u, x_d)
        return ops.add(out, x_u) if self.cfg.bscf_residual else out

    def logits(self, volume) -> Tensor:
        half, skips = self.encode(volume)
        x = skips[3]
        for i in (2, 1, 0):
            x = self._fuse(self.dec_bscf[i], self.up[i](x), skips[i])
            for blk in self.dec_convs[i]:
                x = blk(x)
            if self.dec_tsp[i] is not None:
                x = self.dec_tsp[i](x)
        x = self._fuse(self.head_bscf, self.head_up1(x), half)
        return self.head(self.head_up2(x))

    def forward(self, volume) -> Tensor:
        """Per-voxel class probabilities ``(H, W, D, l)``."""
        return ops.softmax(self.logits(volume), axis=-1)

    def flops(self, shape) -> int:
        """Multiply-accumulate count for one forward pass on ``shape = (H, W, D, C_img)``."""
        self.cfg.check_spatial(shape[:3])
        c = self.cfg.channels
        total = self.embed.flops(shape)
        s = [n // 4 for n in shape[:3]]
        dims = []
        for i in range(4):
            if i:
                total += self.down[i].flops(tuple(s) + (c[i - 1],))
                s = [n // 2 for n in s]
            here = tuple(s) + (c[i],)
            dims.append(here)
            total += sum(b.flops(here) for b in self.enc_convs[i])
            if self.enc_tsp[i] is not None:
                total += self.enc_tsp[i].flops(here)
        for i in (2, 1, 0):
            total += self.up[i].flops(dims[i + 1])
            if self.dec_bscf[i] is not None:
                total += self.dec_bscf[i].flops(dims[i])
            total += sum(b.flops(dims[i]) for b in self.dec_convs[i])
            if self.dec_tsp[i] is not None:
                total += self.dec_tsp[i].flops(dims[i])
        total += self.head_up1.flops(dims[0])
        half = tuple(n * 2 for n in dims[0][:3]) + (c[0],)
        if self.head_bscf is not None:
            total += self.head_bscf.flops(half)
        total += self.head_up2.flops(half)
        total += self.head.flops(tuple(shape[:3]) + (c[0],))
        return int(total)


def forward(m: TSUBFNet, volume) -> Tensor:
    return m(volume)


def count_flops(m, input_shape) -> int:
    return int(m.flops(tuple(input_shape)))


def sliding_window_infer(m: TSUBFNet, volume: np.ndarray, overlap: float = 0.5) -> np.ndarray:
    """Average overlapping patch predictions over a volume of any size.

    ``volume`` is ``(H, W, D)`` or ``(H, W, D, C)``; it is zero-padded up to
    the patch size when smaller and the result is cropped back.
    """
    arr = np.asarray(volume, dtype=m.cfg.np_dtype)
    if arr.ndim == 3:
        arr = arr[..., None]
    size = m.cfg.patch_size
    padded, orig = pad_to(arr, size)
    acc = np.zeros(padded.shape[:3] + (m.cfg.num_classes,), dtype=np.float64)
    count = np.zeros(padded.shape[:3] + (1,), dtype=np.float64)
    for o in grid_origins(padded.shape[:3], size, overlap):
        sl = tuple(slice(a, a + s) for a, s in zip(o, size))
        acc[sl] += m(Tensor(padded[sl], dtype=m.cfg.np_dtype)).data
        count[sl] += 1.0
    out = acc / count
    return out[: orig[0], : orig[1], : orig[2]].astype(m.cfg.np_dtype)


# ------------------------------------------------------------------ checkpoints

class CheckpointError(ValueError):
    pass


def save_checkpoint(m: TSUBFNet, path, state: dict | None = None) -> Path:
    """Write ``manifest.json`` plus a little-endian ``params.bin`` blob into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in m.named_parameters():
        buf = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": p.dtype.name,
                        "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {"format_version": CHECKPOINT_VERSION, "config": m.cfg.to_dict(), "dtype": m.cfg.dtype,
                "params": entries, "total_bytes": offset, "state": state or {}}
    (path / "params.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if not isinstance(manifest, dict) or not {"format_version", "config", "params"} <= set(manifest):
        raise CheckpointError(f"{path}: corrupt manifest (missing keys)")
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {manifest['format_version']!r}")
    return manifest


def load_checkpoint(path, into: TSUBFNet | None = None) -> TSUBFNet:
    """Rebuild (or fill ``into``) from a checkpoint; parameters are restored bit-exactly."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / "params.bin").read_bytes()
    expected = manifest.get("total_bytes", sum(e["nbytes"] for e in manifest["params"]))
    if len(blob) != expected:
        raise CheckpointError(f"{path}: parameter blob has {len(blob)} bytes, manifest declares {expected}")
    m = into if into is not None else TSUBFNet(ModelConfig.from_dict(manifest["config"]))
    params = list(m.named_parameters())
    stored = manifest["params"]
    for (name, p), e in zip(params, stored):
        if name != e["name"] or tuple(e["shape"]) != p.shape or e["dtype"] != p.dtype.name:
            raise CheckpointError(f"parameter mismatch at {name!r}: model {p.shape}/{p.dtype.name}, "
                                  f"checkpoint {e['name']!r} {tuple(e['shape'])}/{e['dtype']}")
    if len(params) != len(stored):
        first = params[len(stored)][0] if len(params) > len(stored) else stored[len(params)]["name"]
        raise CheckpointError(f"parameter count mismatch ({len(params)} vs {len(stored)}), first unmatched {first!r}")
    for (name, p), e in zip(params, stored):
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"])), offset=e["offset"])
        p.data = np.ascontiguousarray(arr.reshape(e["shape"]).astype(p.dtype))
    m.checkpoint_state = manifest.get("state", {})
    return m
