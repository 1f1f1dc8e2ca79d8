"""Minimal NIfTI-1 reader: uncompressed single-file (``n+1``) volumes, int16 or float32."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volumes import VolumeSample

HEADER_SIZE = 348
DATATYPES = {4: "i2", 16: "f4"}  # NIFTI_TYPE_INT16, NIFTI_TYPE_FLOAT32


class NiftiError(ValueError):
    pass


class NiftiMagicError(NiftiError):
    """Magic string is not a single-file NIfTI-1 (``n+1``)."""


class NiftiDatatypeError(NiftiError):
    """Voxel datatype outside the supported subset."""


class NiftiTruncatedError(NiftiError):
    """Header or payload shorter than declared."""


def read_nifti1(path) -> VolumeSample:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiTruncatedError(f"{path}: {len(raw)} bytes, shorter than a NIfTI-1 header")
    endian = "<"
    if struct.unpack("<i", raw[:4])[0] != HEADER_SIZE:
        endian = ">"
        if struct.unpack(">i", raw[:4])[0] != HEADER_SIZE:
            raise NiftiMagicError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiMagicError(f"{path}: detached-header NIfTI ('ni1') is not supported")
    if magic != b"n+1\x00":
        raise NiftiMagicError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", raw[108:120])
    if datatype not in DATATYPES:
        raise NiftiDatatypeError(f"{path}: datatype code {datatype} unsupported (int16=4, float32=16 only)")
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(max(int(n), 1) for n in dim[1:4])
    if any(n > 1 for n in dim[4:ndim + 1]):
        raise NiftiError(f"{path}: only 3D volumes are supported, dims {dim[1:ndim + 1]}")
    dt = np.dtype(endian + DATATYPES[datatype])
    start = int(vox_offset)
    nbytes = int(np.prod(shape)) * dt.itemsize
    if len(raw) < start + nbytes:
        raise NiftiTruncatedError(f"{path}: payload needs {nbytes} bytes at offset {start}, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=start).reshape(shape, order="F")
    if scl_slope != 0 and np.isfinite(scl_slope):
        data = data.astype(np.float64) * scl_slope + scl_inter
    image = np.ascontiguousarray(data.astype(np.float32) if data.dtype != np.int16 else data)
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return VolumeSample(image, spacing=spacing, source=str(path), units="hu",
                        meta={"datatype": datatype, "scl_slope": scl_slope, "scl_inter": scl_inter})
