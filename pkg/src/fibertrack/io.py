"""Volume, gradient-table, scalar-map and TrackVis file formats.

Volumes are stored as ``<base>.raw`` (little-endian float32, x fastest)
plus a ``<base>.json`` sidecar header. The gradient table of a DWI volume
sits next to it as ``<base>.bval`` / ``<base>.bvec`` in FSL layout.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .dwi import DwiVolume, format_gradient_table, parse_gradient_table
from .errors import DataError

DTYPE_TAG = "f32le"
AXIS_ORDER = "x-fastest"
TRK_HEADER_SIZE = 1000
TRK_VERSION = 2


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    voxel_size: tuple
    dtype: str = DTYPE_TAG
    axis_order: str = AXIS_ORDER
    bvals: str | None = None
    bvecs: str | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not 3 <= len(dims) <= 4 or min(dims) < 1:
            raise DataError(f"dims must be 3 or 4 positive integers, got {self.dims}")
        if self.dtype != DTYPE_TAG:
            raise DataError(f"unknown dtype tag {self.dtype!r} (expected {DTYPE_TAG!r})")
        if self.axis_order != AXIS_ORDER:
            raise DataError(f"unsupported axis order {self.axis_order!r}")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise DataError("voxel_size must be three positive numbers")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def n_bytes(self):
        return int(np.prod(self.dims)) * 4

    def to_json(self):
        doc = {"dims": list(self.dims), "voxel_size": list(self.voxel_size),
               "dtype": self.dtype, "axis_order": self.axis_order}
        if self.bvals is not None:
            doc["bvals"] = self.bvals
            doc["bvecs"] = self.bvecs
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
            return cls(dims=doc["dims"], voxel_size=doc["voxel_size"], dtype=doc["dtype"],
                       axis_order=doc.get("axis_order", AXIS_ORDER),
                       bvals=doc.get("bvals"), bvecs=doc.get("bvecs"))
        except (ValueError, KeyError, TypeError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed volume header: {exc}") from None


@dataclass(frozen=True)
class ScalarMap:
    """3D scalar field (FA, MD, counts, ...) with voxel size."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)


def _base(path):
    path = os.fspath(path)
    for ext in (".json", ".raw"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def write_gradient_table(base, table):
    bvals, bvecs = format_gradient_table(table)
    with open(base + ".bval", "w") as fh:
        fh.write(bvals)
    with open(base + ".bvec", "w") as fh:
        fh.write(bvecs)


def read_gradient_table(bval_path, bvec_path):
    try:
        with open(bval_path) as fh:
            bvals = fh.read()
        with open(bvec_path) as fh:
            bvecs = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read gradient table: {exc}") from None
    return parse_gradient_table(bvals, bvecs)


def write_volume(path, volume):
    """Write a :class:`DwiVolume` or :class:`ScalarMap`; returns the base path."""
    base = _base(path)
    data = np.asarray(volume.data)
    bvals = bvecs = None
    if isinstance(volume, DwiVolume):
        write_gradient_table(base, volume.table)
        bvals = os.path.basename(base) + ".bval"
        bvecs = os.path.basename(base) + ".bvec"
    header = VolumeHeader(data.shape, volume.voxel_size, bvals=bvals, bvecs=bvecs)
    with open(base + ".json", "w") as fh:
        fh.write(header.to_json())
    with open(base + ".raw", "wb") as fh:
        fh.write(np.asarray(data, dtype="<f4").tobytes(order="F"))
    return base


def read_volume(path, table=None):
    """Read a volume written by :func:`write_volume`.

    Four-dimensional data with a gradient table (from the header or
    ``table``) becomes a :class:`DwiVolume`; everything else a
    :class:`ScalarMap`.
    """
    base = _base(path)
    try:
        with open(base + ".json") as fh:
            header = VolumeHeader.from_json(fh.read())
        with open(base + ".raw", "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read volume {base}: {exc}") from None
    if len(payload) != header.n_bytes:
        raise DataError(f"payload size mismatch for {base}.raw: expected {header.n_bytes} "
                        f"bytes for dims {header.dims}, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(header.dims, order="F")
    data = data.astype(np.float32)
    if len(header.dims) == 4:
        if table is None and header.bvals is not None:
            d = os.path.dirname(base)
            table = read_gradient_table(os.path.join(d, header.bvals),
                                        os.path.join(d, header.bvecs))
        if table is not None:
            return DwiVolume(data, header.voxel_size, table)
    return ScalarMap(data, header.voxel_size)


# -- TrackVis ----------------------------------------------------------------

@dataclass(frozen=True)
class TrkHeader:
    dim: tuple
    voxel_size: tuple
    n_count: int = 0
    origin: tuple = (0.0, 0.0, 0.0)
    voxel_order: bytes = b"LAS"

    def pack(self):
        buf = bytearray(TRK_HEADER_SIZE)
        buf[0:6] = b"TRACK\0"
        struct.pack_into("<3h", buf, 6, *(int(d) for d in self.dim))
        struct.pack_into("<3f", buf, 12, *self.voxel_size)
        struct.pack_into("<3f", buf, 24, *self.origin)
        struct.pack_into("<h", buf, 36, 0)  # n_scalars
        struct.pack_into("<h", buf, 238, 0)  # n_properties
        buf[948:948 + len(self.voxel_order)] = self.voxel_order
        struct.pack_into("<i", buf, 988, int(self.n_count))
        struct.pack_into("<i", buf, 992, TRK_VERSION)
        struct.pack_into("<i", buf, 996, TRK_HEADER_SIZE)
        return bytes(buf)

    @classmethod
    def unpack(cls, buf):
        if len(buf) < TRK_HEADER_SIZE or buf[0:6] != b"TRACK\0":
            raise DataError("not a TrackVis file")
        hdr_size = struct.unpack_from("<i", buf, 996)[0]
        if hdr_size != TRK_HEADER_SIZE:
            raise DataError(f"bad TrackVis hdr_size {hdr_size}")
        if struct.unpack_from("<h", buf, 36)[0] or struct.unpack_from("<h", buf, 238)[0]:
            raise DataError("scalars/properties per point are not supported")
        return cls(dim=struct.unpack_from("<3h", buf, 6),
                   voxel_size=struct.unpack_from("<3f", buf, 12),
                   n_count=struct.unpack_from("<i", buf, 988)[0],
                   origin=struct.unpack_from("<3f", buf, 24),
                   voxel_order=bytes(buf[948:951]))


def _points(sl):
    pts = sl.points if hasattr(sl, "points") else sl
    return np.asarray(pts, dtype="<f4").reshape(-1, 3)


def write_trk(path, streamlines, dim, voxel_size):
    """Write streamlines (point arrays in mm, or :class:`Streamline`)."""
    streamlines = [s for s in streamlines if s is not None]
    header = TrkHeader(tuple(dim), tuple(voxel_size), len(streamlines))
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for sl in streamlines:
            pts = _points(sl)
            fh.write(struct.pack("<i", len(pts)))
            fh.write(pts.tobytes())
    return header


def read_trk(path):
    """Returns ``(header, [points (M, 3) float32, ...])``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    header = TrkHeader.unpack(buf)
    pos = TRK_HEADER_SIZE
    out = []
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise DataError("truncated streamline count")
        m = struct.unpack_from("<i", buf, pos)[0]
        pos += 4
        end = pos + 12 * m
        if m < 0 or end > len(buf):
            raise DataError("truncated streamline payload")
        out.append(np.frombuffer(buf[pos:end], dtype="<f4").reshape(m, 3).copy())
        pos = end
    if len(out) != header.n_count:
        raise DataError(f"n_count {header.n_count} but {len(out)} streamlines in file")
    return header, out


# -- ground truth ----------------------------------------------------------------

def write_ground_truth(base, truth, voxel_size):
    """Direction field as three scalar maps plus the fiber mask."""
    for k, axis in enumerate("xyz"):
        write_volume(f"{base}_dir{axis}", ScalarMap(truth.directions[..., k], voxel_size))
    write_volume(f"{base}_mask", ScalarMap(truth.mask.astype(np.float32), voxel_size))


def read_ground_truth(base):
    dirs = np.stack([read_volume(f"{base}_dir{a}").data for a in "xyz"], axis=-1)
    mask = read_volume(f"{base}_mask").data > 0.5
    return dirs.astype(np.float64), mask
