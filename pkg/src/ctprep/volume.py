"""Calibrated CT volumes and single-file NIfTI-1 storage.

A Volume holds float32 HU data indexed (slice, row, col) with voxel spacing
in mm. On disk the fastest-varying dimension is the column axis, so a volume
of 40 slices of 500x400 pixels carries dim = [3, 400, 500, 40, 1, 1, 1, 1].
Only the little-endian single-file float32 variant is read back; everything
else raises UnsupportedVariant. Write-then-read reproduces dims, spacing,
and every voxel bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dicom_io import DicomSeries
from .errors import InconsistentGeometry, SingleSliceNoSpacing, UnsupportedVariant

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_FLOAT32 = 16
MAGIC_SINGLE = b"n+1\x00"
MAGIC_DETACHED = b"ni1\x00"
# sizeof_hdr as read on a machine of the opposite endianness
_SWAPPED_SIZEOF_HDR = 1543569408

# Relative slice-gap deviation above which the stack is resampled.
GAP_TOLERANCE = 0.01


@dataclass
class Volume:
    """Float32 voxel grid with spacing and slice-axis origin, all in mm."""

    data: np.ndarray  # (n_slices, height, width) float32
    spacing: tuple[float, float, float]  # (slice, row, col) mm
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3 or any(d <= 0 for d in arr.shape):
            raise ValueError("volume data must be a non-empty 3-D array")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        self.data = arr
        # Spacing and origin are held at float32 precision to match what the
        # on-disk header can represent, keeping round-trips exact.
        sp = tuple(float(np.float32(s)) for s in self.spacing)
        if any(not np.isfinite(s) or s <= 0 for s in sp):
            raise ValueError("spacing must be positive and finite")
        self.spacing = sp
        self.origin = tuple(float(np.float32(o)) for o in self.origin)

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing, self.origin)


def _slice_positions(series: DicomSeries) -> np.ndarray:
    normal = series.slices[0].normal
    return np.array(
        [float(np.dot(np.asarray(s.image_position), normal)) for s in series.slices]
    )


def _resample_slice_axis(stack: np.ndarray, z: np.ndarray, new_z: np.ndarray) -> np.ndarray:
    """Linear interpolation along axis 0 only. new_z must lie within [z0, zN]."""
    idx = np.searchsorted(z, new_z, side="right") - 1
    idx = np.clip(idx, 0, len(z) - 2)
    z0 = z[idx]
    z1 = z[idx + 1]
    w = (new_z - z0) / (z1 - z0)
    out = np.empty((len(new_z),) + stack.shape[1:], dtype=np.float32)
    for k, (i, wk, zk) in enumerate(zip(idx, w, new_z)):
        # Keep values at original slice locations exact: no blending there.
        if zk == z[i]:
            out[k] = stack[i]
        elif zk == z[i + 1]:
            out[k] = stack[i + 1]
        else:
            out[k] = (1.0 - wk) * stack[i] + wk * stack[i + 1]
    return out


def assemble(series: DicomSeries) -> Volume:
    """Stack an ordered series into a calibrated HU volume.

    Slice gaps are measured along the slice normal. If any gap deviates from
    the smallest by more than 1%, the stack is linearly resampled onto a
    uniform grid at the smallest observed gap; the resampled extent never
    exceeds the original, and values at original slice locations survive
    exactly. In-plane values are never interpolated.
    """
    if not series.slices:
        raise ValueError("cannot assemble an empty series")
    first = series.slices[0]
    hu = np.stack([s.hounsfield() for s in series.slices])

    if len(series.slices) == 1:
        if first.slice_thickness is None or first.slice_thickness <= 0:
            raise SingleSliceNoSpacing(series.series_uid or "<blank uid>")
        dz = float(first.slice_thickness)
        z0 = float(np.dot(np.asarray(first.image_position), first.normal))
        return Volume(hu, (dz, first.pixel_spacing[0], first.pixel_spacing[1]),
                      (z0, 0.0, 0.0))

    z = _slice_positions(series)
    gaps = np.diff(z)
    if np.any(gaps <= 0):
        raise InconsistentGeometry(
            f"series {series.series_uid or '<blank uid>'} has duplicate or "
            "unordered slice positions"
        )
    min_gap = float(gaps.min())
    if np.any(np.abs(gaps - min_gap) > GAP_TOLERANCE * min_gap):
        count = int(np.floor((z[-1] - z[0]) / min_gap + 1e-9)) + 1
        new_z = z[0] + np.arange(count) * min_gap
        hu = _resample_slice_axis(hu, z, new_z)
        dz = min_gap
    else:
        dz = float(gaps.mean())
    return Volume(hu, (dz, first.pixel_spacing[0], first.pixel_spacing[1]),
                  (float(z[0]), 0.0, 0.0))


def write_nifti(volume: Volume, path) -> None:
    """Write a single-file little-endian float32 NIfTI-1 volume."""
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)  # sizeof_hdr
    struct.pack_into("<c", hdr, 38, b"r")  # regular, conventional value
    ns, h, w = volume.data.shape
    struct.pack_into("<8h", hdr, 40, 3, w, h, ns, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", hdr, 70, DT_FLOAT32)  # datatype
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    sz, sr, sc = volume.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sc, sr, sz, 0.0, 0.0, 0.0, 0.0)  # pixdim
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<24s", hdr, 228, b"")
    # Slice-axis origin is stashed in the qoffset fields; full qform/sform
    # semantics are out of scope.
    oz, oy, ox = volume.origin
    struct.pack_into("<3f", hdr, 268, ox, oy, oz)
    struct.pack_into("<16s", hdr, 328, b"")
    struct.pack_into("<4s", hdr, 344, MAGIC_SINGLE)

    body = volume.data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # no header extensions
        fh.write(body)


def read_nifti(path) -> Volume:
    """Read back a volume written by write_nifti.

    Detached-header files (magic "ni1"), big-endian files, and datatypes
    other than float32 raise UnsupportedVariant.
    """
    blob = Path(path).read_bytes()
    if len(blob) < VOX_OFFSET:
        raise UnsupportedVariant("file shorter than a NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    if sizeof_hdr == _SWAPPED_SIZEOF_HDR:
        raise UnsupportedVariant("big-endian NIfTI is not supported")
    if sizeof_hdr != HEADER_SIZE:
        raise UnsupportedVariant(f"bad sizeof_hdr {sizeof_hdr}")
    magic = struct.unpack_from("<4s", blob, 344)[0]
    if magic == MAGIC_DETACHED:
        raise UnsupportedVariant("detached header/image pairs are not supported")
    if magic != MAGIC_SINGLE:
        raise UnsupportedVariant(f"bad magic {magic!r}")
    datatype = struct.unpack_from("<h", blob, 70)[0]
    if datatype != DT_FLOAT32:
        raise UnsupportedVariant(f"datatype {datatype} is not float32")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3:
        raise UnsupportedVariant(f"expected 3 spatial dims, got dim[0]={dim[0]}")
    w, h, ns = dim[1], dim[2], dim[3]
    pixdim = struct.unpack_from("<8f", blob, 76)
    ox, oy, oz = struct.unpack_from("<3f", blob, 268)
    vox_offset = int(struct.unpack_from("<f", blob, 108)[0])
    count = w * h * ns
    if vox_offset + count * 4 > len(blob):
        raise UnsupportedVariant("voxel data shorter than header promises")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=vox_offset)
    return Volume(
        data.reshape(ns, h, w).copy(),
        (pixdim[3], pixdim[2], pixdim[1]),
        (oz, oy, ox),
    )
