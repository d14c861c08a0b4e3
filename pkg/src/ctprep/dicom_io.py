"""Reader for a restricted subset of DICOM Part 10 CT files.

Supported transfer syntaxes are implicit and explicit VR little endian,
uncompressed, 16 bits per pixel. Unknown tags are skipped by their declared
length; sequences are only ever skipped, never descended into. Files written
by the phantom generator round-trip bit-exactly through this parser.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    InconsistentGeometry,
    MissingPixelData,
    NotDicom,
    TruncatedFile,
    UnsupportedTransferSyntax,
)

PREAMBLE_LEN = 128
MAGIC = b"DICM"

IMPLICIT_VR_LE = "1.2.840.10008.1.2"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
SUPPORTED_TRANSFER_SYNTAXES = frozenset({IMPLICIT_VR_LE, EXPLICIT_VR_LE})

UNDEFINED_LENGTH = 0xFFFFFFFF

# Tags the pipeline interprets. Everything else is skipped.
TAG_IMAGE_TYPE = (0x0008, 0x0008)
TAG_PATIENT_ID = (0x0010, 0x0020)
TAG_PATIENT_AGE = (0x0010, 0x1010)
TAG_SLICE_THICKNESS = (0x0018, 0x0050)
TAG_CONVOLUTION_KERNEL = (0x0018, 0x1210)
TAG_SERIES_UID = (0x0020, 0x000E)
TAG_INSTANCE_NUMBER = (0x0020, 0x0013)
TAG_IMAGE_POSITION = (0x0020, 0x0032)
TAG_IMAGE_ORIENTATION = (0x0020, 0x0037)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLS = (0x0028, 0x0011)
TAG_PIXEL_SPACING = (0x0028, 0x0030)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
TAG_RESCALE_SLOPE = (0x0028, 0x1053)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)

# VR of each interpreted tag, needed to decode implicit-VR datasets.
_TAG_VR = {
    TAG_IMAGE_TYPE: "CS",
    TAG_PATIENT_ID: "LO",
    TAG_PATIENT_AGE: "AS",
    TAG_SLICE_THICKNESS: "DS",
    TAG_CONVOLUTION_KERNEL: "SH",
    TAG_SERIES_UID: "UI",
    TAG_INSTANCE_NUMBER: "IS",
    TAG_IMAGE_POSITION: "DS",
    TAG_IMAGE_ORIENTATION: "DS",
    TAG_ROWS: "US",
    TAG_COLS: "US",
    TAG_PIXEL_SPACING: "DS",
    TAG_BITS_ALLOCATED: "US",
    TAG_PIXEL_REPRESENTATION: "US",
    TAG_RESCALE_INTERCEPT: "DS",
    TAG_RESCALE_SLOPE: "DS",
}

# VRs whose explicit encoding uses a 2-byte reserved field and 4-byte length.
_LONG_VRS = frozenset({b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"})
_KNOWN_VRS = frozenset(
    {
        b"AE", b"AS", b"AT", b"CS", b"DA", b"DS", b"DT", b"FL", b"FD", b"IS",
        b"LO", b"LT", b"OB", b"OF", b"OW", b"PN", b"SH", b"SL", b"SQ", b"SS",
        b"ST", b"TM", b"UI", b"UL", b"UN", b"US", b"UT",
    }
)


@dataclass
class DicomSlice:
    """One decoded CT slice, geometry plus stored (uncalibrated) pixels."""

    rows: int
    cols: int
    pixel_spacing: tuple[float, float]  # mm, row then column
    image_position: tuple[float, float, float]  # mm, patient coordinates
    orientation_cosines: tuple[float, ...]  # row direction then column direction
    image_type: tuple[str, ...]
    convolution_kernel: Optional[str]
    rescale_slope: float
    rescale_intercept: float
    raw_pixels: np.ndarray  # rows x cols int32, stored values
    series_uid: str = ""
    instance_number: Optional[int] = None
    patient_id: str = ""
    patient_age_years: Optional[int] = None
    slice_thickness: Optional[float] = None

    def __post_init__(self) -> None:
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("rows and cols must be positive")
        if any(s <= 0 for s in self.pixel_spacing):
            raise ValueError("pixel spacing must be positive")
        r = np.asarray(self.orientation_cosines[:3], dtype=float)
        c = np.asarray(self.orientation_cosines[3:], dtype=float)
        if abs(np.linalg.norm(r) - 1.0) > 1e-3 or abs(np.linalg.norm(c) - 1.0) > 1e-3:
            raise ValueError("orientation cosines are not unit length")
        if abs(float(np.dot(r, c))) > 1e-2:
            raise ValueError("orientation cosines are not orthogonal")
        if self.raw_pixels.shape != (self.rows, self.cols):
            raise ValueError("pixel array does not match rows x cols")

    @property
    def row_direction(self) -> np.ndarray:
        return np.asarray(self.orientation_cosines[:3], dtype=float)

    @property
    def col_direction(self) -> np.ndarray:
        return np.asarray(self.orientation_cosines[3:], dtype=float)

    @property
    def normal(self) -> np.ndarray:
        """Unit vector perpendicular to the slice plane."""
        n = np.cross(self.row_direction, self.col_direction)
        return n / np.linalg.norm(n)

    def hounsfield(self) -> np.ndarray:
        """Calibrated HU values as float32."""
        hu = self.raw_pixels * float(self.rescale_slope) + float(self.rescale_intercept)
        return hu.astype(np.float32)


@dataclass
class DicomSeries:
    """Slices sharing one series UID, ordered along the slice normal."""

    series_uid: str
    slices: list[DicomSlice]
    source_paths: list[str]
    patient_id: str = ""
    patient_age_years: Optional[int] = None

    def __len__(self) -> int:
        return len(self.slices)


def _u16(buf: bytes, pos: int) -> int:
    return struct.unpack_from("<H", buf, pos)[0]


def _u32(buf: bytes, pos: int) -> int:
    return struct.unpack_from("<I", buf, pos)[0]


def _decode_text(value: bytes) -> str:
    return value.decode("ascii", errors="replace").rstrip("\x00 ")


def _decode_multi(value: bytes) -> tuple[str, ...]:
    text = _decode_text(value)
    if not text:
        return ()
    return tuple(part.strip() for part in text.split("\\"))


def _decode_ds(value: bytes) -> tuple[float, ...]:
    return tuple(float(part) for part in _decode_multi(value) if part)

def _decode_age(value: bytes) -> Optional[int]:
    # DICOM AS form "nnnY"; day/week/month qualified ages are not mapped.
    text = _decode_text(value).strip()
    if len(text) == 4 and text[3] == "Y" and text[:3].isdigit():
        return int(text[:3])
    return None


def _parse_meta(data: bytes) -> tuple[int, str]:
    """Walk the group-0002 file meta elements; return dataset offset and
    transfer syntax UID. The meta group is always explicit VR little endian."""
    pos = PREAMBLE_LEN + 4
    transfer_syntax = ""
    n = len(data)
    while pos + 8 <= n:
        group = _u16(data, pos)
        if group != 0x0002:
            break
        elem = _u16(data, pos + 2)
        vr = data[pos + 4 : pos + 6]
        if vr in _LONG_VRS:
            if pos + 12 > n:
                raise TruncatedFile("meta element header runs past end of file")
            length = _u32(data, pos + 8)
            value_at = pos + 12
        else:
            length = _u16(data, pos + 6)
            value_at = pos + 8
        if length == UNDEFINED_LENGTH or value_at + length > n:
            raise TruncatedFile("meta element value runs past end of file")
        if (group, elem) == (0x0002, 0x0010):
            transfer_syntax = _decode_text(data[value_at : value_at + length])
        pos = value_at + length
    if not transfer_syntax:
        raise TruncatedFile("file meta group lacks a transfer syntax UID")
    if transfer_syntax not in SUPPORTED_TRANSFER_SYNTAXES:
        raise UnsupportedTransferSyntax(transfer_syntax)
    return pos, transfer_syntax


def _sniff_bare_dataset(data: bytes) -> tuple[int, str]:
    """Handle files that begin directly with a data element (no preamble)."""
    if len(data) < 8:
        raise NotDicom("file too short to hold a data element")
    group = _u16(data, 0)
    if group not in {0x0008, 0x0010, 0x0018, 0x0020, 0x0028}:
        raise NotDicom("no DICM magic and no plausible leading tag")
    vr = data[4:6]
    syntax = EXPLICIT_VR_LE if vr in _KNOWN_VRS else IMPLICIT_VR_LE
    return 0, syntax


def parse_file(path) -> DicomSlice:
    """Parse one Part 10 file into a DicomSlice.

    Raises NotDicom, UnsupportedTransferSyntax, TruncatedFile, or
    MissingPixelData. Absent optional tags fall back to defaults (identity
    orientation, zero position, unit spacing, slope 1 / intercept 0).
    """
    data = Path(path).read_bytes()
    if len(data) >= PREAMBLE_LEN + 4 and data[PREAMBLE_LEN : PREAMBLE_LEN + 4] == MAGIC:
        pos, syntax = _parse_meta(data)
    else:
        pos, syntax = _sniff_bare_dataset(data)
    explicit = syntax == EXPLICIT_VR_LE

    n = len(data)
    fields: dict = {}
    raw_pixels = None
    while pos + 8 <= n:
        group = _u16(data, pos)
        elem = _u16(data, pos + 2)
        tag = (group, elem)
        if explicit:
            vr = data[pos + 4 : pos + 6]
            if vr not in _KNOWN_VRS:
                raise TruncatedFile(f"unrecognized VR {vr!r} at offset {pos}")
            if vr in _LONG_VRS:
                if pos + 12 > n:
                    raise TruncatedFile("element header runs past end of file")
                length = _u32(data, pos + 8)
                value_at = pos + 12
            else:
                length = _u16(data, pos + 6)
                value_at = pos + 8
        else:
            length = _u32(data, pos + 4)
            value_at = pos + 8

        if tag == TAG_PIXEL_DATA:
            if length == UNDEFINED_LENGTH:
                raise UnsupportedTransferSyntax("encapsulated pixel data")
            raw_pixels = _decode_pixels(data, value_at, length, fields)
            break  # pixel data is the last element we care about

        if length == UNDEFINED_LENGTH:
            # Skip-by-scan for undefined-length sequences: look for the
            # sequence delimitation item (FFFE,E0DD).
            end = data.find(b"\xfe\xff\xdd\xe0", value_at)
            if end < 0:
                raise TruncatedFile("undefined-length element without delimiter")
            pos = end + 8
            continue
        if value_at + length > n:
            raise TruncatedFile("element value runs past end of file")
        value = data[value_at : value_at + length]
        _store_field(fields, tag, value, explicit, vr if explicit else None)
        pos = value_at + length

    if raw_pixels is None:
        raise MissingPixelData(str(path))

    return DicomSlice(
        rows=fields["rows"],
        cols=fields["cols"],
        pixel_spacing=fields.get("pixel_spacing", (1.0, 1.0)),
        image_position=fields.get("image_position", (0.0, 0.0, 0.0)),
        orientation_cosines=fields.get(
            "orientation_cosines", (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
        ),
        image_type=fields.get("image_type", ()),
        convolution_kernel=fields.get("convolution_kernel"),
        rescale_slope=fields.get("rescale_slope", 1.0),
        rescale_intercept=fields.get("rescale_intercept", 0.0),
        raw_pixels=raw_pixels,
        series_uid=fields.get("series_uid", ""),
        instance_number=fields.get("instance_number"),
        patient_id=fields.get("patient_id", ""),
        patient_age_years=fields.get("patient_age_years"),
        slice_thickness=fields.get("slice_thickness"),
    )


def _store_field(fields: dict, tag, value: bytes, explicit: bool, vr) -> None:
    if tag not in _TAG_VR:
        return
    kind = _TAG_VR[tag]
    if tag == TAG_IMAGE_TYPE:
        fields["image_type"] = tuple(t.upper() for t in _decode_multi(value))
    elif tag == TAG_PATIENT_ID:
        fields["patient_id"] = _decode_text(value).strip()
    elif tag == TAG_PATIENT_AGE:
        fields["patient_age_years"] = _decode_age(value)
    elif tag == TAG_SLICE_THICKNESS:
        vals = _decode_ds(value)
        if vals:
            fields["slice_thickness"] = vals[0]
    elif tag == TAG_CONVOLUTION_KERNEL:
        text = _decode_text(value).strip()
        fields["convolution_kernel"] = text or None
    elif tag == TAG_SERIES_UID:
        fields["series_uid"] = _decode_text(value)
    elif tag == TAG_INSTANCE_NUMBER:
        text = _decode_text(value).strip()
        if text:
            fields["instance_number"] = int(text)
    elif tag == TAG_IMAGE_POSITION:
        vals = _decode_ds(value)
        if len(vals) == 3:
            fields["image_position"] = vals
    elif tag == TAG_IMAGE_ORIENTATION:
        vals = _decode_ds(value)
        if len(vals) == 6:
            fields["orientation_cosines"] = vals
    elif tag == TAG_ROWS:
        fields["rows"] = _u16(value, 0)
    elif tag == TAG_COLS:
        fields["cols"] = _u16(value, 0)
    elif tag == TAG_PIXEL_SPACING:
        vals = _decode_ds(value)
        if len(vals) == 2:
            fields["pixel_spacing"] = vals
    elif tag == TAG_BITS_ALLOCATED:
        fields["bits_allocated"] = _u16(value, 0)
    elif tag == TAG_PIXEL_REPRESENTATION:
        fields["pixel_representation"] = _u16(value, 0)
    elif tag == TAG_RESCALE_INTERCEPT:
        vals = _decode_ds(value)
        if vals:
            fields["rescale_intercept"] = vals[0]
    elif tag == TAG_RESCALE_SLOPE:
        vals = _decode_ds(value)
        if vals:
            fields["rescale_slope"] = vals[0]


def _decode_pixels(data: bytes, value_at: int, length: int, fields: dict) -> np.ndarray:
    if "rows" not in fields or "cols" not in fields:
        raise TruncatedFile("pixel data precedes rows/cols tags")
    bits = fields.get("bits_allocated", 16)
    if bits != 16:
        raise UnsupportedTransferSyntax(f"{bits}-bit pixels are not supported")
    rows, cols = fields["rows"], fields["cols"]
    expected = rows * cols * 2
    if length < expected or value_at + expected > len(data):
        raise TruncatedFile("pixel data shorter than rows*cols*2 bytes")
    signed = fields.get("pixel_representation", 0) == 1
    dtype = "<i2" if signed else "<u2"
    flat = np.frombuffer(data, dtype=dtype, count=rows * cols, offset=value_at)
    return flat.reshape(rows, cols).astype(np.int32)


def scan_directory(root) -> tuple[list[tuple[str, DicomSlice]], list[tuple[str, Exception]]]:
    """Recursively parse every file under root.

    Non-DICOM files are skipped quietly; files that look like DICOM but fail
    to parse are returned in the error list.
    """
    found: list[tuple[str, DicomSlice]] = []
    failures: list[tuple[str, Exception]] = []
    for path in sorted(p for p in Path(root).rglob("*") if p.is_file()):
        try:
            found.append((str(path), parse_file(path)))
        except NotDicom:
            continue
        except Exception as exc:  # noqa: BLE001 - per-file fault isolation
            failures.append((str(path), exc))
    return found, failures


def _series_normal(entries: list[tuple[str, DicomSlice]]) -> np.ndarray:
    # Anchor slice chosen by (instance number, path) so the normal does not
    # depend on input order.
    anchor = min(
        entries,
        key=lambda e: (
            e[1].instance_number if e[1].instance_number is not None else 1 << 30,
            e[0],
        ),
    )
    return anchor[1].normal


def group_series(entries: Iterable[tuple[str, DicomSlice]]) -> list[DicomSeries]:
    """Group (path, slice) pairs by series UID and order slices spatially.

    Slices sort by the projection of their position onto the series slice
    normal; exact ties fall back to instance number, then source path.
    Mixed rows/cols/pixel-spacing within one UID raises InconsistentGeometry.
    """
    by_uid: dict[str, list[tuple[str, DicomSlice]]] = {}
    for path, sl in entries:
        by_uid.setdefault(sl.series_uid, []).append((str(path), sl))

    series: list[DicomSeries] = []
    for uid in sorted(by_uid):
        group = by_uid[uid]
        shapes = {(s.rows, s.cols, s.pixel_spacing) for _, s in group}
        if len(shapes) > 1:
            raise InconsistentGeometry(f"series {uid or '<blank>'} mixes geometries")
        normal = _series_normal(group)

        def sort_key(entry: tuple[str, DicomSlice]):
            path, sl = entry
            proj = float(np.dot(np.asarray(sl.image_position), normal))
            inst = sl.instance_number if sl.instance_number is not None else 1 << 30
            return (proj, inst, path)

        ordered = sorted(group, key=sort_key)
        ages = [s.patient_age_years for _, s in ordered if s.patient_age_years is not None]
        pids = [s.patient_id for _, s in ordered if s.patient_id]
        series.append(
            DicomSeries(
                series_uid=uid,
                slices=[s for _, s in ordered],
                source_paths=[p for p, _ in ordered],
                patient_id=pids[0] if pids else "",
                patient_age_years=ages[0] if ages else None,
            )
        )
    return series


def load_age_sidecar(path) -> dict[str, int]:
    """Read the optional per-series age file: one 'series_uid,age' per line.

    Blank lines and '#' comments are ignored. Whitespace around either field
    is tolerated. Malformed lines raise ValueError.
    """
    ages: dict[str, int] = {}
    p = Path(path)
    if not p.exists():
        return ages
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [part.strip() for part in line.replace(",", " ").split()]
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'series_uid, age'")
        ages[parts[0]] = int(parts[1])
    return ages
