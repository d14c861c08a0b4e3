"""Deterministic synthetic head scans for exercising the pipeline.

Each phantom is an ellipsoidal skull shell (about 1000 HU) around a brain
interior (20-45 HU) with an off-center ventricle (about 5 HU) in air
(-1000 HU). The ventricle sits forward of center, which breaks the in-plane
180-degree symmetry that registration QC has to catch. Matching MRI-like
templates use inverted tissue contrast, with the older-age template carrying
enlarged ventricles.

The same spec always produces byte-identical files. DICOM output is explicit
VR little endian, written by this module's own encoder; decimal-string
fields are quantized before use so a write-parse cycle reproduces every
declared field bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .registration import make_affine
from .volume import Volume, write_nifti

CT_SOP_CLASS = "1.2.840.10008.5.1.4.1.1.2"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
UID_ROOT = "1.2.826.0.1.3680043.9901"

# Canonical head geometry, absolute mm (slice, row, col semi-axes). Shape
# alone cannot pin down a pose: ellipsoids are closed under linear maps, so
# with concentric structures only, a small rotation is indistinguishable
# from a scale/shear change. The angled ventricle horns, the anterior air
# sinus and the off-midline calcification are what make the affine
# well-posed; they are deliberately non-concentric and not axis-aligned.
SKULL_OUTER_MM = (48.0, 72.0, 60.0)
SKULL_THICKNESS_MM = 6.0
# Two lateral horns forming a V that opens backward.
VENTRICLE_MM = (9.0, 17.0, 8.0)
VENTRICLE_OLDER_FACTOR = 1.45
VENTRICLE_CENTER_MM = (0.0, -8.0, 11.0)  # right horn; left is col-mirrored
VENTRICLE_ANGLE_DEG = 20.0  # in-plane toe-in of each horn
SINUS_CENTER_MM = (-16.0, -40.0, 0.0)  # air pocket low and anterior
SINUS_MM = (13.0, 11.0, 11.0)
CALC_CENTER_MM = (8.0, 16.0, 14.0)  # dense nodule, off-midline
CALC_MM = (6.0, 5.0, 4.0)
# Large low-contrast deep structure, tilted off every grid axis. Its volume
# is what matters: a big oblique blob moves many voxels per degree, giving
# small rotations a metric gradient the tiny features cannot.
NUCLEUS_CENTER_MM = (6.0, 10.0, -8.0)
NUCLEUS_MM = (18.0, 14.0, 10.0)
NUCLEUS_TILT_DEG = (25.0, -20.0, 30.0)

HU_AIR = -1000.0
HU_SKULL = 1000.0
HU_VENTRICLE = 5.0
HU_CALC = 350.0
# MRI-like template values, arbitrary units
MR_AIR = 2.0
MR_SKULL = 15.0
MR_VENTRICLE = 40.0
MR_CALC = 60.0

CATEGORIES = (
    "axial_soft",
    "axial_bone",
    "localiser",
    "split_base",
    "split_vault",
    "sagittal",
    "coronal",
    "mixed_orientation",
    "tilted_axial",
    "flipped_axial",
)

_ORIENT_AXIAL = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
_ORIENT_SAGITTAL = (0.0, 1.0, 0.0, 0.0, 0.0, -1.0)
_ORIENT_CORONAL = (1.0, 0.0, 0.0, 0.0, 0.0, -1.0)

_BONE_KERNELS = ("H60S", "BONEPLUS", "H70H", "BONE")


@dataclass
class PhantomSpec:
    """Everything needed to rasterize and write one synthetic series."""

    category: str
    seed: int
    series_uid: str
    rows: int = 96
    cols: int = 96
    n_slices: int = 30
    pixel_spacing: float = 2.25
    slice_thickness: float = 5.0
    image_type: tuple[str, ...] = ("ORIGINAL", "PRIMARY", "AXIAL")
    convolution_kernel: Optional[str] = "H31S"
    orientation: str = "axial"  # axial | sagittal | coronal
    tilt_deg: float = 0.0
    z_offset_frac: float = 0.0  # head center offset along z, fraction of az
    older_anatomy: bool = False
    noise_sigma: float = 0.0
    patient_id: str = ""
    patient_age: Optional[int] = None  # written as the DICOM age tag if set
    true_transform: Optional[np.ndarray] = None  # 4x4 mm, canonical -> scan
    extra_sagittal_slice: bool = False  # mixed-orientation series
    # 1 disables box averaging; fine for triage corpora, where only tags and
    # slice counts matter, and 27x cheaper than the registration-grade 3.
    supersample: int = 3


def _quantize(value: float) -> float:
    """Round-trip a float through the decimal-string form written to DICOM."""
    return float(f"{value:.10g}")


def _head_values(
    points_mm: np.ndarray,
    contrast: str,
    older: bool,
) -> np.ndarray:
    """Evaluate the head model at (slice,row,col) mm points centered on the
    head. Returns intensities of the requested contrast."""
    az, ay, ax = SKULL_OUTER_MM
    t = SKULL_THICKNESS_MM
    iz, iy, ix = az - t, ay - t, ax - t
    vz, vy, vx = VENTRICLE_MM
    if older:
        vz, vy, vx = (v * VENTRICLE_OLDER_FACTOR for v in (vz, vy, vx))

    z, y, x = points_mm[..., 0], points_mm[..., 1], points_mm[..., 2]
    q_out = (z / az) ** 2 + (y / ay) ** 2 + (x / ax) ** 2
    q_in = (z / iz) ** 2 + (y / iy) ** 2 + (x / ix) ** 2

    cz, cy, cx = VENTRICLE_CENTER_MM
    ang = np.radians(VENTRICLE_ANGLE_DEG)
    q_vent = np.full(z.shape, np.inf)
    for side in (1.0, -1.0):
        dy = y - cy
        dx = x - side * cx
        # toe the horn in toward the midline
        c, s = np.cos(ang), np.sin(side * ang)
        ry = c * dy + s * dx
        rx = -s * dy + c * dx
        q = ((z - cz) / vz) ** 2 + (ry / vy) ** 2 + (rx / vx) ** 2
        q_vent = np.minimum(q_vent, q)

    sz_, sy_, sx_ = SINUS_CENTER_MM
    gz, gy, gx = SINUS_MM
    q_sinus = ((z - sz_) / gz) ** 2 + ((y - sy_) / gy) ** 2 + ((x - sx_) / gx) ** 2
    kz, ky, kx = CALC_CENTER_MM
    ez, ey, ex = CALC_MM
    q_calc = ((z - kz) / ez) ** 2 + ((y - ky) / ey) ** 2 + ((x - kx) / ex) ** 2

    nz_, ny_, nx_ = NUCLEUS_CENTER_MM
    rot = make_affine(rotations_deg=NUCLEUS_TILT_DEG)[:3, :3]
    local = np.stack([z - nz_, y - ny_, x - nx_], axis=-1) @ rot
    uz, uy, ux = NUCLEUS_MM
    q_nuc = (local[..., 0] / uz) ** 2 + (local[..., 1] / uy) ** 2 + (local[..., 2] / ux) ** 2

    if contrast == "ct":
        air, skull, vent, calc = HU_AIR, HU_SKULL, HU_VENTRICLE, HU_CALC
        brain = 20.0 + 25.0 * np.clip(1.0 - q_in, 0.0, 1.0)
        nucleus_delta = 8.0
    else:
        air, skull, vent, calc = MR_AIR, MR_SKULL, MR_VENTRICLE, MR_CALC
        brain = 130.0 + 80.0 * np.clip(1.0 - q_in, 0.0, 1.0)
        nucleus_delta = -25.0

    out = np.full(z.shape, air, dtype=np.float64)
    inside = q_out <= 1.0
    out[inside & (q_in >= 1.0)] = skull
    interior = inside & (q_in < 1.0)
    out[interior] = brain[interior]
    in_nuc = interior & (q_nuc <= 1.0)
    out[in_nuc] += nucleus_delta
    out[interior & (q_vent <= 1.0)] = vent
    out[interior & (q_sinus <= 1.0)] = air
    out[interior & (q_calc <= 1.0)] = calc
    return out


def volume_center_mm(shape: Sequence[int], spacing: Sequence[float]) -> np.ndarray:
    """(slice, row, col) mm coordinates of the grid center."""
    return (np.asarray(shape, dtype=float) - 1.0) / 2.0 * np.asarray(spacing, dtype=float)


def rasterize_head(
    shape: tuple[int, int, int],
    spacing: tuple[float, float, float],
    contrast: str = "ct",
    older: bool = False,
    transform: Optional[np.ndarray] = None,
    z_offset_mm: float = 0.0,
    supersample: int = 3,
) -> np.ndarray:
    """Sample the head model on a voxel grid.

    The canonical head sits at the volume center (shifted along the slice
    axis by z_offset_mm). transform, if given, is a literal 4x4 map on
    (slice, row, col) mm coordinates taking canonical points to scan points;
    voxels are filled through the inverse mapping so the planted pose is
    exact, not interpolated.

    Each voxel is the box average of supersample^3 sub-points. Tissue
    boundaries then carry partial-volume ramps the way scanner output does;
    with single center-point sampling the boundaries alias to binary steps
    and sub-voxel pose information is simply absent from the volume.
    """
    ns, h, w = shape
    sz, sr, sc = spacing
    center = volume_center_mm(shape, spacing) + np.array([z_offset_mm, 0.0, 0.0])
    inv = trans = None
    if transform is not None:
        m = np.asarray(transform, dtype=float)
        inv = np.linalg.inv(m[:3, :3])
        trans = m[:3, 3]
    ss = max(1, int(supersample))
    subs = (np.arange(ss) + 0.5) / ss - 0.5
    acc = np.zeros(shape, dtype=np.float64)
    for dz in subs:
        for dy in subs:
            for dx in subs:
                kk, ii, jj = np.meshgrid(
                    (np.arange(ns) + dz) * sz,
                    (np.arange(h) + dy) * sr,
                    (np.arange(w) + dx) * sc,
                    indexing="ij",
                )
                pts = np.stack([kk, ii, jj], axis=-1)
                if inv is not None:
                    pts = (pts - trans) @ inv.T
                acc += _head_values(pts - center, contrast, older)
    return acc / ss**3


def rasterize_ellipse_plane(
    rows: int,
    cols: int,
    center_vox: tuple[float, float],
    semi_axes_vox: tuple[float, float],
    inner_fraction: float = 0.94,
) -> np.ndarray:
    """A single-slice skull ring with explicit voxel geometry, for tests that
    need exact analytic extents."""
    cy, cx = center_vox
    ay, ax = semi_axes_vox
    ii, jj = np.meshgrid(np.arange(rows, dtype=float), np.arange(cols, dtype=float),
                         indexing="ij")
    q_out = ((ii - cy) / ay) ** 2 + ((jj - cx) / ax) ** 2
    q_in = ((ii - cy) / (ay * inner_fraction)) ** 2 + ((jj - cx) / (ax * inner_fraction)) ** 2
    plane = np.full((rows, cols), HU_AIR, dtype=np.float64)
    plane[(q_out <= 1.0) & (q_in >= 1.0)] = HU_SKULL
    plane[q_in < 1.0] = 30.0
    return plane


def analytic_skull_bounds_vox(spec: PhantomSpec) -> tuple[int, int, int, int]:
    """Continuous skull extent of a canonical axial phantom, in voxel indices
    (row_min, row_max, col_min, col_max)."""
    _, ay, ax = SKULL_OUTER_MM
    sr = sc = spec.pixel_spacing
    cy = (spec.rows - 1) / 2.0
    cx = (spec.cols - 1) / 2.0
    return (
        int(np.ceil(cy - ay / sr - 1e-9)),
        int(np.floor(cy + ay / sr + 1e-9)),
        int(np.ceil(cx - ax / sc - 1e-9)),
        int(np.floor(cx + ax / sc + 1e-9)),
    )


# --- DICOM encoding ---------------------------------------------------------

_LONG_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}


def _element(group: int, elem: int, vr: bytes, value: bytes) -> bytes:
    if len(value) % 2:
        pad = b"\x00" if vr in (b"UI", b"OB") else b" "
        value += pad
    head = struct.pack("<HH", group, elem)
    if vr in _LONG_VRS:
        return head + vr + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + vr + struct.pack("<H", len(value)) + value


def _text(v: str) -> bytes:
    return v.encode("ascii")


def _ds(*values: float) -> bytes:
    return _text("\\".join(f"{v:.10g}" for v in values))


def write_ct_slice(
    path,
    *,
    series_uid: str,
    sop_uid: str,
    instance_number: int,
    pixels: np.ndarray,  # int16 stored values
    pixel_spacing: tuple[float, float],
    position: tuple[float, float, float],  # patient (x, y, z) mm
    orientation: Sequence[float],
    image_type: Sequence[str] = (),
    convolution_kernel: Optional[str] = None,
    slice_thickness: Optional[float] = None,
    rescale_slope: float = 1.0,
    rescale_intercept: float = -1024.0,
    patient_id: str = "",
    patient_age: Optional[int] = None,
) -> None:
    """Write one explicit-VR little-endian CT slice."""
    rows, cols = pixels.shape

    meta = b"".join(
        [
            _element(0x0002, 0x0001, b"OB", b"\x00\x01"),
            _element(0x0002, 0x0002, b"UI", _text(CT_SOP_CLASS)),
            _element(0x0002, 0x0003, b"UI", _text(sop_uid)),
            _element(0x0002, 0x0010, b"UI", _text(EXPLICIT_VR_LE)),
        ]
    )
    header = (
        b"\x00" * 128
        + b"DICM"
        + _element(0x0002, 0x0000, b"UL", struct.pack("<I", len(meta)))
        + meta
    )

    body = []
    if image_type:
        body.append(_element(0x0008, 0x0008, b"CS", _text("\\".join(image_type))))
    body.append(_element(0x0008, 0x0016, b"UI", _text(CT_SOP_CLASS)))
    body.append(_element(0x0008, 0x0018, b"UI", _text(sop_uid)))
    if patient_id:
        body.append(_element(0x0010, 0x0020, b"LO", _text(patient_id)))
    if patient_age is not None:
        body.append(_element(0x0010, 0x1010, b"AS", _text(f"{patient_age:03d}Y")))
    if slice_thickness is not None:
        body.append(_element(0x0018, 0x0050, b"DS", _ds(slice_thickness)))
    if convolution_kernel:
        body.append(_element(0x0018, 0x1210, b"SH", _text(convolution_kernel)))
    body.append(_element(0x0020, 0x000E, b"UI", _text(series_uid)))
    body.append(_element(0x0020, 0x0013, b"IS", _text(str(instance_number))))
    body.append(_element(0x0020, 0x0032, b"DS", _ds(*position)))
    body.append(_element(0x0020, 0x0037, b"DS", _ds(*orientation)))
    body.append(_element(0x0028, 0x0010, b"US", struct.pack("<H", rows)))
    body.append(_element(0x0028, 0x0011, b"US", struct.pack("<H", cols)))
    body.append(_element(0x0028, 0x0030, b"DS", _ds(*pixel_spacing)))
    body.append(_element(0x0028, 0x0100, b"US", struct.pack("<H", 16)))
    body.append(_element(0x0028, 0x0101, b"US", struct.pack("<H", 16)))
    body.append(_element(0x0028, 0x0102, b"US", struct.pack("<H", 15)))
    body.append(_element(0x0028, 0x0103, b"US", struct.pack("<H", 1)))
    body.append(_element(0x0028, 0x1052, b"DS", _ds(rescale_intercept)))
    body.append(_element(0x0028, 0x1053, b"DS", _ds(rescale_slope)))
    body.append(
        _element(0x7FE0, 0x0010, b"OW", pixels.astype("<i2", copy=False).tobytes())
    )

    Path(path).write_bytes(header + b"".join(body))


# --- series generation ------------------------------------------------------

def _tilted_orientation(tilt_deg: float) -> tuple[float, ...]:
    t = np.radians(tilt_deg)
    row = (1.0, 0.0, 0.0)
    col = (0.0, float(np.cos(t)), float(np.sin(t)))
    return tuple(_quantize(v) for v in row + col)


def _orientation_for(spec: PhantomSpec) -> tuple[float, ...]:
    if spec.tilt_deg:
        return _tilted_orientation(spec.tilt_deg)
    return {
        "axial": _ORIENT_AXIAL,
        "sagittal": _ORIENT_SAGITTAL,
        "coronal": _ORIENT_CORONAL,
    }[spec.orientation]


def _position_for(spec: PhantomSpec, index: int) -> tuple[float, float, float]:
    step = _quantize(index * spec.slice_thickness)
    if spec.orientation == "sagittal":
        return (step, 0.0, 0.0)
    if spec.orientation == "coronal":
        return (0.0, step, 0.0)
    return (0.0, 0.0, step)


def build_scan_volume(spec: PhantomSpec) -> np.ndarray:
    """HU volume for a spec, before quantization to stored values."""
    shape = (spec.n_slices, spec.rows, spec.cols)
    sp = (spec.slice_thickness, spec.pixel_spacing, spec.pixel_spacing)
    z_off = spec.z_offset_frac * SKULL_OUTER_MM[0]
    hu = rasterize_head(
        shape, sp, contrast="ct", older=spec.older_anatomy,
        transform=spec.true_transform, z_offset_mm=z_off,
        supersample=spec.supersample,
    )
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        hu = hu + rng.normal(0.0, spec.noise_sigma, hu.shape)
    return hu


def generate_scan(spec: PhantomSpec, out_dir) -> dict:
    """Write one series of .dcm files; returns the ground-truth label record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hu = build_scan_volume(spec)
    stored = np.rint(hu + 1024.0).astype(np.int16)  # intercept -1024, slope 1
    orient = _orientation_for(spec)
    spacing = (_quantize(spec.pixel_spacing), _quantize(spec.pixel_spacing))

    n_files = spec.n_slices + (1 if spec.extra_sagittal_slice else 0)
    for k in range(spec.n_slices):
        write_ct_slice(
            out / f"slice_{k:03d}.dcm",
            series_uid=spec.series_uid,
            sop_uid=f"{spec.series_uid}.{k + 1}",
            instance_number=k + 1,
            pixels=stored[k],
            pixel_spacing=spacing,
            position=_position_for(spec, k),
            orientation=orient,
            image_type=spec.image_type,
            convolution_kernel=spec.convolution_kernel,
            slice_thickness=_quantize(spec.slice_thickness),
            patient_id=spec.patient_id,
            patient_age=spec.patient_age,
        )
    if spec.extra_sagittal_slice:
        k = spec.n_slices
        write_ct_slice(
            out / f"slice_{k:03d}.dcm",
            series_uid=spec.series_uid,
            sop_uid=f"{spec.series_uid}.{k + 1}",
            instance_number=k + 1,
            pixels=stored[spec.n_slices // 2],
            pixel_spacing=spacing,
            position=(40.0, 0.0, 0.0),
            orientation=_ORIENT_SAGITTAL,
            image_type=spec.image_type,
            convolution_kernel=spec.convolution_kernel,
            slice_thickness=_quantize(spec.slice_thickness),
            patient_id=spec.patient_id,
            patient_age=spec.patient_age,
        )

    bounds = None
    if spec.orientation == "axial" and spec.true_transform is None and spec.z_offset_frac == 0:
        bounds = analytic_skull_bounds_vox(spec)
    return {
        "series_uid": spec.series_uid,
        "category": spec.category,
        "n_slices": spec.n_slices,
        "n_files": n_files,
        "rows": spec.rows,
        "cols": spec.cols,
        "age": spec.patient_age,
        "path": str(out),
        "true_transform": (
            None if spec.true_transform is None
            else [float(v) for v in np.asarray(spec.true_transform).ravel()]
        ),
        "skull_bounds_vox": bounds,
    }


def make_spec(category: str, seed: int, serial: int,
              base_overrides: Optional[dict] = None, **overrides) -> PhantomSpec:
    """Build the spec for one corpus entry of the given category.

    base_overrides adjust the shared defaults (grid size, spacing,
    supersampling) before the category rules run, so category-defining
    fields like a localiser's slice count cannot be clobbered by them;
    keyword overrides are applied last and win unconditionally.
    """
    uid = f"{UID_ROOT}.{seed}.{serial}"
    spec = PhantomSpec(
        category=category,
        seed=seed * 1000 + serial,
        series_uid=uid,
        patient_id=f"PH{seed}_{serial:03d}",
    )
    if base_overrides:
        spec = replace(spec, **base_overrides)
    if category == "axial_bone":
        spec = replace(
            spec, convolution_kernel=_BONE_KERNELS[serial % len(_BONE_KERNELS)]
        )
    elif category == "localiser":
        if serial % 2 == 0:
            spec = replace(
                spec, n_slices=1,
                image_type=("ORIGINAL", "PRIMARY", "LOCALIZER"),
            )
        else:
            # the other localiser signature: blank image type, under 3 slices
            spec = replace(spec, n_slices=2, image_type=())
    elif category == "split_base":
        spec = replace(spec, n_slices=12, z_offset_frac=0.75)
    elif category == "split_vault":
        spec = replace(spec, n_slices=12, z_offset_frac=-0.75)
    elif category == "sagittal":
        spec = replace(spec, orientation="sagittal")
    elif category == "coronal":
        spec = replace(spec, orientation="coronal")
    elif category == "mixed_orientation":
        spec = replace(spec, extra_sagittal_slice=True)
    elif category == "tilted_axial":
        spec = replace(spec, tilt_deg=8.0 + 3.0 * (serial % 5))
    elif category == "flipped_axial":
        center = volume_center_mm(
            (spec.n_slices, spec.rows, spec.cols),
            (spec.slice_thickness, spec.pixel_spacing, spec.pixel_spacing),
        )
        flip = make_affine(rotations_deg=(180.0, 0.0, 0.0), about=center)
        spec = replace(spec, true_transform=flip)
    elif category != "axial_soft":
        raise ValueError(f"unknown phantom category {category!r}")
    return replace(spec, **overrides) if overrides else spec


def generate_templates(out_dir, *, shape=(64, 64, 64),
                       spacing=(4.0, 4.0, 4.0)) -> dict[str, str]:
    """Write the younger/older MRI-like template volumes as NIfTI files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, older in (("younger", False), ("older", True)):
        data = rasterize_head(shape, spacing, contrast="mri", older=older)
        path = out / f"{name}.nii"
        write_nifti(Volume(data.astype(np.float32), spacing), path)
        paths[name] = str(path)
    return paths


def template_volume(older: bool = False, *, shape=(64, 64, 64),
                    spacing=(4.0, 4.0, 4.0)) -> Volume:
    data = rasterize_head(shape, spacing, contrast="mri", older=older)
    return Volume(data.astype(np.float32), spacing)


def registration_target(
    transform: np.ndarray,
    *,
    shape=(64, 64, 64),
    spacing=(4.0, 4.0, 4.0),
    older: bool = False,
) -> Volume:
    """CT-contrast head with a planted pose, for transform-recovery tests."""
    data = rasterize_head(shape, spacing, contrast="ct", older=older,
                          transform=transform)
    return Volume(data.astype(np.float32), spacing)


def generate_corpus(
    out_dir,
    per_category: int = 6,
    seed: int = 7,
    categories: Sequence[str] = CATEGORIES,
    base_overrides: Optional[dict] = None,
) -> dict:
    """Write a labeled corpus: DICOM tree, age sidecar, templates, labels.

    Layout under out_dir:
      dicom/<serial>_<category>/slice_*.dcm
      dicom/ages.txt          age sidecar for odd serials
      templates/younger.nii, older.nii
      labels.jsonl            one ground-truth record per series
    """
    out = Path(out_dir)
    dicom_root = out / "dicom"
    dicom_root.mkdir(parents=True, exist_ok=True)

    labels = []
    sidecar_lines = []
    serial = 0
    for category in categories:
        for i in range(per_category):
            serial += 1
            age = 55 + (7 * serial) % 40
            spec = make_spec(category, seed, serial, base_overrides=base_overrides)
            if serial % 2 == 0:
                spec = replace(spec, patient_age=age)
            else:
                sidecar_lines.append(f"{spec.series_uid}, {age}")
            record = generate_scan(
                spec, dicom_root / f"{serial:03d}_{category}"
            )
            record["age"] = age
            record["serial"] = serial
            labels.append(record)

    (dicom_root / "ages.txt").write_text(
        "# series_uid, age\n" + "\n".join(sidecar_lines) + "\n"
    )
    template_paths = generate_templates(out / "templates")
    labels_path = out / "labels.jsonl"
    with open(labels_path, "w") as fh:
        for record in labels:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return {
        "dicom_dir": str(dicom_root),
        "template_dir": str(out / "templates"),
        "labels_path": str(labels_path),
        "n_series": serial,
        "templates": template_paths,
    }
