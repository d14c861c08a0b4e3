"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from ctprep.dicom_io import DicomSlice, DicomSeries
from ctprep.phantom import write_ct_slice

AXIAL_COSINES = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
SAGITTAL_COSINES = (0.0, 1.0, 0.0, 0.0, 0.0, 1.0)


def make_slice(**overrides) -> DicomSlice:
    """In-memory slice with sane CT defaults; override any field."""
    rows = overrides.pop("rows", 8)
    cols = overrides.pop("cols", 8)
    kw = dict(
        rows=rows,
        cols=cols,
        pixel_spacing=(1.0, 1.0),
        image_position=(0.0, 0.0, 0.0),
        orientation_cosines=AXIAL_COSINES,
        image_type=("ORIGINAL", "PRIMARY", "AXIAL"),
        convolution_kernel="H31S",
        rescale_slope=1.0,
        rescale_intercept=-1024.0,
        raw_pixels=np.zeros((rows, cols), dtype=np.int32),
        series_uid="1.2.3.4",
        instance_number=1,
    )
    kw.update(overrides)
    return DicomSlice(**kw)


def make_series(n_slices=5, uid="1.2.3.4", spacing_mm=5.0, start_z=0.0,
                **slice_overrides) -> DicomSeries:
    slices = [
        make_slice(
            series_uid=uid,
            instance_number=k + 1,
            image_position=(0.0, 0.0, start_z + k * spacing_mm),
            **slice_overrides,
        )
        for k in range(n_slices)
    ]
    return DicomSeries(
        series_uid=uid,
        slices=slices,
        source_paths=[f"<mem:{k}>" for k in range(n_slices)],
    )


def write_series_files(out_dir, n_slices=4, uid="9.8.7", rows=16, cols=16,
                       pixel_values=None, spacing=(1.5, 1.5), thickness=5.0,
                       orientation=AXIAL_COSINES, image_type=("ORIGINAL", "PRIMARY", "AXIAL"),
                       kernel="H31S", patient_age=None, patient_id="PAT01"):
    """Write a small explicit-VR series to disk; returns the file paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(n_slices):
        if pixel_values is None:
            px = np.full((rows, cols), 100 + k, dtype=np.int16)
        else:
            px = np.asarray(pixel_values[k], dtype=np.int16)
        p = out_dir / f"s{k:03d}.dcm"
        write_ct_slice(
            p,
            series_uid=uid,
            sop_uid=f"{uid}.{k + 1}",
            instance_number=k + 1,
            pixels=px,
            pixel_spacing=spacing,
            position=(0.0, 0.0, k * thickness),
            orientation=orientation,
            image_type=image_type,
            convolution_kernel=kernel,
            slice_thickness=thickness,
            patient_id=patient_id,
            patient_age=patient_age,
        )
        paths.append(p)
    return paths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
