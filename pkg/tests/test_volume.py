"""Volume assembly and the NIfTI-1 reader/writer."""

import struct

import numpy as np
import pytest

from conftest import make_series, make_slice
from oracles import interp_linear

from ctprep.dicom_io import DicomSeries
from ctprep.errors import InconsistentGeometry, SingleSliceNoSpacing, UnsupportedVariant
from ctprep.volume import Volume, assemble, read_nifti, write_nifti


def test_assemble_applies_calibration():
    series = make_series(n_slices=3)
    for k, sl in enumerate(series.slices):
        sl.raw_pixels[:] = 1024 + 10 * k  # stored; HU = stored - 1024
    vol = assemble(series)
    assert vol.data.dtype == np.float32
    assert np.all(vol.data[0] == 0.0)
    assert np.all(vol.data[1] == 10.0)
    assert np.all(vol.data[2] == 20.0)
    assert vol.spacing == (5.0, 1.0, 1.0)


def test_assemble_uniform_gaps_no_resample():
    series = make_series(n_slices=4, spacing_mm=2.5)
    for k, sl in enumerate(series.slices):
        sl.raw_pixels[:] = k * 7
    vol = assemble(series)
    assert vol.n_slices == 4
    # Values pass through untouched, only calibrated.
    for k in range(4):
        assert np.all(vol.data[k] == k * 7 - 1024.0)


def test_assemble_resamples_irregular_gaps():
    # Gaps 4 and 8: resample at the minimum gap onto z = 0, 4, 8, 12.
    zs = [0.0, 4.0, 12.0]
    slices = []
    for k, z in enumerate(zs):
        sl = make_slice(instance_number=k + 1, image_position=(0.0, 0.0, z))
        sl.raw_pixels[:] = 1024 + 40 * k  # HU 0, 40, 80
        slices.append(sl)
    series = DicomSeries(series_uid="1.2", slices=slices,
                         source_paths=["a", "b", "c"])
    vol = assemble(series)
    assert vol.n_slices == 4
    assert vol.spacing[0] == 4.0
    expected = [interp_linear(zs, [0.0, 40.0, 80.0], z) for z in (0, 4, 8, 12)]
    got = [float(vol.data[k, 0, 0]) for k in range(4)]
    assert got == pytest.approx(expected)
    # Original slice locations keep their exact values.
    assert got[0] == 0.0 and got[1] == 40.0 and got[3] == 80.0


def test_assemble_within_tolerance_keeps_slices():
    # 0.5% wobble sits inside the 1% gap tolerance: no resampling.
    zs = [0.0, 4.0, 8.02]
    slices = []
    for k, z in enumerate(zs):
        sl = make_slice(instance_number=k + 1, image_position=(0.0, 0.0, z))
        sl.raw_pixels[:] = k
        slices.append(sl)
    series = DicomSeries(series_uid="1.2", slices=slices,
                         source_paths=["a", "b", "c"])
    vol = assemble(series)
    assert vol.n_slices == 3
    assert [int(v) for v in vol.data[:, 0, 0] + 1024] == [0, 1, 2]


def test_assemble_single_slice_uses_thickness():
    sl = make_slice(slice_thickness=3.5)
    series = DicomSeries(series_uid="1", slices=[sl], source_paths=["a"])
    vol = assemble(series)
    assert vol.n_slices == 1
    assert vol.spacing[0] == 3.5


def test_assemble_single_slice_without_thickness():
    sl = make_slice(slice_thickness=None)
    series = DicomSeries(series_uid="1", slices=[sl], source_paths=["a"])
    with pytest.raises(SingleSliceNoSpacing):
        assemble(series)


def test_assemble_duplicate_positions_rejected():
    slices = [make_slice(instance_number=k + 1) for k in range(2)]
    series = DicomSeries(series_uid="1", slices=slices, source_paths=["a", "b"])
    with pytest.raises(InconsistentGeometry):
        assemble(series)


def test_nifti_round_trip_bit_exact(tmp_path, rng):
    data = rng.normal(size=(7, 11, 13)).astype(np.float32)
    vol = Volume(data, (4.5, 1.25, 0.75), origin=(12.0, 0.0, 0.0))
    p = tmp_path / "v.nii"
    write_nifti(vol, p)
    back = read_nifti(p)
    assert back.data.tobytes() == data.tobytes()
    assert back.spacing == vol.spacing
    assert back.origin == (12.0, 0.0, 0.0)


def test_nifti_header_layout(tmp_path):
    vol = Volume(np.zeros((40, 500, 400), dtype=np.float32), (5.0, 1.0, 1.0))
    p = tmp_path / "v.nii"
    write_nifti(vol, p)
    blob = p.read_bytes()
    # sizeof_hdr is the little-endian bytes of 348 and magic is "n+1".
    assert blob[:4] == struct.pack("<i", 348)
    assert blob[344:348] == b"n+1\x00"
    dim = struct.unpack_from("<8h", blob, 40)
    assert dim[:4] == (3, 400, 500, 40)  # fastest-varying first: w, h, slices
    assert struct.unpack_from("<h", blob, 70)[0] == 16  # float32 code
    assert struct.unpack_from("<f", blob, 108)[0] == 352.0  # vox_offset
    pixdim = struct.unpack_from("<8f", blob, 76)
    assert pixdim[1:4] == (1.0, 1.0, 5.0)
    # Body length: header 348 + 4 extension bytes + w*h*ns floats.
    assert len(blob) == 352 + 400 * 500 * 40 * 4


def test_nifti_rejects_detached_header(tmp_path):
    vol = Volume(np.zeros((2, 3, 4), dtype=np.float32), (1, 1, 1))
    p = tmp_path / "v.nii"
    write_nifti(vol, p)
    blob = bytearray(p.read_bytes())
    blob[344:348] = b"ni1\x00"
    p.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVariant):
        read_nifti(p)


def test_nifti_rejects_big_endian(tmp_path):
    vol = Volume(np.zeros((2, 3, 4), dtype=np.float32), (1, 1, 1))
    p = tmp_path / "v.nii"
    write_nifti(vol, p)
    blob = bytearray(p.read_bytes())
    blob[0:4] = struct.pack(">i", 348)
    p.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVariant):
        read_nifti(p)


def test_nifti_rejects_other_datatypes(tmp_path):
    vol = Volume(np.zeros((2, 3, 4), dtype=np.float32), (1, 1, 1))
    p = tmp_path / "v.nii"
    write_nifti(vol, p)
    blob = bytearray(p.read_bytes())
    struct.pack_into("<h", blob, 70, 4)  # int16 code
    p.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVariant):
        read_nifti(p)


def test_nifti_rejects_truncated_body(tmp_path):
    vol = Volume(np.ones((2, 3, 4), dtype=np.float32), (1, 1, 1))
    p = tmp_path / "v.nii"
    write_nifti(vol, p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(UnsupportedVariant):
        read_nifti(p)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2), dtype=np.float32), (1, 1, 1))  # not 3-D
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2), dtype=np.float32), (0, 1, 1))  # bad spacing
    v = Volume(np.zeros((2, 3, 4), dtype=np.float32), (1, 1, 1))
    assert (v.n_slices, v.height, v.width) == (2, 3, 4)
    c = v.copy()
    c.data[0, 0, 0] = 9.0
    assert v.data[0, 0, 0] == 0.0
