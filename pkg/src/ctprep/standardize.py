"""Crop to the head, normalize in-plane size, and scale intensities.

The chain is crop -> pad-or-resize -> window, producing volumes of exactly
n_slices x 500 x 400 with every voxel in [0, 1]. One 2-D bounding box is
shared by all slices of a volume so the head cannot drift between slices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoHeadFound
from .volume import Volume

TARGET_HEIGHT = 500
TARGET_WIDTH = 400
DEFAULT_BONE_THRESHOLD_HU = 300.0
DEFAULT_CROP_MARGIN = 5
DEFAULT_HU_WINDOW_MAX = 100.0


@dataclass(frozen=True)
class CropBox:
    """Inclusive in-plane voxel bounds."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self) -> None:
        if self.row_min < 0 or self.col_min < 0:
            raise ValueError("crop box indices must be non-negative")
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError("crop box is empty")

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1


def find_head_box(
    volume: Volume,
    bone_threshold: float = DEFAULT_BONE_THRESHOLD_HU,
    margin: int = DEFAULT_CROP_MARGIN,
) -> CropBox:
    """Bounding box of above-threshold voxels pooled over every slice.

    Skull is by far the brightest structure in a head CT, so the box of
    voxels at or above the bone threshold encloses the head. The union
    across slices means the one box fits the head in each slice. The margin
    expands the box but never past the volume bounds.
    """
    mask = volume.data >= bone_threshold
    row_hits = np.any(mask, axis=(0, 2))
    col_hits = np.any(mask, axis=(0, 1))
    if not row_hits.any():
        raise NoHeadFound(
            f"no voxel reaches {bone_threshold} HU in a "
            f"{volume.n_slices}x{volume.height}x{volume.width} volume"
        )
    rows = np.flatnonzero(row_hits)
    cols = np.flatnonzero(col_hits)
    return CropBox(
        row_min=max(int(rows[0]) - margin, 0),
        row_max=min(int(rows[-1]) + margin, volume.height - 1),
        col_min=max(int(cols[0]) - margin, 0),
        col_max=min(int(cols[-1]) + margin, volume.width - 1),
    )


def crop(volume: Volume, box: CropBox) -> Volume:
    """Cut the box out of every slice. Values and spacing are untouched."""
    if box.row_max >= volume.height or box.col_max >= volume.width:
        raise ValueError("crop box exceeds volume bounds")
    data = volume.data[
        :, box.row_min : box.row_max + 1, box.col_min : box.col_max + 1
    ].copy()
    return Volume(data, volume.spacing, volume.origin)


def _resize_coords(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Pixel-center mapping: output index i samples the source at
    # (i + 0.5) * n_src / n_dst - 0.5, clamped at the edges.
    x = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    x = np.clip(x, 0.0, float(n_src - 1))
    i0 = np.floor(x).astype(np.intp)
    i0 = np.minimum(i0, max(n_src - 2, 0))
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, (x - i0).astype(np.float32)


def _bilinear_resize(stack: np.ndarray, height: int, width: int) -> np.ndarray:
    r0, r1, fr = _resize_coords(stack.shape[1], height)
    c0, c1, fc = _resize_coords(stack.shape[2], width)
    fr = fr[None, :, None]
    fc = fc[None, None, :]
    top = stack[:, r0][:, :, c0]
    top = top + (stack[:, r0][:, :, c1] - top) * fc
    bot = stack[:, r1][:, :, c0]
    bot = bot + (stack[:, r1][:, :, c1] - bot) * fc
    # lerp form keeps constant inputs exactly constant
    return top + (bot - top) * fr


def pad_or_resize(
    volume: Volume,
    target_height: int = TARGET_HEIGHT,
    target_width: int = TARGET_WIDTH,
) -> Volume:
    """Bring every slice to exactly target_height x target_width.

    A volume that fits in the target is zero-padded symmetrically, with the
    odd leftover voxel going to the bottom/right edge. If either dimension
    is over target, the whole slice is bilinearly resized instead; the rule
    is per image, not per axis, so nothing is ever padded in one direction
    and resized in the other. Slice count never changes.
    """
    h, w = volume.height, volume.width
    if h == target_height and w == target_width:
        return volume.copy()
    sz, sr, sc = volume.spacing
    if h <= target_height and w <= target_width:
        pad_top = (target_height - h) // 2
        pad_left = (target_width - w) // 2
        data = np.zeros((volume.n_slices, target_height, target_width),
                        dtype=np.float32)
        data[:, pad_top : pad_top + h, pad_left : pad_left + w] = volume.data
        return Volume(data, volume.spacing, volume.origin)
    data = _bilinear_resize(volume.data, target_height, target_width)
    spacing = (sz, sr * h / target_height, sc * w / target_width)
    return Volume(data.astype(np.float32), spacing, volume.origin)


def window_scale(volume: Volume, hu_max: float = DEFAULT_HU_WINDOW_MAX) -> Volume:
    """Clamp HU to [0, hu_max] and divide by hu_max, mapping onto [0, 1]."""
    data = np.clip(volume.data, 0.0, hu_max) / np.float32(hu_max)
    return Volume(data.astype(np.float32), volume.spacing, volume.origin)


def standardize_volume(
    volume: Volume,
    bone_threshold: float = DEFAULT_BONE_THRESHOLD_HU,
    margin: int = DEFAULT_CROP_MARGIN,
    target_height: int = TARGET_HEIGHT,
    target_width: int = TARGET_WIDTH,
    hu_max: float = DEFAULT_HU_WINDOW_MAX,
) -> tuple[Volume, CropBox]:
    """Full chain: locate head, crop, size-normalize, window. Returns the
    finished volume and the box that was used, for the audit trail."""
    box = find_head_box(volume, bone_threshold, margin)
    out = window_scale(
        pad_or_resize(crop(volume, box), target_height, target_width), hu_max
    )
    return out, box
