"""Series triage: orientation labelling, mixed-series splitting, and the
ordered exclusion rules.

Each series ends up Accepted, Excluded with exactly one reason, or parked
for manual review. The rules run in a fixed order and the first match wins,
so a sagittal localiser counts as a localiser, not as non-axial. Slice-count
rules read the count of the assembled volume, which the caller may supply
when it differs from the raw file count (a split partition, say).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .dicom_io import DicomSeries
from .errors import DegenerateOrientation

AXIAL = "Axial"
SAGITTAL = "Sagittal"
CORONAL = "Coronal"
MIXED = "Mixed"

ACCEPTED = "Accepted"
EXCLUDED = "Excluded"
NEEDS_REVIEW = "NeedsReview"

REASON_NON_AXIAL = "NonAxial"
REASON_LOCALISER = "Localiser"
REASON_BONE = "BoneReformat"
REASON_SPLIT = "SuspectedSplitBrain"
REASON_NONE = "None"

LOCALISER_TOKENS = frozenset({"LOCALIZER", "SCOUT"})
# Default bone-reconstruction markers; vendor kernel names vary, so the
# pipeline config can extend this list.
DEFAULT_BONE_TOKENS = frozenset({"BONE", "BONEPLUS", "H60S", "H70H"})

DEFAULT_LOCALISER_SLICE_THRESHOLD = 3
DEFAULT_SPLIT_REVIEW_THRESHOLD = 25

_EXCLUDED_REASONS = frozenset({REASON_NON_AXIAL, REASON_LOCALISER, REASON_BONE})


@dataclass(frozen=True)
class TriageVerdict:
    series_uid: str
    decision: str
    reason: str
    orientation: str

    def __post_init__(self) -> None:
        if self.decision == EXCLUDED:
            if self.reason not in _EXCLUDED_REASONS:
                raise ValueError(f"bad exclusion reason {self.reason!r}")
        elif self.decision == NEEDS_REVIEW:
            if self.reason != REASON_SPLIT:
                raise ValueError("review verdicts must carry the split reason")
        elif self.decision == ACCEPTED:
            if self.reason != REASON_NONE:
                raise ValueError("accepted verdicts carry no reason")
        else:
            raise ValueError(f"unknown decision {self.decision!r}")


def classify_orientation(cosines: Sequence[float]) -> str:
    """Label a slice plane by the dominant component of its normal.

    The normal is the cross product of the row and column direction
    cosines; whichever patient axis it most aligns with names the plane.
    An exact tie between the two largest components (a 45-degree plane)
    raises DegenerateOrientation rather than picking a side.
    """
    row_dir = np.asarray(cosines[:3], dtype=float)
    col_dir = np.asarray(cosines[3:6], dtype=float)
    normal = np.cross(row_dir, col_dir)
    mags = np.abs(normal)
    order = np.argsort(mags)
    if mags[order[2]] - mags[order[1]] < 1e-6:
        raise DegenerateOrientation(
            f"normal {normal.round(6).tolist()} has no dominant axis"
        )
    return (SAGITTAL, CORONAL, AXIAL)[int(order[2])]


def split_mixed_series(series: DicomSeries) -> list[tuple[str, DicomSeries]]:
    """Partition a series by per-slice orientation, preserving slice order.

    Most series come back as a single partition. A stray slice of another
    plane gets its own partition; the caller sends the axial partition on
    through the pipeline and marks the rest non-axial.
    """
    buckets: dict[str, tuple[list, list]] = {}
    order: list[str] = []
    for path, sl in zip(series.source_paths, series.slices):
        label = classify_orientation(sl.orientation_cosines)
        if label not in buckets:
            buckets[label] = ([], [])
            order.append(label)
        buckets[label][0].append(sl)
        buckets[label][1].append(path)
    out = []
    for label in order:
        slices, paths = buckets[label]
        out.append(
            (
                label,
                DicomSeries(
                    series_uid=series.series_uid,
                    slices=slices,
                    source_paths=paths,
                    patient_id=series.patient_id,
                    patient_age_years=series.patient_age_years,
                ),
            )
        )
    return out


def series_orientation(series: DicomSeries) -> str:
    """Single orientation label of a series, or Mixed when slices disagree."""
    labels = {classify_orientation(s.orientation_cosines) for s in series.slices}
    if len(labels) == 1:
        return labels.pop()
    return MIXED


def _image_type_tokens(series: DicomSeries) -> frozenset[str]:
    tokens: set[str] = set()
    for sl in series.slices:
        tokens.update(t.upper() for t in sl.image_type)
    return frozenset(tokens)


def _kernel_tokens(series: DicomSeries) -> frozenset[str]:
    return frozenset(
        sl.convolution_kernel.strip().upper()
        for sl in series.slices
        if sl.convolution_kernel
    )


def triage_attributes(
    series_uid: str,
    image_type: Iterable[str],
    kernel_tokens: Iterable[str],
    orientation: str,
    volume_slices: int,
    bone_tokens: Iterable[str] = DEFAULT_BONE_TOKENS,
    localiser_slice_threshold: int = DEFAULT_LOCALISER_SLICE_THRESHOLD,
    split_review_threshold: int = DEFAULT_SPLIT_REVIEW_THRESHOLD,
) -> TriageVerdict:
    """The rule engine itself, operating on already-extracted attributes.

    Rules in order, first match winning:

    1. localiser marker in the image type
    2. blank image type with fewer than 3 slices
    3. bone marker in the image type or convolution kernel
    4. not axial
    5. fewer than 25 slices, parked for manual review
    6. accepted
    """
    itype = frozenset(t.upper() for t in image_type)
    kernels = frozenset(t.upper() for t in kernel_tokens)
    bone = frozenset(t.upper() for t in bone_tokens)

    def verdict(decision: str, reason: str) -> TriageVerdict:
        return TriageVerdict(series_uid, decision, reason, orientation)

    if itype & LOCALISER_TOKENS:
        return verdict(EXCLUDED, REASON_LOCALISER)
    if not itype and volume_slices < localiser_slice_threshold:
        return verdict(EXCLUDED, REASON_LOCALISER)
    if (itype & bone) or (kernels & bone):
        return verdict(EXCLUDED, REASON_BONE)
    if orientation != AXIAL:
        return verdict(EXCLUDED, REASON_NON_AXIAL)
    if volume_slices < split_review_threshold:
        return verdict(NEEDS_REVIEW, REASON_SPLIT)
    return verdict(ACCEPTED, REASON_NONE)


def triage_series(
    series: DicomSeries,
    volume_slices: Optional[int] = None,
    orientation: Optional[str] = None,
    bone_tokens: Iterable[str] = DEFAULT_BONE_TOKENS,
    localiser_slice_threshold: int = DEFAULT_LOCALISER_SLICE_THRESHOLD,
    split_review_threshold: int = DEFAULT_SPLIT_REVIEW_THRESHOLD,
) -> TriageVerdict:
    """Triage one series (see triage_attributes for the rule order).

    The series is expected to be orientation-uniform already (split first);
    a mixed series passed whole is labelled Mixed and falls under the
    non-axial rule. volume_slices defaults to the series' own slice count
    but may be supplied when the assembled volume differs.
    """
    if volume_slices is None:
        volume_slices = len(series.slices)
    if orientation is None:
        orientation = series_orientation(series)
    return triage_attributes(
        series.series_uid,
        _image_type_tokens(series),
        _kernel_tokens(series),
        orientation,
        volume_slices,
        bone_tokens=bone_tokens,
        localiser_slice_threshold=localiser_slice_threshold,
        split_review_threshold=split_review_threshold,
    )
