"""Affine registration of a synthetic template onto a CT volume.

Twelve degrees of freedom (translation, rotation, scale, shear) are searched
by maximizing mutual information between the windowed CT and the resampled
template over a three-level resolution pyramid. The optimizer is a
derivative-free per-parameter golden-section refinement applied round-robin,
so the whole procedure is deterministic: same inputs, same transform.

All physical coordinates are (slice, row, col) ordered, in mm, with voxel
index i mapping to i * spacing. A transform matrix maps template physical
coordinates to target physical coordinates; the target volume is never
modified.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateVolume, NonConvergence
from .volume import Volume

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class AffineTransform:
    """A 4x4 affine matrix acting on (slice, row, col, 1) mm coordinates."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("affine matrix must be 4x4")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("last row of an affine matrix must be 0 0 0 1")
        self.matrix = m

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return pts @ self.linear.T + self.translation

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Returns self applied after other."""
        return AffineTransform(self.matrix @ other.matrix)


def make_affine(
    rotations_deg: Sequence[float] = (0.0, 0.0, 0.0),
    scales: Sequence[float] = (1.0, 1.0, 1.0),
    shears: Sequence[float] = (0.0, 0.0, 0.0),
    translation: Sequence[float] = (0.0, 0.0, 0.0),
    about: Sequence[float] = (0.0, 0.0, 0.0),
) -> np.ndarray:
    """Build a 4x4 affine acting about a fixed point.

    Rotations are degrees about the (slice, row, col) axes applied in that
    order; shears fill the upper triangle; the linear part is R @ K @ S.
    """
    rz, ry, rx = (math.radians(a) for a in rotations_deg)
    cz, sz_ = math.cos(rz), math.sin(rz)
    cy, sy = math.cos(ry), math.sin(ry)
    cx, sx = math.cos(rx), math.sin(rx)
    r_slice = np.array([[1, 0, 0], [0, cz, -sz_], [0, sz_, cz]])
    r_row = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]])
    r_col = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    k = np.array(
        [[1.0, shears[0], shears[1]], [0.0, 1.0, shears[2]], [0.0, 0.0, 1.0]]
    )
    a = r_slice @ r_row @ r_col @ k @ np.diag(np.asarray(scales, dtype=float))
    about = np.asarray(about, dtype=float)
    m = np.eye(4)
    m[:3, :3] = a
    m[:3, 3] = about + np.asarray(translation, dtype=float) - a @ about
    return m


def save_transform(transform: AffineTransform, path) -> None:
    """Write the 4x4 matrix as four lines of four numbers, row-major."""
    lines = [" ".join(f"{v:.17g}" for v in row) for row in transform.matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def load_transform(path) -> AffineTransform:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            rows.append([float(v) for v in line.split()])
    m = np.asarray(rows, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"{path}: expected 4 lines of 4 numbers")
    return AffineTransform(m)


@dataclass
class TemplateBank:
    """Age-banded templates plus the policy for scans without a usable age."""

    younger: Volume
    older: Volume
    age_cutoff: int = 72
    default_when_age_missing: str = "older"


def select_template(age: Optional[int], bank: TemplateBank) -> Volume:
    """Scans up to the cutoff age get the younger template, above it the
    older one; a missing age falls back to the configured default."""
    if age is None:
        return bank.older if bank.default_when_age_missing == "older" else bank.younger
    return bank.younger if age <= bank.age_cutoff else bank.older


@dataclass
class RegistrationConfig:
    bins: int = 64
    pyramid: tuple[int, ...] = (4, 2, 1)
    # per level: grid samples opening each line search, then sweep budget
    grid_points: tuple[int, ...] = (13, 9, 5)
    sweeps_per_level: tuple[int, ...] = (5, 5, 5)
    # degrees of freedom released per level: translation only at the
    # coarsest grid, rotations and scales once interior structure survives
    # the downsample. Freeing scale/shear while the grid is very coarse
    # lets an inflated template out-score the true pose, and rotations
    # fitted against a nearly featureless 4x grid stall in side lobes.
    # Shears stay frozen through the whole pyramid and only join in the
    # polish phase: a free shear partially cancels every trial rotation
    # move, flattening the very valley the rotation search must descend.
    params_per_level: tuple[int, ...] = (3, 9, 9)
    golden_iters: int = 9
    # below this per-sweep gain a level is considered converged; kept small
    # because rotation/scale trade-offs descend a narrow diagonal valley in
    # slow zigzag steps that a coarse threshold would mistake for a stall
    min_improvement: float = 1e-5
    # full-resolution score gap at which the losing flip branch is dropped
    # without waiting for the mid level
    branch_prune_margin: float = 0.015
    # line searches run against the target's occupied bounding box (padded);
    # reported scores always come from the full grid
    search_crop: bool = True
    crop_margin_voxels: int = 3
    crop_threshold: float = 0.01
    # occupancy cut for the moment-based starting pose; high enough that a
    # low-but-nonzero background level (an image normalized rather than
    # windowed) stays outside the support
    support_threshold: float = 0.03
    metric_floor: float = 0.02
    hu_window_max: float = 100.0
    try_flip: bool = True
    # "principal_axes" derives the starting rotation and scales in closed
    # form from second moments of the two mass distributions; the
    # eigenvector sign ambiguity leaves four proper-rotation candidates,
    # which become the optimizer's starting branches. "identity" starts
    # from the identity pose plus, with try_flip, its 180-degree in-plane
    # twin. Moment starts fall back to identity mode when the eigenvalue
    # spectrum is too nearly degenerate for stable axes.
    init_mode: str = "principal_axes"
    # half-widths of the per-parameter search brackets at the coarsest level
    width_translation_mm: float = 18.0
    width_rotation_deg: float = 25.0
    width_scale: float = 0.12
    width_shear: float = 0.08
    # rotation/scale brackets used instead of the above when a moment start
    # is in hand: the start already sits within a few degrees and percent,
    # and a wide bracket would reintroduce the side-lobe jumps the closed
    # form start exists to avoid
    pa_width_rotation_deg: float = 8.0
    pa_width_scale: float = 0.06
    # bracket shrink per finer level, one factor per parameter class
    # (translation, rotation, scale, shear). Translations are pinned early
    # by the center-of-mass start; scales converge slowest because coarse
    # levels reward a slightly inflated template, so their bracket decays
    # gently.
    level_shrink: tuple[float, float, float, float] = (0.25, 0.3, 0.5, 0.5)
    # after the pyramid, extra full-resolution sweeps with tight brackets;
    # rotation/scale trade-offs relax in small zigzag steps that need
    # iterations more than they need search range
    # polish runs shear-frozen first, then releases the full twelve: shears
    # enter last because they flatten the rotation valley; see
    # params_per_level.
    polish_sweeps: tuple[int, int] = (6, 4)
    polish_widths: tuple[float, float, float, float] = (1.5, 1.5, 0.02, 0.01)
    polish_min_improvement: float = 2e-6
    # Gaussian smoothing (in voxels) applied to the finest level's search
    # volumes, kept at zero: its smoothed landscape rewards visibly
    # inflated template scales, and with a moment-based start the finest
    # level no longer needs a continuation step to find its basin.
    final_level_smooth_sigma: float = 0.0


@dataclass
class RegistrationResult:
    transform: AffineTransform
    resampled: Volume
    score: float
    level_scores: list[float] = field(default_factory=list)
    # winning parameter vector after each pyramid level, for diagnostics:
    # 3 translations mm, 3 rotations deg, 3 scales, 3 shears
    level_params: list[np.ndarray] = field(default_factory=list)


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 64) -> float:
    """MI in nats between two arrays of equal shape with values in [0, 1]."""
    ia = np.minimum((a.ravel() * bins).astype(np.intp), bins - 1)
    ib = np.minimum((b.ravel() * bins).astype(np.intp), bins - 1)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).astype(np.float64)
    joint = joint.reshape(bins, bins)
    p = joint / joint.sum()
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(px, py)
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(outer[nz]))))


def _window_unit(data: np.ndarray, hu_max: float) -> np.ndarray:
    return np.clip(data, 0.0, hu_max) / hu_max


def _minmax_unit(data: np.ndarray) -> np.ndarray:
    lo = float(data.min())
    hi = float(data.max())
    if hi <= lo:
        raise DegenerateVolume("constant-intensity volume")
    return (data - lo) / (hi - lo)


def _downsample(data: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return data
    ns, h, w = (d // factor for d in data.shape)
    trimmed = data[: ns * factor, : h * factor, : w * factor]
    return trimmed.reshape(ns, factor, h, factor, w, factor).mean(axis=(1, 3, 5))


def _center_of_mass_mm(weights: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    total = float(weights.sum())
    if total <= 0:
        raise DegenerateVolume("volume has no mass above the window floor")
    com = ndimage.center_of_mass(weights)
    return np.asarray(com) * np.asarray(spacing, dtype=float)


def _moment_covariance(weights: np.ndarray, spacing: Sequence[float],
                       origin: Sequence[float], com_mm: np.ndarray) -> np.ndarray:
    """Second moments (mm^2) of a nonnegative weight field about com_mm."""
    total = float(weights.sum())
    if total <= 0:
        raise DegenerateVolume("volume has no mass above the window floor")
    d = [np.arange(n) * s + o - c
         for n, s, o, c in zip(weights.shape, spacing, origin, com_mm)]
    d0 = d[0][:, None, None]
    d1 = d[1][None, :, None]
    d2 = d[2][None, None, :]
    w = weights / total
    cov = np.empty((3, 3))
    cov[0, 0] = (w * d0 * d0).sum()
    cov[1, 1] = (w * d1 * d1).sum()
    cov[2, 2] = (w * d2 * d2).sum()
    cov[0, 1] = cov[1, 0] = (w * d0 * d1).sum()
    cov[0, 2] = cov[2, 0] = (w * d0 * d2).sum()
    cov[1, 2] = cov[2, 1] = (w * d1 * d2).sum()
    return cov


def _axis_skewness(weights: np.ndarray, spacing: Sequence[float],
                   origin: Sequence[float], com_mm: np.ndarray,
                   axes: np.ndarray) -> np.ndarray:
    """Normalized third moments of a weight field along each axis column.

    The signs encode the front/back and left/right asymmetries that second
    moments cannot see, which is exactly what tells a head from its
    180-degree rotations.
    """
    total = float(weights.sum())
    d = [np.arange(n) * s + o - c
         for n, s, o, c in zip(weights.shape, spacing, origin, com_mm)]
    d0 = d[0][:, None, None]
    d1 = d[1][None, :, None]
    d2 = d[2][None, None, :]
    w = weights / total
    out = np.empty(3)
    for k in range(3):
        proj = d0 * axes[0, k] + d1 * axes[1, k] + d2 * axes[2, k]
        m2 = float((w * proj * proj).sum())
        m3 = float((w * proj ** 3).sum())
        out[k] = m3 / max(m2, 1e-12) ** 1.5
    return out


def _euler_from_rotation(r: np.ndarray) -> tuple[float, float, float]:
    """Angles in degrees, (slice, row, col) order, whose make_affine
    rotation equals r. Valid away from the row-axis gimbal lock."""
    ry = math.asin(max(-1.0, min(1.0, -float(r[0, 2]))))
    rx = math.atan2(-r[0, 1], r[0, 0])
    rz = math.atan2(-r[1, 2], r[2, 2])
    return math.degrees(rz), math.degrees(ry), math.degrees(rx)


def _moment_candidates(
    occ_target: np.ndarray,
    spacing_target: np.ndarray,
    origin_target: np.ndarray,
    occ_template: np.ndarray,
    spacing_template: np.ndarray,
    origin_template: np.ndarray,
    eigengap_rtol: float = 0.05,
    scale_clip: tuple[float, float] = (0.75, 1.35),
) -> list[tuple[float, np.ndarray]]:
    """Closed-form starting poses from occupancy moments, best first.

    Matching covariance eigenvectors by eigenvalue rank gives the rotation
    between the two supports up to per-axis sign flips; the four
    positive-determinant sign choices become candidate starts, and per-axis
    scales follow from the moment ratios after rotating the target
    covariance back. Second moments cannot rank the four, so each is scored
    by how well the supports' skewness signs agree along the matched axes:
    the correct candidate agrees on every axis while a flipped one inverts
    two. Returns (agreement, params) pairs sorted by agreement, or an empty
    list when adjacent eigenvalues are too close for stable axes.
    """
    com_t = _center_of_mass_mm(occ_target, spacing_target) + origin_target
    com_p = _center_of_mass_mm(occ_template, spacing_template) + origin_template
    cov_t = _moment_covariance(occ_target, spacing_target, origin_target, com_t)
    cov_p = _moment_covariance(occ_template, spacing_template, origin_template,
                               com_p)
    evals_t, u_t = np.linalg.eigh(cov_t)
    evals_p, u_p = np.linalg.eigh(cov_p)
    for ev in (evals_t, evals_p):
        if ev[0] <= 0.0 or np.any(np.diff(ev) < eigengap_rtol * ev[-1]):
            return []
    skew_t = _axis_skewness(occ_target, spacing_target, origin_target, com_t,
                            u_t)
    skew_p = _axis_skewness(occ_template, spacing_template, origin_template,
                            com_p, u_p)
    det_sign = np.linalg.det(u_t) * np.linalg.det(u_p)
    candidates = []
    for signs in itertools.product((1.0, -1.0), repeat=3):
        if det_sign * signs[0] * signs[1] * signs[2] < 0.0:
            continue
        r0 = (u_t * signs) @ u_p.T
        projected = r0.T @ cov_t @ r0
        ratio = np.diag(projected) / np.diag(cov_p)
        p = _IDENTITY_PARAMS.copy()
        p[3:6] = _euler_from_rotation(r0)
        p[6:9] = np.clip(np.sqrt(np.maximum(ratio, 1e-12)), *scale_clip)
        agreement = float(sum(
            s * gt * gp / (abs(gt * gp) + 1e-12)
            for s, gt, gp in zip(signs, skew_t, skew_p)
        ))
        candidates.append((agreement, p))
    candidates.sort(key=lambda pair: pair[0], reverse=True)
    return candidates


# Parameter vector layout: 3 translations (mm), 3 rotations (deg),
# 3 scales, 3 shears, each in (slice, row, col) axis order.
_N_PARAMS = 12
_IDENTITY_PARAMS = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0], dtype=np.float64)


def _params_to_matrix(p: np.ndarray, com_template: np.ndarray,
                      com_target: np.ndarray) -> np.ndarray:
    m = make_affine(
        rotations_deg=p[3:6],
        scales=p[6:9],
        shears=p[9:12],
        translation=(0.0, 0.0, 0.0),
        about=(0.0, 0.0, 0.0),
    )
    a = m[:3, :3]
    m[:3, 3] = com_target + p[:3] - a @ com_template
    return m


def resample_template(template_unit: np.ndarray, template_spacing: Sequence[float],
                      matrix: np.ndarray, target_shape: tuple[int, ...],
                      target_spacing: Sequence[float],
                      template_origin: Sequence[float] = (0.0, 0.0, 0.0),
                      target_origin: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Trilinearly sample the template onto the target grid under matrix
    (template mm -> target mm). Origins give the mm position of index 0 on
    each grid; block-averaged pyramid levels sit at a half-block offset from
    the full-resolution grid and misregister by a full coarse voxel under
    large rotations if that shift is dropped.
    """
    a_inv = np.linalg.inv(matrix[:3, :3])
    sp_p = np.asarray(template_spacing, dtype=float)
    sp_t = np.asarray(target_spacing, dtype=float)
    o_p = np.asarray(template_origin, dtype=float)
    o_t = np.asarray(target_origin, dtype=float)
    b = (a_inv / sp_p[:, None]) * sp_t[None, :]
    offset = (a_inv @ (o_t - matrix[:3, 3]) - o_p) / sp_p
    return ndimage.affine_transform(
        template_unit, b, offset=offset, output_shape=target_shape,
        order=1, mode="constant", cval=0.0, prefilter=False,
    )


def _golden_max(f, lo: float, hi: float, iters: int) -> tuple[float, float]:
    a, b = lo, hi
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = f(x1), f(x2)
    if f1 >= f2:
        best_x, best_f = x1, f1
    else:
        best_x, best_f = x2, f2
    for _ in range(iters):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = f(x2)
            if f2 > best_f:
                best_x, best_f = x2, f2
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = f(x1)
            if f1 > best_f:
                best_x, best_f = x1, f1
    return best_x, best_f


def _line_max(f, lo: float, hi: float, n_grid: int, iters: int) -> tuple[float, float]:
    """Maximize f on [lo, hi]: an even grid pass first, so an off-center peak
    is not discarded the way a bare golden section would when the surface is
    flat or multimodal, then golden refinement around the best grid point."""
    xs = np.linspace(lo, hi, n_grid)
    fs = [f(x) for x in xs]
    k = int(np.argmax(fs))
    step = (hi - lo) / (n_grid - 1)
    gx, gf = _golden_max(f, max(lo, xs[k] - step), min(hi, xs[k] + step), iters)
    if fs[k] >= gf:
        return float(xs[k]), float(fs[k])
    return gx, gf


def _sweep_refine(p: np.ndarray, metric, widths_vec: np.ndarray, n_active: int,
                  sweeps: int, n_grid: int, golden_iters: int,
                  min_improvement: float) -> float:
    """Round-robin line searches over the active parameters, in place.

    After each sweep one extra search runs along the sweep's net
    displacement. Rotation/scale/shear trade-offs form narrow diagonal
    valleys in which per-axis moves shrink to nothing; the displacement
    direction tracks the valley floor and restores real progress per sweep.
    Returns the final metric value.
    """
    cur = metric(p)
    for _ in range(sweeps):
        sweep_start = cur
        p_before = p.copy()
        for i in range(n_active):
            def line(x: float, i: int = i) -> float:
                q = p.copy()
                q[i] = x
                return metric(q)

            x, fx = _line_max(
                line, p[i] - widths_vec[i], p[i] + widths_vec[i],
                n_grid, golden_iters,
            )
            if fx > cur + 1e-12:
                p[i] = x
                cur = fx

        d = p - p_before
        if np.any(d != 0.0):
            def along(t: float) -> float:
                q = p + t * d
                if np.any(q[6:9] < 0.2):  # refuse template collapse
                    return -np.inf
                return metric(q)

            # the range extends well past the sweep's own step because the
            # per-sweep displacement understates the remaining valley length
            t, ft = _line_max(along, -2.0, 6.0, 9, golden_iters)
            if ft > cur + 1e-12:
                p += t * d
                cur = ft

        if cur - sweep_start < min_improvement:
            break
    return cur


def register(template: Volume, target: Volume,
             config: Optional[RegistrationConfig] = None) -> RegistrationResult:
    """Fit the 12-DOF affine mapping template onto target.

    Raises DegenerateVolume for constant inputs and NonConvergence when the
    final similarity stays below the configured floor.
    """
    cfg = config or RegistrationConfig()

    tgt_unit = _window_unit(target.data.astype(np.float64), cfg.hu_window_max)
    tpl_unit = _minmax_unit(template.data.astype(np.float64))
    if float(tgt_unit.max()) <= float(tgt_unit.min()):
        raise DegenerateVolume("target is constant after windowing")

    sp_t = np.asarray(target.spacing, dtype=float)
    sp_p = np.asarray(template.spacing, dtype=float)
    com_target = _center_of_mass_mm(tgt_unit, sp_t)
    com_template = _center_of_mass_mm(tpl_unit, sp_p)

    widths = np.array(
        [cfg.width_translation_mm] * 3
        + [cfg.width_rotation_deg] * 3
        + [cfg.width_scale] * 3
        + [cfg.width_shear] * 3
    )
    shrinks = np.repeat(np.asarray(cfg.level_shrink, dtype=float), 3)

    factors = [f for f in cfg.pyramid
               if all(d // f >= 4 for d in target.data.shape)] or [1]
    first_active = np.empty(_N_PARAMS, dtype=int)
    for i in range(_N_PARAMS):
        first_active[i] = next(
            (li for li, n in enumerate(cfg.params_per_level) if i < n),
            len(cfg.params_per_level) - 1,
        )

    def metric_at(factor: int, crop: bool = False, smooth_sigma: float = 0.0):
        tgt_lvl = _downsample(tgt_unit, factor)
        tpl_lvl = _downsample(tpl_unit, factor)
        if smooth_sigma > 0:
            tgt_lvl = ndimage.gaussian_filter(tgt_lvl, smooth_sigma)
            tpl_lvl = ndimage.gaussian_filter(tpl_lvl, smooth_sigma)
        # block means sit half a block past the fine grid origin
        o_t = (factor - 1) / 2.0 * sp_t
        o_p = (factor - 1) / 2.0 * sp_p
        if crop and cfg.search_crop:
            occupied = np.argwhere(tgt_lvl > cfg.crop_threshold)
            if occupied.size:
                lo = np.maximum(occupied.min(axis=0) - cfg.crop_margin_voxels, 0)
                hi = np.minimum(
                    occupied.max(axis=0) + cfg.crop_margin_voxels + 1,
                    tgt_lvl.shape,
                )
                tgt_lvl = tgt_lvl[tuple(slice(a, b) for a, b in zip(lo, hi))]
                o_t = o_t + lo * sp_t * factor
        # histogram bins sized to the sample budget: about three samples
        # per joint cell. Too many bins on a coarse grid is sparsity noise;
        # too few blur the tissue boundaries enough that a compensatory
        # wrong pose can out-score the true one.
        bins = int(np.clip(math.sqrt(tgt_lvl.size / 3.0), 8, cfg.bins))

        def metric(p: np.ndarray) -> float:
            m = _params_to_matrix(p, com_template, com_target)
            warped = resample_template(
                tpl_lvl, sp_p * factor, m, tgt_lvl.shape, sp_t * factor,
                template_origin=o_p, target_origin=o_t,
            )
            return mutual_information(warped, tgt_lvl, bins)

        return metric

    full_metric = metric_at(1)

    class _Branch:
        def __init__(self, p: np.ndarray):
            self.p = p
            self.best_p = p.copy()
            # the starting pose is banked immediately: a coarse level that
            # damages a good start must have something to revert to
            self.best_full = full_metric(p)

    # The skull outline looks almost identical after a 180-degree in-plane
    # rotation, and at coarse resolutions a comparison of candidate starts
    # is a coin flip, while a refined wrong start beats an unrefined right
    # one at any resolution. So every start is carried as a separate branch
    # through the cheap levels and losers are dropped, by full-resolution
    # score, only once each has been refined.
    branches: list[_Branch] = []
    if cfg.init_mode == "principal_axes":
        # moments are taken over the occupancy masks, not the intensities:
        # the two sides are differently weighted maps of the same anatomy,
        # and intensity-as-mass ratios across them say nothing about
        # geometry, while the support outline is shared. Masks are cut at
        # full resolution and block-averaged into fractional occupancy;
        # thresholding after the downsample would dilate each support by
        # half a block, and unequal block sizes then bias the scale ratios.
        f0 = factors[0]
        occ_t = _downsample((tgt_unit > cfg.support_threshold).astype(float), f0)
        occ_p = _downsample((tpl_unit > cfg.support_threshold).astype(float), f0)
        ranked = _moment_candidates(
            occ_t, sp_t * f0, (f0 - 1) / 2.0 * sp_t,
            occ_p, sp_p * f0, (f0 - 1) / 2.0 * sp_p,
        )
        if ranked:
            # two branches are always carried as insurance; further
            # candidates only when the skewness ordering cannot separate
            # them from the best (a nearly symmetric support)
            lead_agreement = ranked[0][0]
            for rank, (agreement, p0) in enumerate(ranked):
                if rank >= 2 and lead_agreement - agreement > 1.0:
                    break
                branches.append(_Branch(p0))
    if branches:
        widths[3:6] = cfg.pa_width_rotation_deg
        widths[6:9] = cfg.pa_width_scale
    else:
        branches.append(_Branch(_IDENTITY_PARAMS.copy()))
        if cfg.try_flip:
            flipped = _IDENTITY_PARAMS.copy()
            flipped[3] = 180.0
            branches.append(_Branch(flipped))

    level_scores: list[float] = []
    level_params: list[np.ndarray] = []

    for li, factor in enumerate(factors):
        last = li == len(factors) - 1
        metric = metric_at(
            factor, crop=True,
            smooth_sigma=cfg.final_level_smooth_sigma if last else 0.0,
        )
        if len(branches) > 1:
            branches.sort(key=lambda br: br.best_full, reverse=True)
            lead = branches[0].best_full
            if last:
                branches = branches[:1]
            elif np.isfinite(lead):
                # the margin prune waits until every survivor has had its
                # rotations refined at least once, because scores from
                # translation-only refinement order the starts unreliably;
                # for the same reason a third still-ambiguous branch is
                # carried through the mid level rather than cut to two
                if li >= 2:
                    branches = [
                        br for br in branches
                        if lead - br.best_full <= cfg.branch_prune_margin
                    ]
                if li >= 1:
                    keep = branches[:2]
                    for br in branches[2:]:
                        if keep[-1].best_full - br.best_full <= cfg.branch_prune_margin:
                            keep.append(br)
                    branches = keep[:3]

        n_grid = cfg.grid_points[min(li, len(cfg.grid_points) - 1)]
        sweeps = cfg.sweeps_per_level[min(li, len(cfg.sweeps_per_level) - 1)]
        n_active = cfg.params_per_level[min(li, len(cfg.params_per_level) - 1)]
        # brackets start at full width the level a parameter is released
        # and shrink at each level after that
        w_vec = widths * shrinks ** np.maximum(li - first_active, 0)

        for br in branches:
            _sweep_refine(br.p, metric, w_vec, n_active, sweeps, n_grid,
                          cfg.golden_iters, cfg.min_improvement)

            # Bank each branch's best iterate by the full-resolution metric:
            # selection and the reported per-level trace use the banked
            # score, while the working pose is left to follow the level
            # metric even through a full-resolution dip, because a coarse
            # iterate can be better placed for the next level than the
            # banked one.
            full = full_metric(br.p)
            if full > br.best_full:
                br.best_full = full
                br.best_p = br.p.copy()
        leader = max(branches, key=lambda br: br.best_full)
        level_scores.append(leader.best_full)
        level_params.append(leader.best_p.copy())

    winner = max(branches, key=lambda br: br.best_full)
    best_p, best_full = winner.best_p.copy(), winner.best_full

    if any(cfg.polish_sweeps):
        metric = metric_at(1, crop=True)
        p = best_p.copy()
        pw = np.repeat(np.asarray(cfg.polish_widths, dtype=float), 3)
        for n_active, sweeps in zip((9, _N_PARAMS), cfg.polish_sweeps):
            if sweeps > 0:
                _sweep_refine(p, metric, pw, n_active, sweeps,
                              cfg.grid_points[-1], cfg.golden_iters,
                              cfg.polish_min_improvement)
        full = full_metric(p)
        if full > best_full:
            best_full = full
            best_p = p
            level_scores[-1] = full
            level_params[-1] = p.copy()

    if best_full < cfg.metric_floor:
        raise NonConvergence(
            f"similarity {best_full:.4f} below floor {cfg.metric_floor}"
        )

    matrix = _params_to_matrix(best_p, com_template, com_target)
    warped = resample_template(tpl_unit, sp_p, matrix, target.data.shape, sp_t)
    resampled = Volume(
        warped.astype(np.float32), target.spacing, target.origin
    )
    return RegistrationResult(
        transform=AffineTransform(matrix),
        resampled=resampled,
        score=best_full,
        level_scores=level_scores,
        level_params=level_params,
    )
