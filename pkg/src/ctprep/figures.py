"""File-based rendering: report charts, QC sheets, review previews.

Everything draws through the Agg backend straight to disk; nothing here
ever opens a window, so the pipeline stays headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np
from PIL import Image


def save_preview_png(slice_hu: np.ndarray, path, hu_max: float = 100.0) -> None:
    """8-bit grayscale preview of one slice after the standard HU window."""
    windowed = np.clip(np.asarray(slice_hu, dtype=np.float64), 0.0, hu_max) / hu_max
    img = (windowed * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="L").save(path, format="PNG")


def save_exclusion_chart(counts: Dict[str, int], path,
                         title: str = "Exclusions by reason") -> None:
    """Bar chart of per-reason exclusion counts."""
    reasons = list(counts)
    values = [counts[r] for r in reasons]
    fig, ax = plt.subplots(figsize=(7, 4))
    bars = ax.bar(range(len(reasons)), values, color="#4878a8")
    ax.set_xticks(range(len(reasons)))
    ax.set_xticklabels(reasons, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("series")
    ax.set_title(f"{title} (total {sum(values)})")
    for bar, v in zip(bars, values):
        ax.annotate(str(v), (bar.get_x() + bar.get_width() / 2, v),
                    ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_qc_scatter(projections: np.ndarray, assignments: Sequence[int], path,
                    labels: Optional[Dict[int, str]] = None) -> None:
    """First two projection coordinates, colored by cluster."""
    pts = np.asarray(projections)
    idx = np.asarray(list(assignments))
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for cluster in sorted(set(idx.tolist())):
        sel = idx == cluster
        name = f"cluster {cluster}"
        if labels and cluster in labels:
            name += f" ({labels[cluster]})"
        ax.scatter(pts[sel, 0], pts[sel, 1], s=18, label=name, alpha=0.8)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title("registration transforms, projected")
    ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_cluster_montage(
    panels: Sequence[Tuple[str, np.ndarray, np.ndarray]],
    path,
    title: str = "",
    hu_max: float = 100.0,
) -> None:
    """Up-to-3x3 sheet of template-over-CT middle slices for one cluster.

    Each panel is (scan label, CT slice in HU, warped template slice in
    [0, 1]); the template shows as a translucent overlay so a pose that
    missed the head is obvious at a glance.
    """
    panels = list(panels)[:9]
    if not panels:
        raise ValueError("montage needs at least one panel")
    n = len(panels)
    ncols = min(3, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols,
                             figsize=(3.2 * ncols, 3.2 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (name, ct, tpl) in zip(axes.ravel(), panels):
        base = np.clip(np.asarray(ct, dtype=float), 0.0, hu_max) / hu_max
        ax.imshow(base, cmap="gray", vmin=0.0, vmax=1.0)
        overlay = np.asarray(tpl, dtype=float)
        masked = np.ma.masked_where(overlay <= overlay.min() + 1e-6, overlay)
        ax.imshow(masked, cmap="autumn", alpha=0.35)
        ax.set_title(name, fontsize=7)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
