"""Rendering helpers write valid image files without a display."""

import numpy as np
import pytest
from PIL import Image

from ctprep.figures import (
    save_cluster_montage,
    save_exclusion_chart,
    save_preview_png,
    save_qc_scatter,
)


def test_preview_png_window_and_mode(tmp_path):
    # One row per probe value: below window, mid, at max, above.
    sl = np.array([[-50.0, 50.0], [100.0, 300.0]])
    path = tmp_path / "sub" / "p.png"
    save_preview_png(sl, path, hu_max=100.0)
    img = Image.open(path)
    assert img.mode == "L"
    assert img.size == (2, 2)
    px = np.asarray(img)
    assert px[0, 0] == 0          # clipped at the low end
    assert px[0, 1] == 128        # round(0.5 * 255)
    assert px[1, 0] == 255
    assert px[1, 1] == 255        # clipped at the high end


def test_exclusion_chart_written(tmp_path):
    path = tmp_path / "chart.png"
    save_exclusion_chart({"NonAxial": 3, "Localiser": 1}, path)
    img = Image.open(path)
    assert img.size[0] > 100 and img.size[1] > 100


def test_qc_scatter_written(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(12, 2))
    path = tmp_path / "scatter.png"
    save_qc_scatter(pts, [0] * 6 + [1] * 6, path, labels={0: "valid"})
    assert path.is_file() and path.stat().st_size > 0


def test_cluster_montage_written(tmp_path):
    ct = np.full((20, 20), 40.0)
    tpl = np.zeros((20, 20))
    tpl[8:12, 8:12] = 1.0
    panels = [(f"scan{i}", ct, tpl) for i in range(4)]
    path = tmp_path / "qc" / "cluster_0.png"
    save_cluster_montage(panels, path, title="cluster 0")
    assert path.is_file() and path.stat().st_size > 0


def test_cluster_montage_caps_at_nine(tmp_path):
    ct = np.zeros((8, 8))
    panels = [(str(i), ct, ct) for i in range(15)]
    save_cluster_montage(panels, tmp_path / "m.png")
    assert (tmp_path / "m.png").is_file()


def test_cluster_montage_empty_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_cluster_montage([], tmp_path / "m.png")
