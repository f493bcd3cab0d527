import numpy as np
from PIL import Image

from src.heatmap import CountryHeatmap


def test_intensities_use_a_log_scale():
    grid = CountryHeatmap(columns=8).intensities([("NL", 10), ("US", 1)])
    assert grid.shape == (1, 8)
    assert grid.dtype == np.uint8
    assert grid[0, 0] == 255
    assert grid[0, 1] == 113
    assert not grid[0, 2:].any()


def test_grid_wraps_rows():
    counts = [("C%d" % i, 9 - i) for i in range(9)]
    assert CountryHeatmap(columns=4).intensities(counts).shape == (3, 4)


def test_empty_counts():
    heatmap = CountryHeatmap(columns=3, cell_size=10)
    assert heatmap.intensities([]).shape == (1, 3)
    assert heatmap.render([]).size == (30, 10)


def test_render_size():
    image = CountryHeatmap(columns=8, cell_size=64).render([("NL", 5), ("CN", 3), ("US", 1)])
    assert image.size == (512, 64)
    assert image.mode == "RGB"


def test_save(tmp_path):
    path = str(tmp_path / "geo.png")
    CountryHeatmap(columns=2, cell_size=32).save([("NL", 2), ("DE", 1), ("FR", 1)], path)
    with Image.open(path) as image:
        assert image.size == (64, 64)
