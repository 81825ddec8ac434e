import xml.etree.ElementTree as ET

import numpy as np

from dobstab.svgplot import line_plot

NS = "{http://www.w3.org/2000/svg}"


def test_plot_is_valid_svg_with_one_line_per_series():
    t = np.linspace(0, 1, 50)
    doc = line_plot([("a", t, np.sin(t)), ("b & c", t, np.cos(t))], "Title <x>", "t", "y")
    root = ET.fromstring(doc)
    assert root.get("version") == "1.1"
    assert len(root.findall(f"{NS}polyline")) == 2
    assert "b &amp; c" in doc


def test_log_axis_drops_non_positive_and_non_finite():
    t = np.arange(5.0)
    doc = line_plot([("", t, np.array([1.0, 0.0, np.nan, 10.0, 100.0]))], "", "", "", logy=True)
    pts = ET.fromstring(doc).find(f"{NS}polyline").get("points").split()
    assert len(pts) == 3


def test_thinning_keeps_extremes():
    t = np.linspace(0, 1, 100_000)
    y = np.zeros_like(t)
    y[54_321] = 7.0
    doc = line_plot([("", t, y)], "", "", "", max_points=200)
    poly = ET.fromstring(doc).find(f"{NS}polyline").get("points").split()
    assert len(poly) <= 200
    ys = [float(p.split(",")[1]) for p in poly]
    assert min(ys) < max(ys)


def test_empty_series():
    ET.fromstring(line_plot([("", [], [])], "empty", "", ""))
