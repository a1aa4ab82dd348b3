import numpy as np
import pytest
from PIL import Image

from aamgan import plots
from aamgan.errors import IOFailure
from aamgan.metrics import ConfidenceReport


def _conf(counts):
    return ConfidenceReport(counts, list(np.linspace(0, 1, 21)), 0.5, 0.1, sum(counts))


def _is_png(path):
    with Image.open(path) as im:
        return im.format == "PNG" and im.size[0] > 50


def test_figures_written(tmp_path):
    a = plots.confidence_histogram({"softmax": _conf([1] * 20), "aam": _conf([0] * 19 + [5])},
                                   tmp_path / "c.png")
    b = plots.noise_curve({"aam": [(0.0, 0.9), (0.5, 0.6)]}, tmp_path / "n.png")
    c = plots.table_figure(["metric", "0.5", "1"], [["FID", 1.0, 2.0]], tmp_path / "t.png", "sweep")
    assert all(_is_png(p) for p in (a, b, c))


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("x")
    with pytest.raises(IOFailure):
        plots.noise_curve({"aam": [(0.0, 1.0)]}, blocker / "n.png")
