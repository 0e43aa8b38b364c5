import numpy as np
import pytest

from stacklab import plotting
from stacklab.errors import RenderError

PNG = b"\x89PNG"


def imgs(n, size=8):
    return list(np.random.default_rng(0).uniform(-1, 1, size=(n, 3, size, size)))


def is_png(path):
    with open(path, "rb") as fh:
        return fh.read(4) == PNG


def test_to_rgb_range_and_layout():
    out = plotting.to_rgb(np.stack([np.full((2, 2), -2.0), np.zeros((2, 2)), np.ones((2, 2))]))
    assert out.shape == (2, 2, 3)
    assert out[0, 0].tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(RenderError):
        plotting.to_rgb(np.zeros((2, 2)))


def test_grids_write_png(tmp_path):
    assert is_png(plotting.contact_sheet(imgs(10), str(tmp_path / "a.png"), ncols=4, title="t"))
    assert is_png(plotting.stage_comparison(imgs(3), imgs(3, 16), ["a", "b", "c"], str(tmp_path / "b.png")))
    assert is_png(plotting.retrieval_sheet(imgs(2), [imgs(3), imgs(3)], str(tmp_path / "c.png")))


def test_empty_grid_rejected(tmp_path):
    with pytest.raises(RenderError):
        plotting.image_grid([], str(tmp_path / "x.png"))


def test_curves_and_ablation_chart(tmp_path):
    recs = [{"epoch": e, "d_loss": 1.0, "g_loss": -0.5, "kl_term": 0.1} for e in range(3)]
    assert is_png(plotting.training_curves({"s1": recs, "empty": []}, str(tmp_path / "c.png")))
    res = {"a": {"score": [1.0, 2.0]}, "b": {"score": [1.5]}}
    assert is_png(plotting.ablation_chart(res, str(tmp_path / "d.png"), title="x"))
