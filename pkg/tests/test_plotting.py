import numpy as np
import pytest

from nimbus import plotting


class TestPgm:
    def test_roundtrip(self, tmp_path):
        f = np.linspace(-2.0, 6.0, 12).reshape(3, 4)
        plotting.write_pgm(f, tmp_path / "a.pgm")
        img, (lo, hi) = plotting.read_pgm(tmp_path / "a.pgm")
        assert img.shape == (3, 4) and (lo, hi) == (-2.0, 6.0)
        assert img[0, 0] == 0 and img[-1, -1] == 255
        back = lo + img / 255.0 * (hi - lo)
        assert np.abs(back - f).max() <= (hi - lo) / 255 / 2 + 1e-12

    def test_header(self, tmp_path):
        plotting.write_pgm(np.zeros((2, 5)) + np.arange(5), tmp_path / "h.pgm")
        assert (tmp_path / "h.pgm").read_bytes().startswith(b"P5\n5 2\n255\n")

    def test_constant_is_grey(self, tmp_path):
        plotting.write_pgm(np.full((2, 2), 7.0), tmp_path / "c.pgm")
        assert np.all(plotting.read_pgm(tmp_path / "c.pgm")[0] == 128)

    @pytest.mark.parametrize("bad", [np.zeros(3), np.array([[np.nan, 1.0]])])
    def test_rejects(self, tmp_path, bad):
        with pytest.raises(ValueError):
            plotting.write_pgm(bad, tmp_path / "x.pgm")


class TestPng:
    def test_loss_plot_is_deterministic(self, tmp_path):
        hist = [{"iteration": i, "total": 1.0 / (i + 1), "forecast_loss": 0.5 / (i + 1), "guide_loss": 0.1} for i in range(40)]
        a = plotting.plot_loss(hist, tmp_path / "a.png").read_bytes()
        b = plotting.plot_loss(hist, tmp_path / "b.png").read_bytes()
        assert a[:8] == b"\x89PNG\r\n\x1a\n" and a == b

    def test_map_with_box(self, tmp_path):
        lats, lons = np.linspace(80, -80, 8), np.arange(16) * 22.5
        p = plotting.plot_map(np.random.default_rng(0).normal(size=(8, 16)), lats, lons, tmp_path / "m.png",
                              "title", ((21.0, 30.0), (105.0, 121.0)))
        assert p.stat().st_size > 0

    def test_ablation_bars(self, tmp_path):
        p = plotting.plot_ablation(["A", "B"], ["c1", "c2", "c3"], np.ones((2, 3)), tmp_path / "ab.png")
        assert p.exists()
