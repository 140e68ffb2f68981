import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comrope.coords import (
    OffsetConfig,
    PatchGrid,
    PerturbConfig,
    global_offset,
    patch_centers,
    perturb,
    read_csv,
    relative_scale,
    write_csv,
)


@pytest.mark.parametrize("raw,expected", [
    ((112, 112), (0.5, 0.5)),
    ((0, 0), (0, 0)),
    ((56, 168), (0.25, 0.75)),
])
def test_relative_scale(raw, expected):
    assert relative_scale(raw, (224, 224)).tolist() == list(expected)


def test_relative_scale_zero_canvas():
    with pytest.raises(ValueError):
        relative_scale((1, 1), (224, 0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e6), min_size=1, max_size=4))
def test_canvas_extent_maps_to_one(canvas):
    assert relative_scale(canvas, canvas).tolist() == [1.0] * len(canvas)


def test_centers_2x2():
    c = patch_centers(PatchGrid((1.0, 1.0), (0.5, 0.5)))
    assert c.tolist() == [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]]


def test_centers_1x1():
    assert patch_centers(PatchGrid((7.0, 7.0), (7.0, 7.0))).tolist() == [[0.5, 0.5]]


def test_centers_vit_patch16():
    c = patch_centers(PatchGrid((224, 224), (16, 16)))
    assert c.shape == (196, 2)
    assert c[0].tolist() == [8 / 224, 8 / 224]
    assert c[-1].tolist() == [216 / 224, 216 / 224]


def test_grid_must_tile():
    with pytest.raises(ValueError):
        PatchGrid((224, 224), (15, 16))


class TestPerturb:
    grid = PatchGrid((224, 224), (16, 16))

    def test_sigma_zero_identity(self):
        c = patch_centers(self.grid)
        assert np.array_equal(perturb(c, self.grid, PerturbConfig(0.0, seed=1)), c)

    @pytest.mark.parametrize("sigma", [0.1, 1.0, 10.0])
    def test_within_patch(self, sigma):
        c = patch_centers(self.grid)
        p = perturb(c, self.grid, PerturbConfig(sigma, seed=2))
        half = self.grid.half_width()
        assert np.all((p >= c - half) & (p <= c + half))

    def test_empirical_std(self):
        # clamping sits at 5 sigma for sigma = 0.1, so it barely touches the spread
        c = np.tile(patch_centers(self.grid)[:1], (100_000, 1))
        p = perturb(c, self.grid, PerturbConfig(0.1, seed=3))
        expected = 0.1 * 16 / 224
        np.testing.assert_allclose(p.std(axis=0), expected, rtol=0.05)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            PerturbConfig(-1.0)


class TestGlobalOffset:
    def test_rho_zero(self):
        c = np.random.default_rng(0).uniform(size=(5, 2))
        out, t = global_offset(c, OffsetConfig(0.0, seed=1))
        assert np.array_equal(out, c) and np.array_equal(t, [0.0, 0.0])

    def test_same_shift_for_all(self):
        c = np.random.default_rng(0).uniform(size=(6, 3))
        out, t = global_offset(c, OffsetConfig(50.0, seed=4))
        assert np.array_equal(out, c + t)
        assert np.array_equal(out - out[0], (c + t) - (c[0] + t))

    def test_reproducible(self):
        c = np.zeros((3, 2))
        a = global_offset(c, OffsetConfig(50.0, seed=9))
        b = global_offset(c, OffsetConfig(50.0, seed=9))
        assert np.array_equal(a[1], b[1]) and np.array_equal(a[0], b[0])


def test_csv_round_trip(tmp_path):
    c = np.random.default_rng(1).uniform(size=(4, 3))
    path = tmp_path / "coords.csv"
    write_csv(c, path)
    assert path.read_text().splitlines()[0] == "x1,x2,x3"
    assert np.array_equal(read_csv(path), c)
