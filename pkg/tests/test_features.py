import numpy as np
import pytest

from partforest.features import FeatureMap, cell_histograms, compute_hog, crop_feature, window_stack
from partforest.imaging import ShapeError


def test_vertical_edge_goes_to_horizontal_gradient_bin():
    img = np.zeros((8, 8))
    img[:, 4:] = 100.0
    hist = cell_histograms(img, 4, 9)
    # gradient points along +x: orientation 0, bin 0
    assert hist[0, 0, 0] == pytest.approx(4 * 50.0)
    assert hist[0, 1, 0] == pytest.approx(4 * 50.0)
    assert hist[..., 1:].sum() == 0.0


def test_orientation_split_between_bins():
    # 45 degrees lies a quarter of the way from bin 2 (40 deg) to bin 3 (60 deg)
    y, x = np.mgrid[0:24, 0:24].astype(float)
    hist = cell_histograms(x + y, 8, 9)[1, 1]
    assert hist[[0, 1, 4, 5, 6, 7, 8]].sum() == 0.0
    assert hist[2] == pytest.approx(0.75 * 64 * np.sqrt(2))
    assert hist[3] == pytest.approx(0.25 * 64 * np.sqrt(2))


def test_hog_shape_and_normalization_bounds(rng):
    fm = compute_hog(rng.uniform(0, 255, (40, 48)), 4, 9)
    assert fm.data.shape == (10, 12, 9)
    assert fm.channels == 9 and fm.cells_x == 12 and fm.cells_y == 10
    assert np.all(fm.data >= 0) and np.all(fm.data <= 1.0 + 1e-12)


def test_hog_is_invariant_to_contrast_scaling(rng):
    img = rng.uniform(0, 100, (32, 32))
    a = compute_hog(img, 4, 9, clip=None, eps=0.0)
    b = compute_hog(3.0 * img, 4, 9, clip=None, eps=0.0)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_flat_image_gives_zero_features():
    fm = compute_hog(np.full((24, 24), 7.0), 4, 9)
    assert not fm.data.any()


def test_image_too_small():
    with pytest.raises(ShapeError):
        compute_hog(np.zeros((10, 10)), 4, 9)


def test_window_stack_matches_crop(rng):
    fm = FeatureMap(rng.normal(size=(6, 7, 3)), 4)
    win = window_stack(fm, 3, 2)
    assert win.shape == (5, 5, 18)
    for y in range(5):
        for x in range(5):
            np.testing.assert_array_equal(win[y, x], crop_feature(fm, (x, y), 3, 2))
    np.testing.assert_array_equal(crop_feature(fm, (0, 0), 1, 1), fm.data[0, 0])
    with pytest.raises(ShapeError):
        crop_feature(fm, (5, 0), 3, 2)
