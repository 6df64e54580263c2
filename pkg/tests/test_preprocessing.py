import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scripts.preprocessing import (
    PreprocessConfig,
    center_crop,
    clahe_slice,
    clahe_volume,
    fitted_crop,
    flip_volume,
    normalize_volume,
    offline_flips,
    paste_center,
    preprocess_volume,
    source_case,
    window_and_scale,
)
from scripts.volume_io import Volume


def test_window_clamps_and_scales():
    x = np.array([[[-2000.0, -1000.0, 0.0, 500.0, 3000.0]]])
    np.testing.assert_allclose(window_and_scale(x), [[[0.0, 0.0, 0.5, 0.75, 1.0]]])
    with pytest.raises(ValueError):
        window_and_scale(x, 10, 10)


def test_normalize_gives_zero_mean_unit_std(rng):
    x = rng.normal(5.0, 3.0, size=(3, 8, 8))
    out = normalize_volume(x)
    assert out.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.std() == pytest.approx(1.0)
    with pytest.raises(ValueError, match="zero variance"):
        normalize_volume(np.ones((2, 2, 2)))


def test_intensity_steps_keep_labels():
    labels = np.zeros((2, 4, 4), dtype=np.uint8)
    labels[0, 1, 1] = 2
    vol = Volume(np.linspace(-1200, 800, 32).reshape(2, 4, 4), (1, 1, 1), labels)
    out = normalize_volume(window_and_scale(vol))
    np.testing.assert_array_equal(out.labels, labels)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(0.0, 1.0)))
def test_clahe_output_stays_in_unit_range(img):
    out = clahe_slice(img, 2.0, (4, 4))
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_clahe_constant_slice_stays_constant():
    out = clahe_slice(np.full((32, 32), 0.3), 2.0, (4, 4))
    assert np.ptp(out) == 0.0


def test_clahe_output_is_on_the_grey_level_grid(rng):
    out = clahe_slice(rng.random((24, 24)), 2.0, (3, 3))
    np.testing.assert_allclose(out * 255, np.rint(out * 255), atol=1e-9)


def test_clahe_single_tile_is_monotone(rng):
    img = rng.random((20, 24))
    out = clahe_slice(img, 3.0, (1, 1))
    order = np.argsort(img, axis=None)
    assert np.all(np.diff(out.ravel()[order]) >= -1e-12)


def test_clahe_unclipped_single_tile_is_histogram_equalization(rng):
    img = rng.random((10, 10))
    out = clahe_slice(img, np.inf, (1, 1))
    idx = np.rint(img * 255).astype(int)
    cdf = np.cumsum(np.bincount(idx.ravel(), minlength=256)) / img.size
    np.testing.assert_allclose(out, np.rint(cdf[idx] * 255) / 255, atol=1 / 255 + 1e-9)


def test_clahe_clip_limits_contrast_gain():
    img = np.full((16, 16), 0.50)
    img[:, 8:] = 0.52
    strong = clahe_slice(img, np.inf, (1, 1))
    weak = clahe_slice(img, 1.0, (1, 1))
    assert np.ptp(strong) > 0.4
    assert np.ptp(weak) < 0.1


def test_clahe_errors():
    with pytest.raises(ValueError):
        clahe_slice(np.full((4, 4), 2.0))
    with pytest.raises(ValueError):
        clahe_slice(np.zeros((4, 4)), tiles=(8, 8))
    with pytest.raises(ValueError):
        clahe_slice(np.zeros((4, 4, 1)))
    with pytest.raises(ValueError):
        clahe_slice(np.zeros((8, 8)), clip_limit=0.0, tiles=(2, 2))


def test_clahe_volume_is_per_slice(rng):
    vol = rng.random((3, 16, 16))
    out = clahe_volume(vol, 2.0, (2, 2))
    np.testing.assert_array_equal(out[1], clahe_slice(vol[1], 2.0, (2, 2)))


def test_center_crop_and_paste_back():
    x = np.arange(2 * 6 * 7).reshape(2, 6, 7)
    c = center_crop(x, 4, 4)
    np.testing.assert_array_equal(c, x[:, 1:5, 1:5])
    full = paste_center(c, (6, 7))
    np.testing.assert_array_equal(full[:, 1:5, 1:5], c)
    assert full[:, 0].sum() == 0
    with pytest.raises(ValueError):
        center_crop(x, 8, 4)


def test_fitted_crop_respects_divisor():
    assert fitted_crop((96, 96), (288, 288), 16) == (96, 96)
    assert fitted_crop((100, 70), (288, 64), 16) == (96, 64)
    with pytest.raises(ValueError):
        fitted_crop((8, 64), (288, 288), 16)


def test_flips_move_labels_with_image():
    data = np.zeros((1, 2, 3))
    data[0, 0, 0] = 1.0
    vol = Volume(data, (1, 1, 1), data.astype(np.uint8))
    h = flip_volume(vol, "horizontal")
    v = flip_volume(vol, "vertical")
    assert h.data[0, 0, 2] == 1.0 and h.labels[0, 0, 2] == 1
    assert v.data[0, 1, 0] == 1.0 and v.labels[0, 1, 0] == 1
    with pytest.raises(ValueError):
        flip_volume(vol, "diagonal")


def test_offline_flips_ids():
    vol = Volume(np.zeros((1, 2, 2)), (1, 1, 1))
    ids = [cid for cid, _ in offline_flips("case_004", vol)]
    assert ids == ["case_004", "case_004#flip_h", "case_004#flip_v"]
    assert {source_case(c) for c in ids} == {"case_004"}


def test_preprocess_volume_pipeline(small_phantom):
    cfg = PreprocessConfig(crop=(48, 40), clahe_tiles=(4, 4))
    out = preprocess_volume(small_phantom, cfg, divisor=16)
    assert out.shape == (small_phantom.shape[0], 48, 32)
    assert out.labels.shape == out.shape
    assert out.spacing == small_phantom.spacing
    assert abs(out.data.mean()) < 1.0


def test_config_validation_and_dict():
    with pytest.raises(ValueError):
        PreprocessConfig(window_lo=5, window_hi=5).validate()
    with pytest.raises(ValueError):
        PreprocessConfig(crop=(0, 5)).validate()
    cfg = PreprocessConfig(clahe_tiles=(4, 4), crop=(64, 64))
    assert PreprocessConfig.from_dict(cfg.to_dict()) == cfg
