import numpy as np
import pytest

from astroloc.training.augment import (
    AugmentationParams,
    AugmentationRanges,
    apply_params,
    color_jitter,
    homography,
    per_image_augment,
    sample_params,
    yearwise_augment,
)


def test_identity_params_leave_images_alone(rng):
    imgs = rng.random((3, 8, 8, 3))
    assert apply_params(imgs, AugmentationParams()) is imgs
    p = sample_params(AugmentationRanges.none(), rng)
    assert p.is_identity


def test_quarter_turn_is_rot90(rng):
    img = rng.random((1, 9, 9, 3))
    out = apply_params(img, AugmentationParams(angle_deg=90.0))
    np.testing.assert_allclose(out[0], np.rot90(img[0], 1), atol=1e-12)


def test_color_oracles(rng):
    imgs = rng.random((2, 4, 4, 3)) * 0.5
    np.testing.assert_allclose(color_jitter(imgs, AugmentationParams(brightness=1.5)), imgs * 1.5)
    gray = color_jitter(imgs, AugmentationParams(saturation=0.0))
    np.testing.assert_allclose(gray[..., 0], gray[..., 1], atol=1e-12)
    np.testing.assert_allclose(gray[..., 0], imgs @ [0.299, 0.587, 0.114], atol=1e-12)
    flat = color_jitter(imgs, AugmentationParams(contrast=0.0))
    assert np.ptp(flat @ [0.299, 0.587, 0.114], axis=(1, 2)).max() < 1e-12
    # a full hue turn comes back to the start
    np.testing.assert_allclose(color_jitter(imgs, AugmentationParams(hue=1.0)), imgs, atol=1e-12)


def test_homography_maps_corners(rng):
    src = [(0, 0), (10, 0), (10, 10), (0, 10)]
    dst = [(1, 2), (9, 1), (11, 12), (-1, 9)]
    H = homography(src, dst)
    for (x, y), (u, v) in zip(src, dst):
        p = H @ [x, y, 1.0]
        assert p[0] / p[2] == pytest.approx(u) and p[1] / p[2] == pytest.approx(v)


def test_yearwise_applies_one_parameter_set_per_year(rng):
    base = rng.random((4, 12, 12, 3))
    # two regions, two years each, stacked quadruplet-style
    imgs = np.concatenate([base, base])
    years = np.array([2019, 2020, 2021, 2022] * 2)
    out, plan = yearwise_augment(imgs, years, AugmentationRanges(), rng)
    assert set(plan.params) == {2019, 2020, 2021, 2022}
    assert np.array_equal(out[:4], out[4:])
    for i, y in enumerate(years[:4]):
        np.testing.assert_array_equal(out[i], apply_params(imgs[i:i + 1], plan[int(y)])[0])
    with pytest.raises(ValueError):
        yearwise_augment(imgs, years, AugmentationRanges(), rng, known_years=(2019,))
    with pytest.raises(ValueError):
        yearwise_augment(imgs, years[:3], AugmentationRanges(), rng)


def test_per_image_differs_within_a_year(rng):
    img = rng.random((1, 12, 12, 3))
    out, params = per_image_augment(np.repeat(img, 3, axis=0), AugmentationRanges(), rng)
    assert len(params) == 3
    assert not np.array_equal(out[0], out[1])


def test_zoom_crops_a_sub_square(rng):
    img = rng.random((1, 9, 9, 3))
    p = AugmentationParams(scale=0.5, offset=(0.5, 0.5))
    out = apply_params(img, p)
    # every second output pixel lands on an input pixel of the lower-right quarter
    np.testing.assert_allclose(out[0, ::2, ::2], img[0, 4:, 4:], atol=1e-12)
    r = sample_params(AugmentationRanges(zoom=0.3), rng)
    assert 0.7 <= r.scale <= 1.0 and all(0 <= o <= 1 - r.scale for o in r.offset)
    with pytest.raises(ValueError):
        AugmentationRanges(zoom=1.0)
