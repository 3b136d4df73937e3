import numpy as np
import pytest

from dronedet.augment import (
    AugmentConfig, Sample, anchor_based_crop, branch, color_jitter, gaussian_blur, gaussian_kernel,
    horizontal_flip, pipeline,
)


def sample(h=100, w=100, boxes=((0.4, 0.4, 0.6, 0.6),), seed=0):
    img = np.random.default_rng(seed).uniform(size=(3, h, w))
    return Sample(img, np.array(boxes), np.ones(len(boxes), dtype=int))


def test_crop_closed_form():
    out = anchor_based_crop(sample(), np.random.default_rng(0), size_ratio=0.5)
    info = dict(out.history[-1][1])
    assert info["side"] == 40  # 0.2 / 0.5 of a 100 px image
    assert out.image.shape == (3, 40, 40)
    b = out.boxes[0]
    assert max(b[2] - b[0], b[3] - b[1]) == pytest.approx(0.5)


def test_crop_keeps_selected_and_boxes_valid():
    rng = np.random.default_rng(1)
    boxes = [(0.05, 0.05, 0.1, 0.12), (0.5, 0.5, 0.7, 0.6), (0.8, 0.1, 0.95, 0.3), (0.3, 0.7, 0.32, 0.74)]
    s = sample(120, 160, boxes)
    for _ in range(300):
        out = anchor_based_crop(s, rng)
        info = out.history[-1][1]
        assert info["size_ratio"] in (0.1, 0.3, 0.5, 0.7, 0.9)
        assert len(out.boxes) >= 1
        assert np.all(out.boxes[:, 0] <= out.boxes[:, 2]) and np.all(out.boxes[:, 1] <= out.boxes[:, 3])
        assert out.boxes.min() >= 0 and out.boxes.max() <= 1
        # the selected box (scaled back) lies where it started
        x0, y0, side = info["x0"], info["y0"], info["side"]
        sel = np.array(boxes[info["gt"]]) * [160, 120, 160, 120]
        cx, cy = (sel[0] + sel[2]) / 2, (sel[1] + sel[3]) / 2
        assert x0 <= cx <= x0 + side and y0 <= cy <= y0 + side


def test_crop_requires_gt():
    with pytest.raises(ValueError):
        anchor_based_crop(sample(boxes=()), np.random.default_rng(0))
    with pytest.raises(ValueError):
        pipeline(sample(boxes=()), np.random.default_rng(0), AugmentConfig(crop_prob=1.0))


def test_blur_properties():
    const = Sample(np.full((3, 30, 30), 0.3), np.zeros((0, 4)), np.zeros(0))
    np.testing.assert_allclose(gaussian_blur(const, 2.0).image, 0.3, atol=1e-15)
    delta = np.zeros((3, 41, 41))
    delta[:, 20, 20] = 1
    k = gaussian_kernel(1.5)
    out = gaussian_blur(Sample(delta, np.zeros((0, 4)), np.zeros(0)), 1.5).image
    r = len(k) // 2
    np.testing.assert_allclose(out[0, 20 - r : 21 + r, 20 - r : 21 + r], np.outer(k, k), atol=1e-15)
    assert abs(out[0].sum() - 1) < 1e-9
    s = sample(40, 40)
    for sigma in (0.5, 1.0, 3.0):
        b = gaussian_blur(s, sigma)
        assert b.image.var() < s.image.var()
        assert abs(b.image.mean() - s.image.mean()) < 1e-6
        np.testing.assert_array_equal(b.boxes, s.boxes)
    with pytest.raises(ValueError):
        gaussian_blur(s, 0)


def test_flip():
    s = sample(boxes=((0.1, 0.2, 0.3, 0.4),))
    f = horizontal_flip(s)
    np.testing.assert_allclose(f.boxes[0], [0.7, 0.2, 0.9, 0.4])
    ff = horizontal_flip(f)
    np.testing.assert_array_equal(ff.image, s.image)
    np.testing.assert_allclose(ff.boxes, s.boxes, atol=1e-15)


def test_jitter():
    s = sample()
    same = color_jitter(s, np.random.default_rng(0), 0, 0, 0)
    np.testing.assert_allclose(same.image, s.image, atol=1e-15)
    j = color_jitter(s, np.random.default_rng(0))
    assert j.image.min() >= 0 and j.image.max() <= 1
    info = j.history[-1][1]
    assert 0.8 <= info["brightness"] <= 1.2 and 0.5 <= info["contrast"] <= 1.5


def test_pipeline_contract():
    s = sample(90, 130, ((0.1, 0.1, 0.2, 0.3), (0.6, 0.5, 0.8, 0.9)))
    cfg = AugmentConfig(out_size=64)
    for seed in range(40):
        a = pipeline(s, np.random.default_rng(seed), cfg)
        b = pipeline(s, np.random.default_rng(seed), cfg)
        assert a.image.shape == (3, 64, 64)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.boxes, b.boxes)
        assert branch(a) in ("crop", "blur")
        assert np.all(a.boxes[:, :2] <= a.boxes[:, 2:]) and a.boxes.min() >= 0 and a.boxes.max() <= 1


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(crop_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(crop_mode="other")
