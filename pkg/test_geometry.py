#!/usr/bin/env python3
"""
Test script for ellipse geometry

Rasterization against point containment, moment fitting round trips, transform
versus image warp consistency and center-of-mass extraction.
"""

import logging
import math

import cv2
import numpy as np
import pytest

from eyeseg_dg.geometry.ellipse import (
    IRIS,
    PUPIL,
    Ellipse,
    SimilarityTransform,
    center_of_mass,
    compose_mask,
    ellipse_contains,
    fit_ellipse_moments,
    iris_fully_visible,
    rasterize_ellipse,
    transform_ellipse,
)
from eyeseg_dg.tensor.autodiff import Tensor
from eyeseg_dg.utils.errors import GeometryError

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(name)s: %(message)s')
logger = logging.getLogger(__name__)


def random_ellipse(rng, height, width, a_range=(8.0, 30.0)):
    a = rng.uniform(*a_range)
    b = rng.uniform(0.5 * a, a)
    margin = a + 2
    return Ellipse.make(rng.uniform(margin, width - 1 - margin), rng.uniform(margin, height - 1 - margin),
                        a, b, rng.uniform(-math.pi / 2, math.pi / 2))


def iou(m1, m2):
    union = np.count_nonzero(m1 | m2)
    return np.count_nonzero(m1 & m2) / union if union else 1.0


def angle_gap(t1, t2):
    d = (t1 - t2) % math.pi
    return min(d, math.pi - d)


def test_make_swaps_axes():
    e = Ellipse.make(10, 10, 3, 6, 0.0)
    assert (e.a, e.b) == (6.0, 3.0)
    assert math.isclose(e.theta, -math.pi / 2)


def test_make_rejects_non_positive_axes():
    with pytest.raises(GeometryError):
        Ellipse.make(0, 0, 0.0, 1.0, 0.0)


def test_rasterize_matches_point_containment():
    rng = np.random.default_rng(1)
    for _ in range(20):
        e = random_ellipse(rng, 40, 50, (3.0, 12.0))
        mask = rasterize_ellipse(e, 40, 50)
        brute = np.array([[ellipse_contains(e, x, y) for x in range(50)] for y in range(40)])
        assert np.array_equal(mask, brute)


def test_rasterize_off_frame_is_empty():
    assert not rasterize_ellipse(Ellipse.make(-50, -50, 5, 4, 0.3), 20, 20).any()


def test_fit_recovers_ellipse():
    rng = np.random.default_rng(2)
    for _ in range(200):
        e = random_ellipse(rng, 120, 160)
        fit = fit_ellipse_moments(rasterize_ellipse(e, 120, 160))
        assert math.hypot(fit.cx - e.cx, fit.cy - e.cy) < 0.5
        assert abs(fit.a - e.a) < 0.05 * e.a + 1.0
        assert abs(fit.b - e.b) < 0.05 * e.b + 1.0
        if e.a / e.b > 1.2:
            assert angle_gap(fit.theta, e.theta) < 0.1


def test_fit_rejects_tiny_masks():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2, 2:5] = True
    with pytest.raises(GeometryError):
        fit_ellipse_moments(mask)


def test_transform_matches_image_warp():
    rng = np.random.default_rng(3)
    height, width = 240, 320
    for _ in range(20):
        e = Ellipse.make(rng.uniform(130, 190), rng.uniform(90, 150), rng.uniform(35, 60),
                         rng.uniform(25, 35), rng.uniform(-1.5, 1.5))
        t = SimilarityTransform.about_center(height, width, rng.uniform(0.6, 0.9),
                                             rng.uniform(-math.pi / 4, math.pi / 4),
                                             rng.uniform(-20, 20), rng.uniform(-20, 20))
        source = rasterize_ellipse(e, height, width).astype(np.uint8)
        warped = cv2.warpAffine(source, t.affine(), (width, height), flags=cv2.INTER_NEAREST) > 0
        moved = rasterize_ellipse(transform_ellipse(e, t), height, width)
        assert iou(warped, moved) >= 0.95


def test_horizontal_flip_matches_mirrored_mask():
    rng = np.random.default_rng(4)
    flip = SimilarityTransform.horizontal_flip(96)
    for _ in range(20):
        e = random_ellipse(rng, 72, 96, (4.0, 15.0))
        mirrored = np.fliplr(rasterize_ellipse(e, 72, 96))
        assert iou(mirrored, rasterize_ellipse(transform_ellipse(e, flip), 72, 96)) >= 0.99


def test_double_flip_is_identity():
    e = Ellipse.make(30.5, 20.25, 12.0, 7.0, 0.7)
    flip = SimilarityTransform.horizontal_flip(96)
    back = transform_ellipse(transform_ellipse(e, flip), flip)
    for v1, v2 in zip(back.as_list(), e.as_list()):
        assert abs(v1 - v2) < 1e-9


def test_compose_and_inverse():
    t = SimilarityTransform.about_center(72, 96, 0.7, 0.3, 4.0, -2.0)
    flip = SimilarityTransform.horizontal_flip(96)
    both = t.compose(flip)
    assert both.hflip
    x, y = both.apply_point(10.0, 20.0)
    expected = t.apply_point(*flip.apply_point(10.0, 20.0))
    assert math.isclose(x, expected[0], abs_tol=1e-9) and math.isclose(y, expected[1], abs_tol=1e-9)
    ident = both.compose(both.inverse())
    assert np.allclose(ident.matrix(), np.eye(3), atol=1e-9)


def test_transform_dict_round_trip():
    t = SimilarityTransform(0.8, 0.2, 3.0, -1.0, True, 96)
    assert SimilarityTransform.from_dict(t.to_dict()) == t


def test_center_of_mass_numpy_and_tensor_agree():
    rng = np.random.default_rng(5)
    plane = rng.uniform(0, 1, (12, 16))
    x, y = center_of_mass(plane)
    tx, ty = center_of_mass(Tensor(plane, dtype=np.float64))
    assert math.isclose(x, tx.item(), rel_tol=1e-12)
    assert math.isclose(y, ty.item(), rel_tol=1e-12)


def test_center_of_mass_single_pixel():
    plane = np.zeros((10, 10))
    plane[3, 7] = 1.0
    assert center_of_mass(plane) == (7.0, 3.0)


def test_center_of_mass_rejects_bad_maps():
    with pytest.raises(GeometryError):
        center_of_mass(np.zeros((4, 4)))
    with pytest.raises(GeometryError):
        center_of_mass(-np.ones((4, 4)))


def test_center_of_mass_gradient_flows():
    plane = Tensor(np.ones((1, 5, 5)), requires_grad=True, dtype=np.float64)
    x, _ = center_of_mass(plane)
    x.sum().backward()
    # moving mass right of center pulls the estimate right
    assert plane.grad[0, 2, 4] > 0 > plane.grad[0, 2, 0]


def test_compose_mask_layers_pupil_over_iris():
    pupil = Ellipse.make(20, 15, 4, 4, 0)
    iris = Ellipse.make(20, 15, 10, 9, 0)
    mask = compose_mask(pupil, iris, 30, 40)
    assert mask[15, 20] == PUPIL
    assert mask[15, 28] == IRIS
    assert mask[0, 0] == 0


def test_iris_visibility():
    assert iris_fully_visible(Ellipse.make(48, 36, 12, 10, 0.2), 72, 96)
    assert not iris_fully_visible(Ellipse.make(5, 36, 12, 10, 0.2), 72, 96)


def main():
    """Main function"""
    logger.info("Starting geometry tests")
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            logger.info(f"✅ {name}")
        except Exception as e:
            failed += 1
            logger.error(f"❌ {name}: {e}")
    return failed == 0


if __name__ == "__main__":
    success = main()
    if not success:
        exit(1)
