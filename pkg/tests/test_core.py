import math

import numpy as np
import pytest

from svpsf.core import (
    CameraConfig,
    DepthMap,
    DimensionError,
    ParameterError,
    check_image,
    check_kernel,
    convolve_valid,
    convolve_valid_fft,
    crop_center,
    delta_kernel,
    from_polar,
    kernel_centroid,
    to_polar,
)

from conftest import random_kernel


def brute_convolve(img, k):
    kh, kw = k.shape
    oh, ow = img.shape[0] - kh + 1, img.shape[1] - kw + 1
    out = np.zeros((oh, ow))
    for y in range(oh):
        for x in range(ow):
            acc = 0.0
            for v in range(kh):
                for u in range(kw):
                    acc += k[v, u] * img[y + kh - 1 - v, x + kw - 1 - u]
            out[y, x] = acc
    return out


class TestPolar:
    def test_center(self):
        assert to_polar(250, 250, 501, 501) == (0.0, 0.0)

    def test_right_of_center(self):
        ih, th = to_polar(500, 250, 501, 501)
        assert ih == pytest.approx(250 / (250 * math.sqrt(2)), abs=1e-12)
        assert th == 0.0

    def test_above_center_is_quarter_turn(self):
        ih, th = to_polar(250, 0, 501, 501)
        assert ih == pytest.approx(0.70711, abs=1e-5)
        assert th == pytest.approx(math.pi / 2)

    def test_corner_is_one(self):
        assert to_polar(0, 0, 501, 501).ih == pytest.approx(1.0)
        assert to_polar(500, 500, 501, 501).theta == pytest.approx(7 * math.pi / 4)

    def test_theta_range(self, rng):
        xs, ys = rng.uniform(0, 100, 500), rng.uniform(0, 80, 500)
        ih, th = to_polar(xs, ys, 101, 81)
        assert np.all((th >= 0) & (th < 2 * np.pi))
        assert np.all((ih >= 0) & (ih <= 1))

    def test_scale_consistency(self, rng):
        for _ in range(20):
            dx, dy = rng.uniform(-50, 50, 2)
            a = to_polar(50 + dx, 50 + dy, 101, 101)
            b = to_polar(100 + 2 * dx, 100 + 2 * dy, 201, 201)
            assert a.ih == pytest.approx(b.ih, abs=1e-12)
            assert a.theta == pytest.approx(b.theta, abs=1e-12)

    def test_from_polar_inverts(self, rng):
        x, y = rng.uniform(0, 255, 2)
        ih, th = to_polar(x, y, 256, 200)
        assert np.allclose(from_polar(ih, th, 256, 200), (x, y), atol=1e-9)


class TestConvolveValid:
    def test_delta_gives_crop_bitwise(self, rng):
        img = rng.random((40, 33))
        assert np.array_equal(convolve_valid(img, delta_kernel(3)), img[3:-3, 3:-3])

    def test_constant_image(self, rng):
        out = convolve_valid(np.full((30, 30), 0.37), random_kernel(rng, 4))
        assert np.allclose(out, 0.37, rtol=0, atol=1e-15)

    def test_matches_brute_force(self, rng):
        img = rng.random((32, 32))
        k = random_kernel(rng, 3)
        assert np.allclose(convolve_valid(img, k), brute_convolve(img, k), rtol=1e-13, atol=0)

    def test_true_convolution_flips_kernel(self):
        img = np.zeros((5, 5))
        img[2, 2] = 1.0
        k = np.zeros((3, 3))
        k[0, 2] = 1.0  # up-right tap
        out = convolve_valid(img, k)
        # a point source spreads in the kernel's own orientation
        assert out[0, 2] == 1.0 and out.sum() == 1.0

    def test_linearity(self, rng):
        a, b = rng.random((20, 20)), rng.random((20, 20))
        k = random_kernel(rng, 2)
        lhs = convolve_valid(2.5 * a - 0.5 * b, k)
        rhs = 2.5 * convolve_valid(a, k) - 0.5 * convolve_valid(b, k)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-14)

    def test_fft_variant_agrees(self, rng):
        img = rng.random((60, 50))
        k = random_kernel(rng, 5)
        assert np.allclose(convolve_valid_fft(img, k), convolve_valid(img, k), atol=1e-12)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            convolve_valid(np.zeros((10, 30)), delta_kernel(12))


class TestValidation:
    def test_check_image_clips(self):
        out = check_image([[-1.0, 0.5], [2.0, 1.0]])
        assert out.min() == 0.0 and out.max() == 1.0

    def test_check_image_rejects(self):
        with pytest.raises(DimensionError):
            check_image(np.zeros(5))
        with pytest.raises(ParameterError):
            check_image([[np.nan]])

    def test_check_kernel(self, rng):
        check_kernel(random_kernel(rng))
        with pytest.raises(DimensionError):
            check_kernel(np.ones((4, 4)) / 16)
        with pytest.raises(ParameterError):
            check_kernel(np.ones((3, 3)))
        bad = delta_kernel(1) * 2 - 1.0 / 9
        with pytest.raises(ParameterError):
            check_kernel(bad / bad.sum())

    def test_centroid(self):
        k = np.zeros((5, 5))
        k[2, 4] = 1.0
        assert kernel_centroid(k) == (2.0, 0.0)

    def test_crop(self, rng):
        a = rng.random((9, 9))
        assert np.array_equal(crop_center(a, 2), a[2:7, 2:7])
        assert np.array_equal(crop_center(a, 0), a)


class TestCameraConfig:
    def test_defaults(self):
        cfg = CameraConfig()
        assert cfg.breathing_mags == (1.0,)
        assert cfg.depth_range == (0.5, 1.415)
        assert cfg.r_max == pytest.approx(250 * math.sqrt(2))

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"focus_distances": (0.5, 0.4)},
            {"focus_distances": (0.01,)},
            {"f1": 2.0, "f2": 6.0},
            {"breathing_mags": (1.0, 1.1)},
            {"focus_distances": (0.3, 0.4), "breathing_mags": (1.01, 1.0)},
            {"depth_range": (0.5, 0.4)},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            CameraConfig(**kwargs)

    def test_dict_round_trip(self, small_camera):
        assert CameraConfig.from_dict(small_camera.to_dict()) == small_camera

    def test_unknown_key(self):
        with pytest.raises(ParameterError, match="zoom"):
            CameraConfig.from_dict({"zoom": 2})


class TestDepthMap:
    def test_out_of_range_invalidated(self):
        d = np.array([[0.4, 0.6], [0.8, 1.2]])
        dm = DepthMap(d, np.ones((2, 2), bool), (0.5, 1.0))
        assert dm.valid.tolist() == [[False, True], [True, False]]

    def test_constant(self):
        dm = DepthMap.constant(0.7, 4, 3)
        assert dm.width == 4 and dm.height == 3 and dm.valid.all()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            DepthMap(np.zeros((2, 2)), np.ones((3, 2), bool), (0, 1))
